"""Trainable building blocks with hand-written forward and reverse passes.

Fields are batched as ``[B, C, *grid]``. Complex parameters are kept in the
:class:`ParamStore` as separate real and imaginary arrays, and their gradients
are the gradients of the (real) loss with respect to those two real arrays.
"""
from __future__ import annotations

from collections import OrderedDict

import numpy as np

from .tensor import TensorError, is_power_of_two


class ShapeError(TensorError):
    pass


class StaleCacheError(RuntimeError):
    pass


class ParamStore:
    """Named real parameter arrays with congruent gradient buffers."""

    def __init__(self):
        self.params: OrderedDict[str, np.ndarray] = OrderedDict()
        self.grads: OrderedDict[str, np.ndarray] = OrderedDict()

    def add(self, name, value):
        if name in self.params:
            raise KeyError(f"duplicate parameter {name!r}")
        value = np.array(value, dtype=np.float64)
        self.params[name] = value
        self.grads[name] = np.zeros_like(value)

    def add_complex(self, name, value):
        value = np.asarray(value, dtype=np.complex128)
        self.add(name + ".re", value.real)
        self.add(name + ".im", value.imag)

    def __getitem__(self, name):
        return self.params[name]

    def __contains__(self, name):
        return name in self.params

    def complex(self, name):
        return self.params[name + ".re"] + 1j * self.params[name + ".im"]

    def accumulate(self, name, g):
        self.grads[name] += g

    def accumulate_complex(self, name, g):
        self.grads[name + ".re"] += g.real
        self.grads[name + ".im"] += g.imag

    def zero_grad(self):
        for g in self.grads.values():
            g[...] = 0.0

    def names(self):
        return list(self.params)

    def count(self, prefix=""):
        return sum(v.size for k, v in self.params.items() if k.startswith(prefix))

    def flat(self, which="params"):
        src = self.params if which == "params" else self.grads
        return np.concatenate([v.ravel() for v in src.values()]) if src else np.zeros(0)

    def set_flat(self, vec):
        i = 0
        for v in self.params.values():
            v[...] = vec[i: i + v.size].reshape(v.shape)
            i += v.size

    def copy(self):
        other = ParamStore()
        for k, v in self.params.items():
            other.add(k, v.copy())
        return other


# -- spectral transforms and their adjoints ----------------------------------------

def _spatial_axes(ndim_grid):
    return tuple(range(-ndim_grid, 0))


def padded_rfftn(x, ndim_grid):
    """Zero-pad every spatial axis from ``n`` to ``2n`` and take the half spectrum."""
    axes = _spatial_axes(ndim_grid)
    shape = tuple(2 * x.shape[a] for a in axes)
    return np.fft.rfftn(x, s=shape, axes=axes)


def padded_irfftn(X, grid):
    """Hermitian-reconstruct, inverse transform at ``2n``, keep the first ``n`` per axis."""
    axes = _spatial_axes(len(grid))
    y = np.fft.irfftn(X, s=tuple(2 * n for n in grid), axes=axes)
    return y[(Ellipsis,) + tuple(slice(0, n) for n in grid)]


def _half_weights(nbins, n_full):
    w = np.full(nbins, 0.5)
    w[0] = 1.0
    if n_full % 2 == 0:
        w[-1] = 1.0
    return w


def padded_rfftn_adjoint(G, grid):
    """Adjoint of :func:`padded_rfftn` under the real inner product ``Re<a, b>``."""
    nd = len(grid)
    axes = _spatial_axes(nd)
    full = tuple(2 * n for n in grid)
    G = G * _half_weights(G.shape[-1], full[-1])
    if nd > 1:
        G = np.fft.ifftn(G, axes=axes[:-1]) * np.prod(full[:-1])
    y = np.fft.irfft(G, n=full[-1], axis=-1) * full[-1]
    return y[(Ellipsis,) + tuple(slice(0, n) for n in grid)]


def padded_irfftn_adjoint(g, grid):
    """Adjoint of :func:`padded_irfftn`; returns the complex gradient ``dRe + i dIm``."""
    nd = len(grid)
    axes = _spatial_axes(nd)
    full = tuple(2 * n for n in grid)
    X = np.fft.rfftn(g, s=full, axes=axes)
    c = 1.0 / _half_weights(X.shape[-1], full[-1])  # 1 at DC/Nyquist, 2 elsewhere
    return X * c / np.prod(full)


# -- fast convolution --------------------------------------------------------------

def spectrum_shape(grid):
    return tuple(2 * n for n in grid[:-1]) + (grid[-1] + 1,)


class FastConv:
    """Per-bin complex channel mixing in the zero-padded Fourier domain."""

    def __init__(self, name, c_in, c_out, grid):
        if not all(is_power_of_two(n) for n in grid):
            raise ShapeError(f"grid {grid} must have power-of-two sides")
        self.name, self.c_in, self.c_out, self.grid = name, c_in, c_out, tuple(grid)
        self.bins = spectrum_shape(self.grid)

    def init(self, store: ParamStore, rng):
        nb = int(np.prod(self.bins))
        std = 1.0 / (self.c_in * np.sqrt(nb))
        shape = (self.c_out, self.c_in) + self.bins
        A = (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) * std / np.sqrt(2)
        store.add_complex(self.name + ".A", A)
        store.add_complex(self.name + ".b", np.zeros((self.c_out,) + self.bins))

    def n_params(self):
        nb = int(np.prod(self.bins))
        return 2 * nb * self.c_out * (self.c_in + 1)

    def forward(self, store, H):
        A = store.complex(self.name + ".A")
        b = store.complex(self.name + ".b")
        return fastconv_forward(A, b, H)

    def backward(self, store, cache, dY):
        A = store.complex(self.name + ".A")
        dH, dA, db = fastconv_backward(A, cache, dY)
        store.accumulate_complex(self.name + ".A", dA)
        store.accumulate_complex(self.name + ".b", db)
        return dH


def _mix(A, X):
    """``Y[b, o, ...] = sum_i A[o, i, ...] X[b, i, ...]`` as batched matmuls over bins."""
    B = X.shape[0]
    o, i = A.shape[:2]
    bins = A.shape[2:]
    nb = int(np.prod(bins))
    Am = A.reshape(o, i, nb).transpose(2, 0, 1)          # [nb, o, i]
    Xm = X.reshape(B, i, nb).transpose(2, 1, 0)          # [nb, i, B]
    return (Am @ Xm).transpose(2, 1, 0).reshape((B, o) + bins)


def fastconv_forward(A, b, H):
    H = np.asarray(H, dtype=np.float64)
    grid = H.shape[2:]
    if A.shape[1] != H.shape[1]:
        raise ShapeError(f"input has {H.shape[1]} channels, weights expect {A.shape[1]}")
    if A.shape[2:] != spectrum_shape(grid):
        raise ShapeError(f"weights bins {A.shape[2:]} do not match grid {grid}")
    Hf = padded_rfftn(H, len(grid))
    Yf = _mix(A, Hf) + b[None]
    Y = padded_irfftn(Yf, grid)
    return Y, {"Hf": Hf, "grid": grid, "shape": (A.shape, H.shape)}


def fastconv_backward(A, cache, dY):
    if cache is None or "Hf" not in cache:
        raise StaleCacheError("fastconv backward needs the cache of a matching forward call")
    w_shape, h_shape = cache["shape"]
    if A.shape != w_shape or dY.shape[0] != h_shape[0] or dY.shape[2:] != h_shape[2:]:
        raise StaleCacheError("cache does not match these weights or gradient shape")
    grid = cache["grid"]
    Hf = cache["Hf"]
    gY = padded_irfftn_adjoint(dY, grid)
    B = Hf.shape[0]
    o, i = A.shape[:2]
    nb = int(np.prod(A.shape[2:]))
    gYm = gY.reshape(B, o, nb).transpose(2, 1, 0)                       # [nb, o, B]
    Hm = Hf.reshape(B, i, nb).transpose(2, 0, 1).conj()                 # [nb, B, i]
    dA = (gYm @ Hm).transpose(1, 2, 0).reshape(A.shape)
    db = gY.sum(axis=0)
    gH = _mix(np.conj(A).swapaxes(0, 1), gY)
    dH = padded_rfftn_adjoint(gH, grid)
    return dH, dA, db


# -- pointwise channel maps --------------------------------------------------------

def affine_forward(W, bias, X):
    if W.shape[1] != X.shape[1]:
        raise ShapeError(f"input has {X.shape[1]} channels, map expects {W.shape[1]}")
    nd = X.ndim - 2
    Y = np.einsum("oi,bi...->bo...", W, X)
    return Y + bias.reshape((1, -1) + (1,) * nd)


def affine_backward(W, X, dY):
    dX = np.einsum("oi,bo...->bi...", W, dY)
    B, o = dY.shape[:2]
    dW = dY.reshape(B, o, -1).transpose(1, 0, 2).reshape(o, -1) @ X.reshape(B, X.shape[1], -1).transpose(1, 0, 2).reshape(X.shape[1], -1).T
    dbias = dY.sum(axis=tuple(a for a in range(dY.ndim) if a != 1))
    return dX, dW, dbias


class Affine:
    """Dense-across-channels, pointwise-in-space affine map (skip connections, state maps)."""

    def __init__(self, name, c_in, c_out):
        self.name, self.c_in, self.c_out = name, c_in, c_out

    def init(self, store: ParamStore, rng=None, identity=False):
        if identity or rng is None:
            W = np.eye(self.c_out, self.c_in)
        else:
            W = rng.standard_normal((self.c_out, self.c_in)) / np.sqrt(max(self.c_in, self.c_out))
        store.add(self.name + ".W", W)
        store.add(self.name + ".bias", np.zeros(self.c_out))

    def n_params(self):
        return self.c_out * (self.c_in + 1)

    def forward(self, store, X):
        return affine_forward(store[self.name + ".W"], store[self.name + ".bias"], X), X

    def backward(self, store, X, dY):
        dX, dW, db = affine_backward(store[self.name + ".W"], X, dY)
        store.accumulate(self.name + ".W", dW)
        store.accumulate(self.name + ".bias", db)
        return dX


skip_map = affine_forward
state_map_in = affine_forward
state_map_out = affine_forward


# -- activations -------------------------------------------------------------------

def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


ACTIVATIONS = {
    "tanh": (np.tanh, lambda x, y: 1.0 - y * y),
    "sigmoid": (sigmoid, lambda x, y: y * (1.0 - y)),
    "relu": (lambda x: np.maximum(x, 0.0), lambda x, y: (x > 0).astype(np.float64)),
    "identity": (lambda x: x, lambda x, y: np.ones_like(x)),
}


def activation(name):
    try:
        return ACTIVATIONS[name]
    except KeyError:
        raise ValueError(f"unknown activation {name!r}") from None


def activation_backward(name, x, y, dy):
    return dy * ACTIVATIONS[name][1](x, y)
