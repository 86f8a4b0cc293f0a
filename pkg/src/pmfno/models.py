"""Recurrent spectral architectures and backpropagation through time.

* ``frnn``: a stack of ``act(conv(H)) + skip(H)`` blocks applied to a latent state.
* ``fgru``: GRU gating where every dense map is a fast convolution.
* ``fno_ref``: Markov-style reference; each step lifts the physical state into
  the latent width, applies the block stack, and projects back, so the state
  carried between steps is the physical field.

``frnn`` and ``fgru`` use trainable affine maps between physical and latent
channels at the start and at every output frame.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .layers import (Affine, FastConv, ParamStore, ShapeError, StaleCacheError, activation,
                     activation_backward, sigmoid)

ARCHITECTURES = ("frnn", "fgru", "fno_ref")


class NonFiniteRolloutError(ArithmeticError):
    def __init__(self, step):
        super().__init__(f"non-finite state at rollout step {step}")
        self.step = step


@dataclass
class ModelConfig:
    architecture: str = "fgru"
    channels: int = 8
    blocks: int = 3
    activation: str = "tanh"
    grid: tuple = (64,)
    state_channels: int = 2

    def __post_init__(self):
        self.grid = tuple(int(n) for n in self.grid)
        if self.architecture not in ARCHITECTURES:
            raise ValueError(f"unknown architecture {self.architecture!r}; expected one of {ARCHITECTURES}")
        if self.blocks < 1 or self.channels < 1 or self.state_channels < 1:
            raise ValueError("blocks, channels and state_channels must be >= 1")
        activation(self.activation)

    def to_dict(self):
        d = asdict(self)
        d["grid"] = list(self.grid)
        return d


class Model:
    def __init__(self, config: ModelConfig, seed=0, store: ParamStore | None = None):
        self.config = config
        c, cu, g = config.channels, config.state_channels, config.grid
        arch = config.architecture
        self.act = config.activation
        if arch == "fgru":
            self.gates = {k: FastConv(f"gru.{k}", c, c, g) for k in ("z", "r", "h")}
            self.blocks = []
        else:
            self.blocks = [(FastConv(f"block{m}.conv", c, c, g), Affine(f"block{m}.skip", c, c))
                           for m in range(config.blocks)]
        if arch == "fno_ref":
            self.lift = Affine("lift", cu, c)
            self.project = Affine("project", c, cu)
        else:
            self.map_in = Affine("map_in", cu, c)
            self.map_out = Affine("map_out", c, cu)
        if store is None:
            store = ParamStore()
            self._init(store, np.random.default_rng(seed))
        self.store = store

    def _init(self, store, rng):
        if self.config.architecture == "fno_ref":
            self.lift.init(store, rng)
        else:
            self.map_in.init(store, rng)
        if self.config.architecture == "fgru":
            for conv in self.gates.values():
                conv.init(store, rng)
        for conv, skip in self.blocks:
            conv.init(store, rng)
            skip.init(store, identity=True)
        if self.config.architecture == "fno_ref":
            self.project.init(store, rng)
        else:
            self.map_out.init(store, rng)

    @property
    def architecture(self):
        return self.config.architecture

    def spectral_param_count(self):
        return sum(v.size for k, v in self.store.params.items() if ".conv." in k or k.startswith("gru."))

    # -- single step ----------------------------------------------------------------

    def _blocks_forward(self, H):
        caches = []
        for conv, skip in self.blocks:
            S, cc = conv.forward(self.store, H)
            fn = activation(self.act)[0]
            A = fn(S)
            D, _ = skip.forward(self.store, H)
            caches.append((H, S, A, cc))
            H = A + D
        return H, caches

    def _blocks_backward(self, caches, dH):
        for (conv, skip), (H, S, A, cc) in zip(reversed(self.blocks), reversed(caches)):
            dS = activation_backward(self.act, S, A, dH)
            dH = conv.backward(self.store, cc, dS) + skip.backward(self.store, H, dH)
        return dH

    def _gru_forward(self, H):
        st = self.store
        Sz, cz = self.gates["z"].forward(st, H)
        Sr, cr = self.gates["r"].forward(st, H)
        Z, R = sigmoid(Sz), sigmoid(Sr)
        RH = R * H
        Sh, ch = self.gates["h"].forward(st, RH)
        Hc = np.tanh(Sh)
        out = (1.0 - Z) * H + Z * Hc
        return out, (H, Z, R, Hc, cz, cr, ch)

    def _gru_backward(self, cache, dOut):
        H, Z, R, Hc, cz, cr, ch = cache
        st = self.store
        dZ = dOut * (Hc - H)
        dHc = dOut * Z
        dH = dOut * (1.0 - Z)
        dSh = dHc * (1.0 - Hc * Hc)
        dRH = self.gates["h"].backward(st, ch, dSh)
        dH += dRH * R
        dSr = dRH * H * R * (1.0 - R)
        dH += self.gates["r"].backward(st, cr, dSr)
        dSz = dZ * Z * (1.0 - Z)
        dH += self.gates["z"].backward(st, cz, dSz)
        return dH

    def cell(self, X):
        """One recurrent step. For ``fno_ref`` ``X`` is the physical state, else the latent state."""
        self._check(X, physical=self.architecture == "fno_ref")
        if self.architecture == "fgru":
            return self._gru_forward(X)
        if self.architecture == "frnn":
            return self._blocks_forward(X)
        H, lc = self.lift.forward(self.store, X)
        H, bc = self._blocks_forward(H)
        U, pc = self.project.forward(self.store, H)
        return U, (lc, bc, pc)

    def cell_backward(self, cache, dOut):
        if self.architecture == "fgru":
            return self._gru_backward(cache, dOut)
        if self.architecture == "frnn":
            return self._blocks_backward(cache, dOut)
        lc, bc, pc = cache
        dH = self.project.backward(self.store, pc, dOut)
        dH = self._blocks_backward(bc, dH)
        return self.lift.backward(self.store, lc, dH)

    def _check(self, X, physical):
        want = (self.config.state_channels if physical else self.config.channels,) + self.config.grid
        if X.shape[1:] != want:
            raise ShapeError(f"state shape {X.shape[1:]} does not match model {want}")


@dataclass
class Tape:
    """Forward-pass record consumed by :func:`rollout_backward`."""

    steps: int
    U0: np.ndarray
    latents: list = field(default_factory=list)
    caches: list = field(default_factory=list)


def rollout(model: Model, U0, steps, keep_cache=False):
    """Predicted trajectory ``[B, K+1, C_u, *grid]`` from initial states ``[B, C_u, *grid]``."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    U0 = np.asarray(U0, dtype=np.float64)
    single = U0.ndim == len(model.config.grid) + 1
    if single:
        U0 = U0[None]
    model._check(U0, physical=True)
    out = np.empty((U0.shape[0], steps + 1) + U0.shape[1:])
    tape = Tape(steps, U0) if keep_cache else None
    st = model.store
    if model.architecture == "fno_ref":
        U = U0
        out[:, 0] = U0
        for k in range(steps):
            U, cache = model.cell(U)
            if not np.all(np.isfinite(U)):
                raise NonFiniteRolloutError(k + 1)
            out[:, k + 1] = U
            if keep_cache:
                tape.caches.append(cache)
    else:
        H, _ = model.map_in.forward(st, U0)
        out[:, 0], _ = model.map_out.forward(st, H)
        if keep_cache:
            tape.latents.append(H)
        for k in range(steps):
            H, cache = model.cell(H)
            if not np.all(np.isfinite(H)):
                raise NonFiniteRolloutError(k + 1)
            out[:, k + 1], _ = model.map_out.forward(st, H)
            if keep_cache:
                tape.caches.append(cache)
                tape.latents.append(H)
    if single:
        out = out[0]
    return (out, tape) if keep_cache else out


def rollout_backward(model: Model, tape: Tape, dTraj):
    """Accumulate parameter gradients of a loss on the rollout; returns ``dU0``."""
    if tape is None or len(tape.caches) != tape.steps:
        raise StaleCacheError("rollout_backward needs the tape of a matching rollout")
    dTraj = np.asarray(dTraj, dtype=np.float64)
    if dTraj.ndim == tape.U0.ndim:
        dTraj = dTraj[None]
    if dTraj.shape[1] != tape.steps + 1 or dTraj.shape[0] != tape.U0.shape[0]:
        raise StaleCacheError(f"gradient shape {dTraj.shape} does not match a {tape.steps}-step rollout")
    st = model.store
    K = tape.steps
    if model.architecture == "fno_ref":
        dU = dTraj[:, K].copy()
        for k in range(K - 1, -1, -1):
            dU = model.cell_backward(tape.caches[k], dU) + dTraj[:, k]
        return dU
    dH = model.map_out.backward(st, tape.latents[K], dTraj[:, K])
    for k in range(K - 1, -1, -1):
        dH = model.cell_backward(tape.caches[k], dH)
        dH = dH + model.map_out.backward(st, tape.latents[k], dTraj[:, k])
    return model.map_in.backward(st, tape.U0, dH)
