"""Dense array primitives: power-of-two FFTs, ridge least squares, eigenvalues.

Arrays are plain ``numpy.ndarray`` objects in float64/complex128. The FFT and
eigenvalue kernels are thin guards around numpy's pocketfft and LAPACK
``geev`` (Hessenberg reduction followed by shifted QR).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class TensorError(ValueError):
    """Raised on invalid shapes or lengths passed to a tensor primitive."""


class EigenConvergenceError(RuntimeError):
    """Raised when the QR iteration fails to converge."""

    def __init__(self, message, partial=None):
        super().__init__(message)
        self.partial = partial


def is_power_of_two(n):
    return n >= 1 and (n & (n - 1)) == 0


def _check_pow2(n, what="length"):
    if not is_power_of_two(int(n)):
        raise TensorError(f"{what} {n} is not a power of two")


def fft_1d(x, inverse=False):
    """Complex FFT of a 1-D vector.

    The forward transform is unnormalized, the inverse carries the 1/N factor.
    """
    x = np.asarray(x, dtype=np.complex128)
    if x.ndim != 1:
        raise TensorError(f"fft_1d expects a vector, got shape {x.shape}")
    _check_pow2(x.shape[0])
    return np.fft.ifft(x) if inverse else np.fft.fft(x)


def rfft_last_axis(x):
    """Real-input FFT along the last axis, keeping bins ``0..n/2``."""
    x = np.asarray(x, dtype=np.float64)
    _check_pow2(x.shape[-1], "last-axis length")
    return np.fft.rfft(x, axis=-1)


def irfft_last_axis(X, n):
    """Inverse of :func:`rfft_last_axis` via Hermitian extension."""
    X = np.asarray(X, dtype=np.complex128)
    _check_pow2(n, "output length")
    if X.shape[-1] != n // 2 + 1:
        raise TensorError(f"expected {n // 2 + 1} bins for length {n}, got {X.shape[-1]}")
    return np.fft.irfft(X, n=n, axis=-1)


@dataclass
class LstsqResult:
    solution: np.ndarray
    condition: float
    ill_conditioned: bool
    rank: int


def lstsq(A, B, ridge=1e-10, return_info=False, rcond=None):
    """Minimize ``||A X - B||_F`` with Tikhonov damping.

    ``ridge`` is relative to the largest squared singular value of ``A``, so the
    solution is invariant to a common rescaling of ``A`` and ``B``. The damped
    minimizer is computed from the SVD filter factors ``s / (s^2 + ridge*s_max^2)``,
    which equals the normal-equations ridge solution without squaring the
    condition number. With ``ridge == 0`` singular values below
    ``rcond * s_max`` (default: machine precision scaled by the matrix size)
    are truncated.
    """
    A = np.asarray(A)
    B = np.asarray(B)
    if A.ndim != 2:
        raise TensorError(f"A must be a matrix, got shape {A.shape}")
    vector_rhs = B.ndim == 1
    if vector_rhs:
        B = B[:, None]
    if B.shape[0] != A.shape[0]:
        raise TensorError(f"row mismatch: A {A.shape} vs B {B.shape}")
    m, n = A.shape
    if m < n and ridge <= 0:
        raise TensorError(f"underdetermined system {A.shape} needs ridge > 0")

    U, s, Vh = np.linalg.svd(A, full_matrices=False)
    smax = s[0] if s.size else 0.0
    if smax == 0.0:
        X = np.zeros((n, B.shape[1]), dtype=np.result_type(A, B))
        cond = np.inf
        rank = 0
    else:
        damp = ridge * smax * smax
        tiny = (np.finfo(np.float64).eps * max(m, n) if rcond is None else rcond) * smax
        with np.errstate(divide="ignore", invalid="ignore"):
            if damp > 0:
                filt = s / (s * s + damp)
            else:
                filt = np.where(s > tiny, 1.0 / s, 0.0)
        X = (Vh.conj().T * filt) @ (U.conj().T @ B)
        smin = s[-1] if m >= n else 0.0
        cond = smax / smin if smin > 0 else np.inf
        rank = int(np.sum(s > tiny))
    if vector_rhs:
        X = X[:, 0]
    if not return_info:
        return X
    return LstsqResult(X, float(cond), bool(cond > 1e12), rank)


def eig_general(A):
    """Eigenvalues of a general real (or complex) square matrix."""
    A = np.asarray(A)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise TensorError(f"eig_general needs a square matrix, got {A.shape}")
    if not np.all(np.isfinite(A)):
        raise TensorError("matrix contains non-finite entries")
    try:
        return np.linalg.eigvals(A)
    except np.linalg.LinAlgError as exc:
        raise EigenConvergenceError(f"QR iteration did not converge: {exc}") from exc
