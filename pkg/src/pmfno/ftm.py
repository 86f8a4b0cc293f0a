"""Modal reference solvers for the damped stiff string and the 2-D wave equation.

Both systems are expanded into spatial eigenfunctions sampled on the grid.
Each spatial mode contributes a complex-conjugate pair of eigenvalues, so a
system with ``Q`` spatial modes carries ``2Q`` complex modal states. The state
transition is diagonal: every modal coefficient is multiplied by ``exp(s*T)``
per sample.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .tensor import is_power_of_two


class SynthesisError(ValueError):
    """Invalid physical parameters or inputs for a modal solver."""


class OverdampedModeError(SynthesisError):
    def __init__(self, mode):
        super().__init__(f"mode {mode} is overdamped (sigma^2 >= omega0^2); real poles are not supported")
        self.mode = mode


@dataclass
class StringParams:
    length: float = 0.65
    density: float = 7850.0
    cross_section: float = math.pi * 0.4e-3 ** 2
    youngs_modulus: float = 2e11
    moment_of_inertia: float = math.pi * 0.4e-3 ** 4 / 4
    tension: float = 60.0
    d1: float = 2e-4
    d3: float = 1e-5
    grid_points: int = 64
    modes: int | None = None
    sample_rate: float = 48000.0

    def __post_init__(self):
        if self.modes is None:
            self.modes = self.grid_points // 2
        for name in ("length", "density", "cross_section", "youngs_modulus", "tension", "sample_rate"):
            if not getattr(self, name) > 0:
                raise SynthesisError(f"{name} must be > 0")
        if self.d1 < 0 or self.d3 < 0 or self.moment_of_inertia < 0:
            raise SynthesisError("damping coefficients and moment_of_inertia must be >= 0")
        if not is_power_of_two(self.grid_points):
            raise SynthesisError(f"grid_points {self.grid_points} is not a power of two")
        if not 1 <= self.modes <= self.grid_points:
            raise SynthesisError(f"modes must lie in [1, {self.grid_points}], got {self.modes}")

    @property
    def linear_density(self):
        return self.density * self.cross_section

    @property
    def grid(self):
        """Interior sample positions ``n*l/(N+1)``, ``n = 1..N``."""
        n = np.arange(1, self.grid_points + 1)
        return n * self.length / (self.grid_points + 1)

    def wavenumbers(self, count=None):
        mu = np.arange(1, (count or self.modes) + 1)
        return mu * math.pi / self.length

    def to_dict(self):
        return asdict(self)


@dataclass
class Wave2DParams:
    lx: float = 0.6
    ly: float = 0.5
    rho0: float = 1.2
    c0: float = 343.0
    nx: int = 32
    ny: int = 32
    qx: int | None = None
    qy: int | None = None
    sample_rate: float = 48000.0

    def __post_init__(self):
        if self.qx is None:
            self.qx = self.nx // 2
        if self.qy is None:
            self.qy = self.ny // 2
        for name in ("lx", "ly", "rho0", "c0", "sample_rate", "qx", "qy"):
            if not getattr(self, name) > 0:
                raise SynthesisError(f"{name} must be > 0")
        for name in ("nx", "ny"):
            if not is_power_of_two(getattr(self, name)):
                raise SynthesisError(f"{name} {getattr(self, name)} is not a power of two")
        if self.qx * self.qy - 1 > self.nx * self.ny:
            raise SynthesisError("more modes than grid points (oversampled spectrum)")
        if self.qx > self.nx - 1 or self.qy > self.ny - 1:
            raise SynthesisError("mode counts must stay below the grid size")

    @property
    def grid(self):
        x = np.arange(self.nx) * self.lx / (self.nx - 1)
        y = np.arange(self.ny) * self.ly / (self.ny - 1)
        return x, y

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class ModalSystem:
    """Eigenvalues and sampled bi-orthogonal bases of a modal model.

    ``out_basis`` has shape ``[C, *grid, n_modes]`` (synthesis columns) and
    ``in_basis`` has shape ``[n_modes, C, *grid]`` (analysis rows, quadrature
    weights folded in).
    """

    eigenvalues: np.ndarray
    out_basis: np.ndarray
    in_basis: np.ndarray
    sample_interval: float
    spatial_modes: np.ndarray = field(repr=False)

    @property
    def n_modes(self):
        return self.eigenvalues.shape[0]

    @property
    def field_shape(self):
        return self.out_basis.shape[:-1]

    @property
    def transition(self):
        return np.exp(self.eigenvalues * self.sample_interval)

    def biorthogonality(self):
        C = self.in_basis.reshape(self.n_modes, -1)
        K = self.out_basis.reshape(-1, self.n_modes)
        return C @ K


# -- string ------------------------------------------------------------------

def string_eigenvalues(p: StringParams, count=None):
    """Return (sigma, omega) per spatial mode; raises on overdamped modes."""
    gamma = p.wavenumbers(count)
    rho_a = p.linear_density
    sigma = (p.d1 + p.d3 * gamma ** 2) / (2 * rho_a)
    w0sq = (p.youngs_modulus * p.moment_of_inertia * gamma ** 4 + p.tension * gamma ** 2) / rho_a
    bad = np.nonzero(sigma ** 2 >= w0sq)[0]
    if bad.size:
        raise OverdampedModeError(int(bad[0]) + 1)
    return sigma, np.sqrt(w0sq - sigma ** 2)


def string_pde_residual(p: StringParams, s, gamma, x, t):
    """Relative residual of ``u0 = exp(s t) sin(gamma x)`` in the linear string PDE."""
    u = np.exp(s * t) * np.sin(gamma * x)
    u_t = s * u
    u_tt = s * s * u
    u_xx = -gamma ** 2 * u
    u_xxxx = gamma ** 4 * u
    u_txx = s * u_xx
    terms = np.array([
        p.linear_density * u_tt,
        p.youngs_modulus * p.moment_of_inertia * u_xxxx,
        -p.tension * u_xx,
        p.d1 * u_t,
        -p.d3 * u_txx,
    ])
    return abs(terms.sum()) / np.max(np.abs(terms))


def string_modal_system(p: StringParams, check_modes=5, rng=None):
    Q, N = p.modes, p.grid_points
    sigma, omega = string_eigenvalues(p)
    gamma = p.wavenumbers()
    s_pos = -sigma + 1j * omega

    rng = np.random.default_rng(0) if rng is None else rng
    for j in rng.choice(Q, size=min(check_modes, Q), replace=False):
        for s in (s_pos[j], np.conj(s_pos[j])):
            x = rng.uniform(0, p.length)
            t = rng.uniform(0, 1e-3)
            res = string_pde_residual(p, s, gamma[j], x, t)
            if res > 1e-6:
                raise SynthesisError(f"mode {j + 1}: PDE residual {res:.3e} exceeds 1e-6")

    S = np.sin(np.outer(p.grid, gamma))  # [N, Q]
    eig = np.empty(2 * Q, dtype=np.complex128)
    eig[0::2] = s_pos
    eig[1::2] = np.conj(s_pos)

    out = np.empty((2, N, 2 * Q), dtype=np.complex128)
    out[0] = np.repeat(S, 2, axis=1)
    out[1] = out[0] * eig[None, :]

    w = 2.0 / (N + 1)
    a_defl = 0.5 - 0.5j * sigma / omega
    a_vel = -0.5j / omega
    inn = np.empty((2 * Q, 2, N), dtype=np.complex128)
    inn[0::2, 0] = w * S.T * a_defl[:, None]
    inn[0::2, 1] = w * S.T * a_vel[:, None]
    inn[1::2] = np.conj(inn[0::2])

    modes = np.repeat(np.arange(1, Q + 1), 2)
    return ModalSystem(eig, out, inn, 1.0 / p.sample_rate, modes)


# -- 2-D wave ------------------------------------------------------------------

def wave2d_mode_indices(p: Wave2DParams):
    return [(m, n) for m in range(p.qx) for n in range(p.qy) if (m, n) != (0, 0)]


def wave2d_pde_residual(p: Wave2DParams, s, gx, gy, x, y, t):
    """Max relative residual of one pressure/velocity eigen-pair in the two field equations."""
    e = np.exp(s * t)
    cx, sx = np.cos(gx * x), np.sin(gx * x)
    cy, sy = np.cos(gy * y), np.sin(gy * y)
    pres = e * cx * cy
    vx = gx / (p.rho0 * s) * e * sx * cy
    vy = gy / (p.rho0 * s) * e * cx * sy
    dp_dx = -gx * e * sx * cy
    dp_dy = -gy * e * cx * sy
    div_v = (gx ** 2 + gy ** 2) / (p.rho0 * s) * e * cx * cy
    res = []
    for terms in ((p.rho0 * s * vx, dp_dx), (p.rho0 * s * vy, dp_dy),
                  (p.rho0 * p.c0 ** 2 * div_v, s * pres)):
        scale = max(abs(terms[0]), abs(terms[1]))
        res.append(abs(terms[0] + terms[1]) / scale if scale > 0 else 0.0)
    return max(res)


def wave2d_modal_system(p: Wave2DParams, check_modes=5, rng=None):
    idx = wave2d_mode_indices(p)
    x, y = p.grid
    wx = np.ones(p.nx)
    wx[[0, -1]] = 0.5
    wy = np.ones(p.ny)
    wy[[0, -1]] = 0.5
    W = np.outer(wx, wy)

    gam = np.array([(m * math.pi / p.lx, n * math.pi / p.ly) for m, n in idx])
    omega = p.c0 * np.hypot(gam[:, 0], gam[:, 1])

    rng = np.random.default_rng(0) if rng is None else rng
    for j in rng.choice(len(idx), size=min(check_modes, len(idx)), replace=False):
        for s in (1j * omega[j], -1j * omega[j]):
            res = wave2d_pde_residual(p, s, gam[j, 0], gam[j, 1], rng.uniform(0, p.lx),
                                      rng.uniform(0, p.ly), rng.uniform(0, 1e-3))
            if res > 1e-6:
                raise SynthesisError(f"mode {idx[j]}: PDE residual {res:.3e} exceeds 1e-6")

    Q = len(idx)
    eig = np.empty(2 * Q, dtype=np.complex128)
    eig[0::2] = 1j * omega
    eig[1::2] = -1j * omega
    out = np.empty((3, p.nx, p.ny, 2 * Q), dtype=np.complex128)
    inn = np.empty((2 * Q, 3, p.nx, p.ny), dtype=np.complex128)
    for j, (gx, gy) in enumerate(gam):
        P = np.outer(np.cos(gx * x), np.cos(gy * y))
        SX = np.outer(np.sin(gx * x), np.cos(gy * y))
        SY = np.outer(np.cos(gx * x), np.sin(gy * y))
        ax, ay = gx / p.rho0, gy / p.rho0
        for k, s in ((2 * j, eig[2 * j]), (2 * j + 1, eig[2 * j + 1])):
            out[0, :, :, k] = P
            out[1, :, :, k] = ax / s * SX
            out[2, :, :, k] = ay / s * SY
        norm_p = np.sum(W * P * P)
        denom = ax ** 2 * np.sum(W * SX * SX) + ay ** 2 * np.sum(W * SY * SY)
        w_vel = 0.5j * omega[j] / denom if denom > 0 else 0.0
        inn[2 * j, 0] = W * P / (2 * norm_p)
        inn[2 * j, 1] = w_vel * ax * W * SX
        inn[2 * j, 2] = w_vel * ay * W * SY
        inn[2 * j + 1] = np.conj(inn[2 * j])

    modes = np.repeat(np.array(idx), 2, axis=0)
    return ModalSystem(eig, out, inn, 1.0 / p.sample_rate, modes)


def modal_system(params):
    if isinstance(params, Wave2DParams):
        return wave2d_modal_system(params)
    return string_modal_system(params)


# -- transforms and time stepping ------------------------------------------------

def _check_field(sys: ModalSystem, u):
    shape = sys.field_shape
    if tuple(u.shape[-len(shape):]) != tuple(shape):
        raise SynthesisError(f"field shape {u.shape} does not match system {shape}")


def slt_forward(sys: ModalSystem, u):
    """Modal coefficients of a state field ``[..., C, *grid]``."""
    u = np.asarray(u)
    _check_field(sys, u)
    nd = len(sys.field_shape)
    flat = u.reshape(u.shape[: u.ndim - nd] + (-1,))
    return flat @ sys.in_basis.reshape(sys.n_modes, -1).T


def slt_inverse(sys: ModalSystem, coeffs, real=True):
    """State field from modal coefficients ``[..., n_modes]``."""
    coeffs = np.asarray(coeffs)
    if coeffs.shape[-1] != sys.n_modes:
        raise SynthesisError(f"expected {sys.n_modes} coefficients, got {coeffs.shape[-1]}")
    K = sys.out_basis.reshape(-1, sys.n_modes)
    u = (coeffs @ K.T).reshape(coeffs.shape[:-1] + sys.field_shape)
    return u.real if real else u


def project(sys: ModalSystem, u):
    """Band-limit a field to the span of the system's modes."""
    return slt_inverse(sys, slt_forward(sys, u))


def modal_init(sys: ModalSystem, u_init):
    return slt_forward(sys, u_init)


def step(sys: ModalSystem, coeffs):
    return coeffs * sys.transition


def synthesize(sys: ModalSystem, u_init, steps):
    """Trajectory ``[K+1, C, *grid]`` whose frame 0 is the modal projection of ``u_init``."""
    if steps < 1:
        raise SynthesisError("steps must be >= 1")
    c0 = modal_init(sys, u_init)
    k = np.arange(steps + 1)[:, None]
    coeffs = c0[None, :] * np.exp(sys.eigenvalues[None, :] * sys.sample_interval * k)
    traj = slt_inverse(sys, coeffs, real=False)
    amp = np.max(np.abs(traj))
    if amp > 0 and np.max(np.abs(traj.imag)) > 1e-9 * amp:
        raise SynthesisError("synthesized trajectory is not real; coefficients lack conjugate symmetry")
    return traj.real.copy()
