"""Tension-modulated string: sine-series modal ODEs integrated with fixed-step RK4."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .ftm import StringParams, SynthesisError


class NonFiniteStateError(ArithmeticError):
    def __init__(self, step):
        super().__init__(f"non-finite string state at ODE step {step}")
        self.step = step


@dataclass
class NlStringParams(StringParams):
    """String parameters plus the RK4 oversampling factor (ODE step ``T/oversample``).

    ``modes`` is the number of sine modes ``M`` carried by the ODE system.
    """

    oversample: int = 8

    def __post_init__(self):
        super().__post_init__()
        if int(self.oversample) < 1:
            raise SynthesisError("oversample must be >= 1")


@dataclass
class NlStringState:
    a: np.ndarray
    adot: np.ndarray

    def __post_init__(self):
        self.a = np.asarray(self.a, dtype=np.float64)
        self.adot = np.asarray(self.adot, dtype=np.float64)
        if self.a.shape != self.adot.shape:
            raise SynthesisError(f"shape mismatch: {self.a.shape} vs {self.adot.shape}")
        if not (np.all(np.isfinite(self.a)) and np.all(np.isfinite(self.adot))):
            raise NonFiniteStateError(0)


def sine_basis(p: StringParams):
    """``[N, M]`` matrix of ``sin(gamma_m x_n)`` on the interior grid."""
    return np.sin(np.outer(p.grid, p.wavenumbers()))


def tension_extra(p: StringParams, a):
    """Extra tension from arc-length stretching, closed form on the sine series."""
    a = np.asarray(a, dtype=np.float64)
    if a.shape[-1] != p.modes:
        raise SynthesisError(f"expected {p.modes} modal amplitudes, got {a.shape[-1]}")
    gam2 = p.wavenumbers() ** 2
    return p.youngs_modulus * p.cross_section / 4.0 * np.sum(gam2 * a * a, axis=-1)


class _Coefficients:
    def __init__(self, p: StringParams):
        gam2 = p.wavenumbers() ** 2
        rho_a = p.linear_density
        self.stiff = (p.youngs_modulus * p.moment_of_inertia * gam2 ** 2 + p.tension * gam2) / rho_a
        self.damp = (p.d1 + p.d3 * gam2) / rho_a
        self.gam2 = gam2
        self.mod = gam2 / rho_a
        self.ea4 = p.youngs_modulus * p.cross_section / 4.0

    def accel(self, a, adot):
        ts1 = self.ea4 * np.sum(self.gam2 * a * a, axis=-1, keepdims=True)
        return -(self.stiff + self.mod * ts1) * a - self.damp * adot


def rhs(p: StringParams, state: NlStringState):
    """Time derivative ``(adot, addot)`` of the modal state."""
    c = _Coefficients(p)
    return state.adot.copy(), c.accel(state.a, state.adot)


def energy(p: StringParams, state: NlStringState):
    """Conserved energy of the undamped system (linear part plus tension-modulation term)."""
    gam2 = p.wavenumbers() ** 2
    rho_a = p.linear_density
    a, v = state.a, state.adot
    lin = p.length / 4 * np.sum(rho_a * v * v
                               + (p.youngs_modulus * p.moment_of_inertia * gam2 ** 2
                                  + p.tension * gam2) * a * a, axis=-1)
    s = np.sum(gam2 * a * a, axis=-1)
    return lin + p.youngs_modulus * p.cross_section * p.length / 32 * s * s


def state_from_field(p: StringParams, u):
    """Sine-series coefficients of a ``[..., 2, N]`` deflection/velocity field."""
    u = np.asarray(u, dtype=np.float64)
    if u.shape[-2:] != (2, p.grid_points):
        raise SynthesisError(f"field shape {u.shape} does not match (2, {p.grid_points})")
    S = sine_basis(p) * (2.0 / (p.grid_points + 1))
    return NlStringState(u[..., 0, :] @ S, u[..., 1, :] @ S)


def field_from_state(p: StringParams, a, adot):
    S = sine_basis(p)
    return np.stack([a @ S.T, adot @ S.T], axis=-2)


def integrate(p: NlStringParams, init: NlStringState, steps):
    """RK4 trajectory ``[..., K+1, 2, N]`` sampled every ``oversample`` ODE steps."""
    if steps < 1:
        raise SynthesisError("steps must be >= 1")
    c = _Coefficients(p)
    R = int(p.oversample)
    h = 1.0 / (p.sample_rate * R)
    a = init.a.copy()
    v = init.adot.copy()
    out_a = np.empty((steps + 1,) + a.shape)
    out_v = np.empty((steps + 1,) + a.shape)
    out_a[0], out_v[0] = a, v
    accel = c.accel
    with np.errstate(over="ignore", invalid="ignore"):
        _rk4_loop(a, v, accel, h, R, steps, out_a, out_v)
    u = field_from_state(p, out_a, out_v)
    if u.ndim > 3:
        u = np.moveaxis(u, 0, -3)
    return u


def _rk4_loop(a, v, accel, h, R, steps, out_a, out_v):
    for k in range(1, steps + 1):
        for _ in range(R):
            k1a, k1v = v, accel(a, v)
            a2, v2 = a + 0.5 * h * k1a, v + 0.5 * h * k1v
            k2a, k2v = v2, accel(a2, v2)
            a3, v3 = a + 0.5 * h * k2a, v + 0.5 * h * k2v
            k3a, k3v = v3, accel(a3, v3)
            a4, v4 = a + h * k3a, v + h * k3v
            k4a, k4v = v4, accel(a4, v4)
            a = a + h / 6.0 * (k1a + 2 * k2a + 2 * k3a + k4a)
            v = v + h / 6.0 * (k1v + 2 * k2v + 2 * k3v + k4v)
        if not (np.all(np.isfinite(a)) and np.all(np.isfinite(v))):
            raise NonFiniteStateError(k * R)
        out_a[k], out_v[k] = a, v
