import numpy as np
import pytest

from pmfno import ftm
from pmfno.ftm import StringParams
from pmfno.nlstring import (NlStringParams, NlStringState, NonFiniteStateError, energy, field_from_state,
                            integrate, rhs, state_from_field, tension_extra)


def quadrature_tension(p, a, points=4096):
    x = np.linspace(0, p.length, points)
    gamma = p.wavenumbers()
    du = (a * gamma) @ np.cos(np.outer(gamma, x))
    integral = np.trapezoid(du * du, x)
    return p.youngs_modulus * p.cross_section / (2 * p.length) * integral


def test_tension_closed_form_matches_quadrature():
    p = NlStringParams()
    a = np.zeros(p.modes)
    assert tension_extra(p, a) == 0.0
    a[0] = 1e-3
    assert tension_extra(p, a) == pytest.approx(quadrature_tension(p, a), rel=1e-8)
    assert tension_extra(p, 2 * a) == pytest.approx(4 * tension_extra(p, a), rel=1e-14)
    b = np.random.default_rng(0).standard_normal(p.modes) * 1e-4 / np.arange(1, p.modes + 1) ** 2
    assert tension_extra(p, b) == pytest.approx(quadrature_tension(p, b), rel=1e-8)


def test_rhs_equilibrium_and_linear_limit():
    p = NlStringParams()
    zero = NlStringState(np.zeros(p.modes), np.zeros(p.modes))
    assert all(np.all(d == 0) for d in rhs(p, zero))
    rng = np.random.default_rng(1)
    a, v = rng.standard_normal(p.modes) * 1e-12, rng.standard_normal(p.modes) * 1e-9
    _, acc = rhs(p, NlStringState(a, v))
    sigma, omega = ftm.string_eigenvalues(p)
    lin = -(omega ** 2 + sigma ** 2) * a - 2 * sigma * v
    assert np.max(np.abs(acc - lin)) <= 1e-10 * np.max(np.abs(lin))


def test_large_amplitude_frequency_shift():
    p = NlStringParams(d1=0.0, d3=0.0)
    a = np.zeros(p.modes)
    a[1] = 2e-3
    _, acc = rhs(p, NlStringState(a, np.zeros(p.modes)))
    g2 = p.wavenumbers()[1] ** 2
    w0sq = (p.youngs_modulus * p.moment_of_inertia * g2 ** 2 + p.tension * g2) / p.linear_density
    shift = g2 * tension_extra(p, a) / p.linear_density
    assert -acc[1] / a[1] == pytest.approx(w0sq + shift, rel=1e-12)
    assert shift > 0


def test_rhs_against_pointwise_pde():
    """Finite-difference spatial operators applied to the reconstructed field."""
    p = NlStringParams()
    a = np.zeros(p.modes)
    v = np.zeros(p.modes)
    a[:3] = [1e-3, -3e-4, 2e-4]
    v[:3] = [0.2, 0.1, -0.3]
    _, acc = rhs(p, NlStringState(a, v))
    gamma = p.wavenumbers()

    def u(x, coef):
        return np.sin(np.outer(np.atleast_1d(x), gamma)) @ coef

    h = 2e-3
    x = np.array([0.11, 0.3, 0.47])

    def d2(f, x):
        return (-f(x + 2 * h) + 16 * f(x + h) - 30 * f(x) + 16 * f(x - h) - f(x - 2 * h)) / (12 * h * h)

    def d4(f, x):
        return (-f(x + 3 * h) + 12 * f(x + 2 * h) - 39 * f(x + h) + 56 * f(x) - 39 * f(x - h)
                + 12 * f(x - 2 * h) - f(x + -3 * h)) / (6 * h ** 4)

    ua = lambda x: u(x, a)
    uv = lambda x: u(x, v)
    Ts = p.tension + tension_extra(p, a)
    EI = p.youngs_modulus * p.moment_of_inertia
    pde = (-EI * d4(ua, x) + Ts * d2(ua, x) - p.d1 * uv(x) + p.d3 * d2(uv, x)) / p.linear_density
    model = u(x, acc)
    assert np.max(np.abs(pde - model)) / np.max(np.abs(model)) < 1e-4


def test_field_state_round_trip():
    p = NlStringParams(grid_points=32)
    rng = np.random.default_rng(2)
    a, v = rng.standard_normal(p.modes), rng.standard_normal(p.modes)
    st = state_from_field(p, field_from_state(p, a, v))
    np.testing.assert_allclose(st.a, a, atol=1e-12)
    np.testing.assert_allclose(st.adot, v, atol=1e-12)


def test_lossless_energy_drift():
    p = NlStringParams(d1=0.0, d3=0.0, oversample=8)
    u0 = np.zeros((2, p.grid_points))
    u0[0] = 1e-3 * np.sin(np.pi * p.grid / p.length) ** 3
    init = state_from_field(p, u0)
    traj = integrate(p, init, 1000)
    e0 = energy(p, init)
    end = state_from_field(p, traj[-1])
    assert abs(energy(p, end) - e0) / e0 < 1e-3


def test_linear_regime_matches_modal_solver():
    p = NlStringParams(grid_points=32)
    lin = ftm.modal_system(StringParams(grid_points=32))
    rng = np.random.default_rng(3)
    u0 = ftm.project(lin, np.stack([rng.standard_normal(32), np.zeros(32)])) * 1e-8
    ref = ftm.synthesize(lin, u0, 500)
    out = integrate(p, state_from_field(p, u0), 500)
    for c in range(2):
        assert np.max(np.abs(out[:, c] - ref[:, c])) / np.max(np.abs(ref[:, c])) < 1e-4


def test_zero_and_negation_symmetry():
    p = NlStringParams(grid_points=32)
    zero = NlStringState(np.zeros(p.modes), np.zeros(p.modes))
    assert np.all(integrate(p, zero, 10) == 0)
    rng = np.random.default_rng(4)
    st = NlStringState(rng.standard_normal(p.modes) * 1e-3, rng.standard_normal(p.modes))
    neg = NlStringState(-st.a, -st.adot)
    assert np.array_equal(integrate(p, neg, 50), -integrate(p, st, 50))


def test_batched_integration_matches_single():
    p = NlStringParams(grid_points=16)
    rng = np.random.default_rng(5)
    a = rng.standard_normal((3, p.modes)) * 1e-3
    batch = integrate(p, NlStringState(a, np.zeros_like(a)), 20)
    assert batch.shape == (3, 21, 2, 16)
    single = integrate(p, NlStringState(a[1], np.zeros(p.modes)), 20)
    np.testing.assert_allclose(batch[1], single, rtol=1e-13, atol=1e-20)


def test_rk4_convergence_order():
    base = dict(grid_points=16, modes=8)
    u0 = np.zeros((2, 16))
    p1 = NlStringParams(**base, oversample=1)
    u0[0] = 1e-3 * np.sin(np.pi * p1.grid / p1.length)
    init = state_from_field(p1, u0)
    runs = [integrate(NlStringParams(**base, oversample=r), init, 40)[-1] for r in (1, 2, 4)]
    order = np.log2(np.linalg.norm(runs[0] - runs[1]) / np.linalg.norm(runs[1] - runs[2]))
    assert order >= 3.5


def test_non_finite_state_reports_step():
    p = NlStringParams(grid_points=16, modes=8, oversample=1, sample_rate=50.0)
    with pytest.raises(NonFiniteStateError) as err:
        integrate(p, NlStringState(np.full(8, 1.0), np.zeros(8)), 200)
    assert err.value.step >= 1
    with pytest.raises(NonFiniteStateError):
        NlStringState(np.array([np.nan]), np.zeros(1))
