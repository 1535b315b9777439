import numpy as np
import pytest

from sidemc.errors import ConfigurationError
from sidemc.noise import JumpMeasureSpec
from sidemc.problem import CoefficientSet, Field, ProblemSpec
from sidemc.solver import (compute_correction_terms, estimate_solution, interlace_large_jumps, positivity_report,
                           segment_weights, sweep_observed_seeds)
from sidemc.validation import transport_oracle

GRID = np.linspace(-3, 3, 101)


def _f(fn, shape=(1,)):
    return Field(lambda t, X, z=None: fn(t, X, z), shape)


def _zc(z):
    return np.asarray(z, dtype=float)[..., None]


def _bisect(x, amp=0.3):
    lo, hi = x - amp - 1e-9, x + amp + 1e-9
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        lo, hi = (mid, hi) if mid + amp * np.sin(mid) < x else (lo, mid)
    return 0.5 * (lo + hi)


# ---- corrections


def test_constant_jump_gives_no_drift_correction():
    co = CoefficientSet.build(alpha=1.5, b=0.2, H1=0.4)
    spec = ProblemSpec(co, (JumpMeasureSpec(atoms=((1.0, 2.0, "D"),)),), 1.0, phi=0.0)
    corr = compute_correction_terms(spec)
    X = GRID[:, None]
    np.testing.assert_allclose(corr.b_hat(0.0, X), 0.2, atol=1e-14)


def _sine_jump_spec(alpha=1.5, rho=None, h=None, sigma1=None):
    co = CoefficientSet.build(
        alpha=alpha,
        H1=_f(lambda t, X, z: 0.3 * np.sin(X) * _zc(z)),
        rho1=rho if rho is not None else _f(lambda t, X, z: 0.1 * _zc(z)[..., None] * np.ones(X.shape + (1,)), (1, 1)),
        h=h, sigma1=sigma1,
    )
    return ProblemSpec(co, (JumpMeasureSpec(atoms=((1.0, 2.0, "D"),)),), 1.0, phi=0.0)


@pytest.mark.parametrize("x", [0.0, 1.0])
def test_drift_correction_against_bisection_inverse(x):
    corr = compute_correction_terms(_sine_jump_spec())
    y = _bisect(x)
    expected = 2.0 * (0.3 * np.sin(x) - 0.3 * np.sin(y))
    np.testing.assert_allclose(corr.b_hat(0.0, np.array([[x]]))[0, 0], expected, atol=1e-9)
    # rho constant in x: no zero-order correction
    np.testing.assert_allclose(corr.c_hat(0.0, np.array([[x]]))[0, 0, 0], 0.0, atol=1e-14)


@pytest.mark.parametrize("x", [0.0, 1.0])
def test_zero_order_and_free_corrections_against_bisection(x):
    rho = _f(lambda t, X, z: (0.1 * _zc(z) * np.cos(X))[..., None], (1, 1))
    h = _f(lambda t, X, z: 0.05 * _zc(z) * X)
    corr = compute_correction_terms(_sine_jump_spec(rho=rho, h=h))
    y = _bisect(x)
    X = np.array([[x]])
    np.testing.assert_allclose(corr.c_hat(0.0, X)[0, 0, 0], 2.0 * 0.1 * (np.cos(x) - np.cos(y)), atol=1e-9)
    np.testing.assert_allclose(corr.f_hat(0.0, X)[0, 0], 2.0 * 0.05 * (x - y), atol=1e-9)


def test_drift_correction_absent_below_alpha_one():
    corr = compute_correction_terms(_sine_jump_spec(alpha=0.8))
    np.testing.assert_allclose(corr.b_hat(0.0, np.array([[1.0]])), 0.0)


def test_diffusion_drift_correction_at_alpha_two():
    sigma = _f(lambda t, X, z: (0.5 * np.sin(X))[..., None], (1, 1))
    co = CoefficientSet.build(alpha=2.0, sigma1=sigma)
    corr = compute_correction_terms(ProblemSpec(co, (), 1.0, phi=0.0))
    X = np.array([[0.3], [1.2]])
    np.testing.assert_allclose(corr.b_hat(0.0, X)[:, 0], 0.25 * np.sin(X[:, 0]) * np.cos(X[:, 0]), rtol=1e-6)


# ---- estimator


def test_transport_solution():
    o = transport_oracle()
    sol = estimate_solution(o.spec, 1.0, GRID, M_inner=1, n_steps=1000)
    assert np.max(np.abs(sol.estimate[:, 0] - np.sin(GRID + 1))) <= 1e-3
    np.testing.assert_array_equal(sol.stderr, 0.0)
    assert sol.discarded == 0


def test_zero_order_term_scales_transport():
    base = estimate_solution(transport_oracle().spec, 1.0, GRID, M_inner=1, n_steps=1000).estimate
    scaled = estimate_solution(transport_oracle(c=0.5).spec, 1.0, GRID, M_inner=1, n_steps=1000).estimate
    mask = np.abs(base) > 1e-3
    rel = np.abs(scaled[mask] - np.exp(0.5) * base[mask]) / np.abs(np.exp(0.5) * base[mask])
    assert rel.max() <= 1e-3


def _heat(phi):
    co = CoefficientSet.build(alpha=2.0, sigma2=1.0, channels=(1, 1))
    return ProblemSpec(co, (), 0.5, phi=phi)


def test_estimator_is_linear_in_initial_condition():
    p1 = _f(lambda t, X, z: np.exp(-X**2 / 2))
    p2 = _f(lambda t, X, z: np.sin(X))
    mix = _f(lambda t, X, z: 2 * np.exp(-X**2 / 2) - 3 * np.sin(X))
    kw = dict(M_inner=300, n_steps=10, observed_seed=4)
    pts = GRID[::10]
    u1 = estimate_solution(_heat(p1), 0.5, pts, **kw).estimate
    u2 = estimate_solution(_heat(p2), 0.5, pts, **kw).estimate
    um = estimate_solution(_heat(mix), 0.5, pts, **kw).estimate
    np.testing.assert_allclose(um, 2 * u1 - 3 * u2, atol=1e-12)


def test_thread_count_does_not_change_result():
    spec = _heat(_f(lambda t, X, z: np.exp(-X**2 / 2)))
    a = estimate_solution(spec, 0.5, GRID[::5], M_inner=2500, n_steps=5, threads=1)
    b = estimate_solution(spec, 0.5, GRID[::5], M_inner=2500, n_steps=5, threads=4)
    np.testing.assert_array_equal(a.estimate, b.estimate)
    np.testing.assert_array_equal(a.stderr, b.stderr)


def test_stderr_shrinks_with_inner_samples():
    spec = _heat(_f(lambda t, X, z: np.exp(-X**2 / 2)))
    s1 = estimate_solution(spec, 0.5, [0.0], M_inner=400, n_steps=5).stderr[0, 0]
    s2 = estimate_solution(spec, 0.5, [0.0], M_inner=1600, n_steps=5).stderr[0, 0]
    assert 0.35 < s2 / s1 < 0.65


def test_invalid_time_rejected():
    with pytest.raises(ConfigurationError):
        estimate_solution(transport_oracle().spec, 2.0, GRID)


def test_sweep_rows_equal_single_seed_estimates():
    co = CoefficientSet.build(alpha=0.5, H1=0.3)
    spec = ProblemSpec(co, (JumpMeasureSpec(atoms=((1.0, 2.0, "E"),)),), 1.0, phi=_f(lambda t, X, z: np.sin(X)))
    sw = sweep_observed_seeds(spec, 1.0, GRID[::10], base_seed=7, count=5, n_steps=10)
    for r in range(5):
        one = estimate_solution(spec, 1.0, GRID[::10], observed_seed=7 + r, M_inner=1, n_steps=10).estimate
        np.testing.assert_array_equal(sw.samples[r], one)


# ---- interlacing


def test_segment_weight_rule():
    w = segment_weights(0.0, 0.0, 1.5, [1.0, 1.0], eps=0.01)
    np.testing.assert_allclose([x[1] for x in w], [0.01, 2.51, 5.02])
    assert [x[0] for x in w] == [0, 1, 2]


def _finite_activity_spec():
    co = CoefficientSet.build(
        alpha=2.0, channels=(1, 1),
        sigma2=0.5,
        H1=_f(lambda t, X, z: 0.3 * np.sin(X) * _zc(z)),
        rho1=_f(lambda t, X, z: (0.1 * _zc(z) * np.ones_like(X))[..., None], (1, 1)),
        h=_f(lambda t, X, z: 0.05 * _zc(z) * np.ones_like(X)),
    )
    return ProblemSpec(co, (JumpMeasureSpec(atoms=((1.0, 3.0, "E"),)),), 1.0, phi=_f(lambda t, X, z: np.cos(X)))


def test_interlacer_matches_plain_estimator():
    spec = _finite_activity_spec()
    kw = dict(observed_seed=2, M_inner=200, n_steps=50)
    plain = estimate_solution(spec, 1.0, GRID[::5], **kw)
    inter = interlace_large_jumps(spec, 1.0, GRID[::5], delta=1e-6, **kw)
    assert inter.segment_index >= 1
    assert np.max(np.abs(plain.estimate - inter.estimate)) <= 1e-8


def test_interlacer_matches_plain_when_compensated_jumps_are_forced_large():
    # D atoms enter the correction integrals; moving them out must not change the equation solved
    spec = _finite_activity_spec()
    spec = ProblemSpec(spec.coefficients, (JumpMeasureSpec(atoms=((1.0, 2.0, "D"), (-0.5, 1.0, "D"))),), 1.0,
                       phi=spec.phi)
    kw = dict(observed_seed=3, M_inner=50, n_steps=50)
    plain = estimate_solution(spec, 1.0, GRID[::10], **kw)
    inter = interlace_large_jumps(spec, 1.0, GRID[::10], delta=1e-9, **kw)
    assert inter.segment_index >= 1
    assert np.max(np.abs(plain.estimate - inter.estimate)) <= 1e-8


def test_interlacer_event_cap():
    with pytest.raises(ConfigurationError):
        interlace_large_jumps(_finite_activity_spec(), 1.0, GRID[::20], observed_seed=2, M_inner=2, n_steps=10,
                              delta=1e-6, event_cap=0)


def test_plain_estimator_rejects_v_events():
    co = CoefficientSet.build(alpha=0.5, H1=0.3)
    spec = ProblemSpec(co, (JumpMeasureSpec(atoms=((1.0, 5.0, "V"),)),), 1.0, phi=_f(lambda t, X, z: np.sin(X)))
    with pytest.raises(ConfigurationError):
        estimate_solution(spec, 1.0, GRID[::20], M_inner=1, n_steps=10)
    # the interlacer handles them; a constant shift keeps the answer exact
    sol = interlace_large_jumps(spec, 1.0, GRID[::20], M_inner=1, n_steps=10)
    n = sol.segment_index
    np.testing.assert_allclose(sol.estimate[:, 0], np.sin(GRID[::20] + 0.3 * n), atol=1e-12)


def test_removing_corrections_recovers_original_equation():
    # geometric diffusion: corrected generator gives x^2 e^{3 s^2 t}, the original x^2 e^{s^2 t}
    s = 0.5
    co = CoefficientSet.build(alpha=2.0, channels=(1, 1), sigma2=_f(lambda t, X, z: (s * X)[..., None], (1, 1)))
    spec = ProblemSpec(co, (), 0.5, phi=_f(lambda t, X, z: X**2))
    pts = np.linspace(-1, 1, 5)
    kw = dict(M_inner=4000, n_steps=100)
    hat = estimate_solution(spec, 0.5, pts, **kw)
    orig = interlace_large_jumps(spec, 0.5, pts, remove_corrections=True, **kw)
    for sol, rate in ((hat, 3 * s * s), (orig, s * s)):
        exact = pts**2 * np.exp(rate * 0.5)
        err = np.abs(sol.estimate[:, 0] - exact)
        assert np.all(err <= 4 * sol.stderr[:, 0] + 2e-3 * pts**2)


def test_positivity_report_on_transport():
    o = transport_oracle()
    sol = estimate_solution(o.spec, 1.0, GRID, M_inner=1, n_steps=100)
    rep = positivity_report(sol, o.spec)
    np.testing.assert_allclose(rep.min_u, sol.estimate.min())
    np.testing.assert_allclose(rep.max_u, sol.estimate.max())
