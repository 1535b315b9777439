import numpy as np
import pytest

from sidemc.errors import NumericalError
from sidemc.jumpmaps import (JumpMapHandle, conjugate_jump_map, diffeo_report, inverse_gradient_factor,
                             invert_jump_map)
from sidemc.problem import Field


def _sine_handle(amp=0.6, eta=0.6):
    return JumpMapHandle(Field(lambda t, X, z=None: amp * np.sin(X), (1,)), eta)


def _bisect(target, amp=0.6):
    # y + amp sin y is increasing, the root lies within amp of target
    lo, hi = target - amp - 1e-9, target + amp + 1e-9
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if mid + amp * np.sin(mid) < target:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


X = np.linspace(-6, 6, 97)[:, None]


def test_inverse_matches_bisection():
    y = invert_jump_map(_sine_handle(), 0.0, X, 1.0, tol=1e-13)
    ref = np.array([_bisect(x) for x in X[:, 0]])
    np.testing.assert_allclose(y[:, 0], ref, atol=1e-12)


def test_round_trip_and_contraction_rate():
    y, info = invert_jump_map(_sine_handle(), 0.0, X, 1.0, tol=1e-13, return_info=True)
    assert np.max(np.abs(y + 0.6 * np.sin(y) - X)) <= 1e-12
    assert info.max_ratio <= 0.65
    assert info.method == "fixed-point"


def test_conjugate_map_lands_on_preimage():
    h = _sine_handle()
    F = conjugate_jump_map(h, 0.0, X, 1.0, tol=1e-13)
    y = invert_jump_map(h, 0.0, X, 1.0, tol=1e-13)
    np.testing.assert_allclose(X + F, y, atol=1e-15)


def test_inverse_gradient_factor():
    h = _sine_handle()
    y = np.array([[0.0], [np.pi / 2], [np.pi]])
    got = inverse_gradient_factor(h, 0.0, y, 1.0)[:, 0, 0]
    np.testing.assert_allclose(got, 1 / (1 + 0.6 * np.cos(y[:, 0])), rtol=1e-6)


def test_newton_path_in_two_dimensions():
    H = Field(lambda t, X, z=None: 0.95 * np.stack([np.sin(X[..., 1]), np.sin(X[..., 0])], axis=-1), (2,))
    h = JumpMapHandle(H, 0.95)
    pts = np.random.default_rng(1).uniform(-3, 3, (50, 2))
    y, info = invert_jump_map(h, 0.0, pts, 1.0, tol=1e-12, return_info=True)
    assert info.method == "newton"
    np.testing.assert_allclose(y + H(0.0, y), pts, atol=1e-12)


def test_constant_shift_is_exact():
    h = JumpMapHandle(Field.const(0.3, (1,)), 0.0)
    np.testing.assert_array_equal(invert_jump_map(h, 0.0, X, 1.0), X - 0.3)


def test_misdeclared_contraction_raises():
    # |grad H| = 1.5 makes the fixed point iteration diverge
    h = JumpMapHandle(Field(lambda t, X, z=None: 1.5 * np.sin(X), (1,)), 0.5)
    with pytest.raises(NumericalError):
        invert_jump_map(h, 0.0, X, 1.0)


def test_diffeo_report_bounds_hold():
    rep = diffeo_report(_sine_handle(), None, np.linspace(-5, 5, 201), tol=1e-13)
    assert rep.passed
    np.testing.assert_allclose(rep.max_grad_jump, 0.6, atol=1e-6)
    np.testing.assert_allclose(rep.max_inv_jump_jacobian, 1 / 0.4, rtol=1e-3)
