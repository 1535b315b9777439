"""Jump maps x -> x + H(t, x, z): inversion, conjugate map, diffeomorphism report."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NumericalError
from .problem import Field

DEFAULT_TOL = 1e-10
MAX_ITER = 200


@dataclass
class JumpMapHandle:
    """``H`` with its contraction bound ``eta`` on the small-jump region."""

    H: Field
    eta: float = 0.5

    def gradient(self, t, x, z):
        return self.H.gradient(t, x, z)

    def forward(self, t, x, z):
        return x + self.H(t, x, z)


@dataclass
class InversionInfo:
    iterations: int
    max_ratio: float  # largest observed ratio of successive fixed-point steps
    residual: float
    method: str


def _norm(v):
    return np.sqrt(np.sum(v * v, axis=-1))


def invert_jump_map(handle: JumpMapHandle, t, x, z, tol=DEFAULT_TOL, return_info=False):
    """Solve ``y + H(t, y, z) = x`` for ``y`` (vectorised over leading axes of ``x``).

    Fixed-point iteration ``y <- x - H(y)`` from ``y = x`` with the a priori
    stopping rule ``|dy| <= tol (1 - eta) / eta``; Newton replaces it when
    ``eta >= 0.9``.
    """
    x = np.asarray(x, dtype=float)
    H = handle.H
    if H.is_zero:
        return (x.copy(), InversionInfo(0, 0.0, 0.0, "identity")) if return_info else x.copy()
    if H.is_constant:
        y = x - H.constant
        return (y, InversionInfo(1, 0.0, 0.0, "shift")) if return_info else y
    eta = float(handle.eta)
    if eta >= 0.9:
        return _newton(handle, t, x, z, tol, return_info)
    stop = np.inf if eta == 0 else tol * (1 - eta) / eta
    y = x - H(t, x, z)
    step = _norm(y - x)
    scale = 1e3 * np.finfo(float).eps * (1.0 + _norm(x))
    max_ratio = 0.0
    it = 1
    while True:
        r = y + H(t, y, z) - x
        residual = _norm(r)
        active = (step > stop) | (residual > tol)
        if not np.any(active):
            break
        if it >= MAX_ITER:
            raise NumericalError(
                f"jump-map inversion did not converge in {MAX_ITER} iterations at t={t}, z={np.ravel(z)[:1]}; "
                f"last residual {float(np.max(residual)):.3g} (is eta={eta} misdeclared?)"
            )
        # the next fixed-point step is y - r, of length |r|
        ok = active & (step > scale)
        if np.any(ok):
            max_ratio = max(max_ratio, float(np.max(residual[ok] / step[ok])))
        y = np.where(active[..., None], y - r, y)
        step = np.where(active, residual, step)
        it += 1
    if return_info:
        return y, InversionInfo(it, max_ratio, float(np.max(residual)) if residual.size else 0.0, "fixed-point")
    return y


def _newton(handle, t, x, z, tol, return_info):
    y = x - handle.H(t, x, z)
    d1 = x.shape[-1]
    for it in range(1, MAX_ITER + 1):
        r = y + handle.H(t, y, z) - x
        res = _norm(r)
        if np.all(res <= tol):
            info = InversionInfo(it, 0.0, float(np.max(res)) if res.size else 0.0, "newton")
            return (y, info) if return_info else y
        J = np.eye(d1) + handle.gradient(t, y, z)
        y = y - np.linalg.solve(J, r[..., None])[..., 0]
    raise NumericalError(f"Newton jump-map inversion failed at t={t}; last residual {float(np.max(res)):.3g}")


def conjugate_jump_map(handle: JumpMapHandle, t, x, z, tol=DEFAULT_TOL):
    """``F(t, x, z) = -H(t, y, z)`` with ``y`` the preimage of ``x``; ``x + F = y``."""
    y = invert_jump_map(handle, t, x, z, tol)
    return -handle.H(t, y, z)


def inverse_gradient_factor(handle, t, y, z):
    """``(I + grad H(y))^-1``, the Jacobian of the inverse map at ``x = y + H(y)``."""
    G = handle.gradient(t, y, z)
    return np.linalg.inv(np.eye(y.shape[-1]) + G)


@dataclass
class DiffeoReport:
    max_grad_conjugate: float
    max_inv_conjugate_jacobian: float
    max_round_trip: float
    growth_at_origin: float
    growth_slope: float
    max_grad_jump: float
    max_inv_jump_jacobian: float
    bound_grad_conjugate: float
    bound_inv_conjugate_jacobian: float
    bound_growth_conjugate: tuple  # (constant, slope) of |F(x)| <= a + b|x|
    max_growth_violation: float
    passed: bool


def diffeo_report(handle: JumpMapHandle, region, grid, t=0.0, z=1.0, tol=DEFAULT_TOL) -> DiffeoReport:
    """Empirical maxima over ``grid`` compared with the composite-map bounds.

    ``region`` is unused beyond documentation of where ``grid`` lives; the
    growth constants of H, the sup of grad H and the sup of
    ``|(I + grad H)^-1|`` are estimated on the grid itself.
    """
    X = np.asarray(grid, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    d1 = X.shape[-1]
    Hx = handle.H(t, X, z)
    G = handle.gradient(t, X, z)
    max_grad_jump = float(np.max(np.linalg.norm(G, ord=2, axis=(-2, -1)))) if X.size else 0.0
    max_inv_jump_jacobian = float(np.max(np.linalg.norm(np.linalg.inv(np.eye(d1) + G), ord=2, axis=(-2, -1))))
    growth_at_origin = float(np.linalg.norm(handle.H(t, np.zeros((1, d1)), z)[0]))
    growth_slope = max_grad_jump  # mean value bound on a convex region
    growth_excess = _norm(Hx) - (growth_at_origin + growth_slope * _norm(X))

    y = invert_jump_map(handle, t, X, z, tol)
    conj = -handle.H(t, y, z)
    round_trip = float(np.max(_norm(y + handle.H(t, y, z) - X)))
    Gy = handle.gradient(t, y, z)
    inv = np.linalg.inv(np.eye(d1) + Gy)
    grad_conj = -Gy @ inv  # chain rule for x -> -H(y(x))
    eye_grad_conj = np.eye(d1) + grad_conj
    max_grad_conjugate = float(np.max(np.linalg.norm(grad_conj, ord=2, axis=(-2, -1))))
    max_inv = float(np.max(np.linalg.norm(np.linalg.inv(eye_grad_conj), ord=2, axis=(-2, -1))))

    bound_grad_cj = max_inv_jump_jacobian * max_grad_jump
    bound_inv = 1.0 + max_grad_jump
    growth = (growth_at_origin + growth_slope * growth_at_origin * max_inv_jump_jacobian,
              growth_slope * max_inv_jump_jacobian)
    excess_conj = float(np.max(_norm(conj) - (growth[0] + growth[1] * _norm(X))))
    slack = 1e-9
    passed = (
        max_grad_conjugate <= bound_grad_cj + slack
        and max_inv <= bound_inv + slack
        and excess_conj <= slack
        and round_trip <= 10 * tol
    )
    return DiffeoReport(
        max_grad_conjugate, max_inv, round_trip, growth_at_origin, growth_slope, max_grad_jump, max_inv_jump_jacobian,
        bound_grad_cj, bound_inv, growth,
        max(excess_conj, float(np.max(growth_excess))), passed,
    )
