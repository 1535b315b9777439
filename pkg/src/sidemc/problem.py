"""Problem description, coefficient evaluation, weighted Hölder norms and
the numerical audit of the standing assumptions."""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import ConfigurationError, EvaluationError
from .noise import JumpMeasureSpec, compensator_quadrature

FD_STEP = 1e-6


class Field:
    """A vectorised coefficient field ``(t, X[, z]) -> array``.

    ``X`` has shape ``(..., d1)``; the value has shape ``X.shape[:-1] + shape``.
    ``z`` is a scalar mark or an array broadcasting against ``X.shape[:-1]``.
    """

    def __init__(self, fn, shape, name="", constant=None, gradient=None):
        self.fn = fn
        self.shape = tuple(int(s) for s in shape)
        self.name = name
        self._grad = gradient
        self.constant = None
        if constant is not None:
            self.constant = np.array(np.broadcast_to(np.asarray(constant, dtype=float), self.shape))
        self.is_zero = self.constant is not None and not np.any(self.constant)
        self.is_constant = self.constant is not None

    def __repr__(self):
        kind = "zero" if self.is_zero else "constant" if self.is_constant else "field"
        return f"Field({self.name or '?'}, shape={self.shape}, {kind})"

    @classmethod
    def zero(cls, shape, name=""):
        return cls(None, shape, name=name, constant=np.zeros(shape))

    @classmethod
    def const(cls, value, shape=None, name=""):
        value = np.asarray(value, dtype=float)
        return cls(None, value.shape if shape is None else shape, name=name, constant=value)

    @classmethod
    def from_expressions(cls, entries, shape, name=""):
        """Build from a nested list of compiled expressions (see ``expr``)."""
        shape = tuple(shape)
        flat = np.empty(shape, dtype=object)
        arr = np.array(entries, dtype=object).reshape(shape) if shape else np.array(entries, dtype=object)
        flat[...] = arr
        items = [(idx, flat[idx]) for idx in itertools.product(*[range(s) for s in shape])]
        if all(e.constant_value is not None for _, e in items):
            value = np.zeros(shape)
            for idx, e in items:
                value[idx] = e.constant_value
            return cls(None, shape, name=name, constant=value)

        def fn(t, X, z=None):
            out = np.empty(np.broadcast_shapes(X.shape[:-1], np.shape(z) if z is not None else ()) + shape)
            for idx, e in items:
                out[(Ellipsis,) + idx] = e(t, X, z) if e.constant_value is None else e.constant_value
            return out

        return cls(fn, shape, name=name)

    def __call__(self, t, X, z=None):
        base = X.shape[:-1]
        if self.constant is not None:
            return np.broadcast_to(self.constant, base + self.shape)
        out = np.asarray(self.fn(t, X, z), dtype=float)
        if out.shape != base + self.shape:
            out = np.broadcast_to(out, base + self.shape)
        return out

    def gradient(self, t, X, z=None, step=FD_STEP):
        """Spatial gradient, shape ``X.shape[:-1] + shape + (d1,)``."""
        d1 = X.shape[-1]
        base = X.shape[:-1]
        if self.constant is not None:
            return np.zeros(base + self.shape + (d1,))
        if self._grad is not None:
            return np.broadcast_to(np.asarray(self._grad(t, X, z), dtype=float), base + self.shape + (d1,))
        cols = []
        for i in range(d1):
            Xp = np.array(X, dtype=float, copy=True)
            Xm = np.array(X, dtype=float, copy=True)
            Xp[..., i] += step
            Xm[..., i] -= step
            cols.append((self(t, Xp, z) - self(t, Xm, z)) / (2 * step))
        return np.stack(cols, axis=-1)


def as_field(value, shape, name="") -> Field:
    """Coerce None, numbers, arrays or callables into a :class:`Field`."""
    if isinstance(value, Field):
        if value.shape != tuple(shape):
            raise ConfigurationError(f"field {name!r} has shape {value.shape}, expected {tuple(shape)}")
        if not value.name:
            value.name = name
        return value
    if value is None:
        return Field.zero(shape, name=name)
    if callable(value):
        return Field(value, shape, name=name)
    arr = np.asarray(value, dtype=float)
    try:
        arr = np.broadcast_to(arr, shape)
    except ValueError:
        raise ConfigurationError(f"field {name!r}: value of shape {arr.shape} does not fit {tuple(shape)}") from None
    return Field.const(arr, shape, name=name)


COEFFICIENT_NAMES = ("b", "sigma1", "sigma2", "upsilon1", "upsilon2", "c", "f", "g", "H1", "H2", "rho1", "rho2", "h")


@dataclass(frozen=True)
class CoefficientSet:
    """All coefficient fields plus the growth metadata used by the audit.

    Index ``k-1`` of the per-family tuples holds family ``k``.
    Envelopes ``K``, ``Kbar``, ``l`` and the exponents ``xi``, ``zeta`` are
    callables of the mark ``z`` (or None when not declared).
    """

    d1: int
    d2: int
    alpha: float
    channels: tuple
    b: Field
    sigma: tuple
    upsilon: tuple
    c: Field
    f: Field
    g: Field
    H: tuple
    rho: tuple
    h: Field
    theta: float = 0.0
    K: tuple = (None, None)
    Kbar: tuple = (None, None)
    l: tuple = (None, None)
    xi: Callable | None = None
    zeta: Callable | None = None

    @classmethod
    def build(cls, d1=1, d2=1, alpha=1.0, channels=(1, 1), theta=0.0, envelopes=None, **fields):
        unknown = set(fields) - set(COEFFICIENT_NAMES)
        if unknown:
            raise ConfigurationError(f"unknown coefficient fields: {sorted(unknown)}")
        if not 0 < alpha <= 2:
            raise ConfigurationError(f"alpha must lie in (0, 2], got {alpha}")
        m1, m2 = (int(c) for c in channels)
        shapes = {
            "b": (d1,),
            "sigma1": (d1, m1),
            "sigma2": (d1, m2),
            "upsilon1": (d2, d2, m1),
            "upsilon2": (d2, d2, m2),
            "c": (d2, d2),
            "f": (d2,),
            "g": (d2, m1),
            "H1": (d1,),
            "H2": (d1,),
            "rho1": (d2, d2),
            "rho2": (d2, d2),
            "h": (d2,),
        }
        F = {name: as_field(fields.get(name), shapes[name], name) for name in COEFFICIENT_NAMES}
        env = envelopes or {}
        return cls(
            d1=d1,
            d2=d2,
            alpha=float(alpha),
            channels=(m1, m2),
            b=F["b"],
            sigma=(F["sigma1"], F["sigma2"]),
            upsilon=(F["upsilon1"], F["upsilon2"]),
            c=F["c"],
            f=F["f"],
            g=F["g"],
            H=(F["H1"], F["H2"]),
            rho=(F["rho1"], F["rho2"]),
            h=F["h"],
            theta=float(theta),
            K=(env.get("K1"), env.get("K2")),
            Kbar=(env.get("Kbar1"), env.get("Kbar2")),
            l=(env.get("l1"), env.get("l2")),
            xi=env.get("xi"),
            zeta=env.get("zeta"),
        )

    def fields(self):
        return {
            "b": self.b,
            "sigma1": self.sigma[0],
            "sigma2": self.sigma[1],
            "upsilon1": self.upsilon[0],
            "upsilon2": self.upsilon[1],
            "c": self.c,
            "f": self.f,
            "g": self.g,
            "H1": self.H[0],
            "H2": self.H[1],
            "rho1": self.rho[0],
            "rho2": self.rho[1],
            "h": self.h,
        }

    def latent_is_trivial(self) -> bool:
        return self.sigma[1].is_zero and self.upsilon[1].is_zero and self.H[1].is_zero and self.rho[1].is_zero


MARK_FIELDS = ("H1", "H2", "rho1", "rho2", "h")


@dataclass(frozen=True)
class ProblemSpec:
    """One SIDE system: coefficients, jump measures, initial condition, horizon."""

    coefficients: CoefficientSet
    measures: tuple
    T: float
    phi: Field
    theta_prime: float = 0.0
    beta_prime: float | None = None
    eta: tuple = (0.5, 0.5)
    beta_bar: float | None = None
    beta_tilde: float | None = None
    N0: float = 1e3
    name: str = ""

    def __post_init__(self):
        co = self.coefficients
        if self.beta_prime is None:
            object.__setattr__(self, "beta_prime", co.alpha + 0.5)
        for name in ("beta_bar", "beta_tilde"):
            if getattr(self, name) is None:
                object.__setattr__(self, name, max(2.0, self.beta_prime + 0.5))
        if not self.beta_prime > co.alpha:
            raise ConfigurationError(f"beta_prime={self.beta_prime} must exceed alpha={co.alpha}")
        if not self.T > 0:
            raise ConfigurationError("horizon T must be positive")
        measures = tuple(self.measures) if self.measures else ()
        measures = measures + (JumpMeasureSpec.empty(),) * (2 - len(measures))
        object.__setattr__(self, "measures", measures)
        object.__setattr__(self, "phi", as_field(self.phi, (co.d2,), "phi"))
        for k in (0, 1):
            if not 0 <= self.eta[k] < 1:
                raise ConfigurationError(f"eta{k + 1} must lie in [0, 1)")

    @property
    def d1(self):
        return self.coefficients.d1

    @property
    def d2(self):
        return self.coefficients.d2

    @property
    def alpha(self):
        return self.coefficients.alpha


def evaluate_coefficients(spec: ProblemSpec, t: float, x, z=None) -> dict:
    """Evaluate every coefficient at ``(t, x)`` (mark fields only when ``z`` is given)."""
    if not 0 <= t <= spec.T:
        raise ConfigurationError(f"t={t} outside [0, {spec.T}]")
    X = np.atleast_1d(np.asarray(x, dtype=float))
    bundle = {}
    for name, fld in spec.coefficients.fields().items():
        if name in MARK_FIELDS and z is None:
            continue
        value = np.array(fld(t, X, z))
        if not np.all(np.isfinite(value)):
            raise EvaluationError(f"coefficient {name} is not finite at t={t}, x={X.tolist()}, z={z}")
        bundle[name] = value
    return bundle


# ------------------------------------------------------ weighted Hölder


def r1(X):
    return np.sqrt(1.0 + np.sum(np.asarray(X) ** 2, axis=-1))


@dataclass(frozen=True)
class AuditGrid:
    """Tensor grid with ``points`` nodes per axis on the box [lower, upper]^d."""

    lower: float = -10.0
    upper: float = 10.0
    points: int = 201
    dim: int = 1

    def nodes(self):
        axis = np.linspace(self.lower, self.upper, self.points)
        mesh = np.meshgrid(*([axis] * self.dim), indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)

    def refined(self) -> "AuditGrid":
        return AuditGrid(self.lower, self.upper, 2 * self.points - 1, self.dim)

    def describe(self) -> dict:
        return {"lower": self.lower, "upper": self.upper, "points": self.points, "dim": self.dim}


@dataclass(frozen=True)
class HolderNormReport:
    theta: float
    beta: float
    value: float
    sup_part: float
    seminorm_part: float
    grid: dict


def split_order(beta: float):
    """``([beta]^-, {beta}^+)`` with the fractional part in (0, 1]."""
    n = math.ceil(beta) - 1
    return n, beta - n


def _multi_indices(d, order):
    return [g for g in itertools.product(range(order + 1), repeat=d) if sum(g) == order]


def _fd_derivative(fn, X, gamma, step):
    # nested central differences, one axis at a time
    if not any(gamma):
        return fn(X)
    i = next(k for k, g in enumerate(gamma) if g)
    rest = list(gamma)
    rest[i] -= 1
    Xp = X.copy()
    Xm = X.copy()
    Xp[..., i] += step
    Xm[..., i] -= step
    return (_fd_derivative(fn, Xp, rest, step) - _fd_derivative(fn, Xm, rest, step)) / (2 * step)


def _as_spatial(fld, t=0.0):
    if isinstance(fld, Field):
        return lambda X: np.asarray(fld(t, X), dtype=float).reshape(X.shape[:-1] + (-1,))

    def fn(X):
        val = np.asarray(fld(X), dtype=float)
        if val.ndim == X.ndim - 1:
            val = val[..., None]
        return np.broadcast_to(val, X.shape[:-1] + val.shape[X.ndim - 1 :]).reshape(X.shape[:-1] + (-1,))

    return fn


def weighted_holder_norm(fld, theta, beta, audit_grid: AuditGrid, variant="weighted_field", t=0.0, fd_step=1e-4,
                         separations=10) -> HolderNormReport:
    """Grid estimate of the weighted Hölder norm of ``fld`` with weight ``r1^-theta``.

    ``variant="weighted_field"`` measures derivatives of ``r1^-theta * fld``;
    ``variant="weighted_derivatives"`` weights the derivatives of ``fld``.
    """
    if not beta > 0:
        raise ConfigurationError("Hölder order must be positive")
    raw = _as_spatial(fld, t)
    X = audit_grid.nodes()
    d = X.shape[-1]
    n, frac = split_order(beta)

    def weight(Y):
        return r1(Y)[..., None] ** (-theta)

    if variant == "weighted_field":
        def derivative(Y, gamma):
            return _fd_derivative(lambda Z: weight(Z) * raw(Z), Y, gamma, fd_step)
    elif variant == "weighted_derivatives":
        def derivative(Y, gamma):
            return weight(Y) * _fd_derivative(raw, Y, gamma, fd_step)
    else:
        raise ConfigurationError(f"unknown norm variant {variant!r}")

    base = raw(X)
    bad = ~np.all(np.isfinite(base), axis=-1)
    if np.any(bad):
        raise EvaluationError(f"field is not finite at grid point {X[np.argmax(bad)].tolist()}")

    sup_part = 0.0
    for order in range(n + 1):
        for gamma in _multi_indices(d, order):
            sup_part += float(np.max(np.linalg.norm(derivative(X, gamma), axis=-1)))

    span = audit_grid.upper - audit_grid.lower
    semi = 0.0
    for gamma in _multi_indices(d, n):
        at_x = derivative(X, gamma)
        best = 0.0
        for j in range(separations):
            sep = span * 2.0 ** (-j - 1)
            for axis in range(d):
                for sign in (1.0, -1.0):
                    Y = X.copy()
                    Y[:, axis] += sign * sep
                    diff = np.linalg.norm(derivative(Y, gamma) - at_x, axis=-1)
                    best = max(best, float(np.max(diff)) / sep**frac)
        semi += best
    return HolderNormReport(theta, beta, sup_part + semi, sup_part, semi, audit_grid.describe())


def grid_holder_norm(values, nodes, theta, beta) -> HolderNormReport:
    """Weighted Hölder norm of gridded data on a uniform 1-D grid.

    Derivatives use second-order differences of the data; quotients pair
    grid points at every power-of-two index separation.
    """
    values = np.asarray(values, dtype=float)
    values = values.reshape(values.shape[0], -1)
    nodes = np.asarray(nodes, dtype=float).reshape(-1)
    if not np.all(np.isfinite(values)):
        raise EvaluationError("gridded field contains non-finite values")
    n, frac = split_order(beta)
    g = values * (1.0 + nodes**2)[:, None] ** (-theta / 2)
    derivs = [g]
    for _ in range(n):
        derivs.append(np.gradient(derivs[-1], nodes, axis=0, edge_order=2))
    sup_part = float(sum(np.max(np.linalg.norm(d, axis=-1)) for d in derivs))
    top = derivs[-1]
    semi = 0.0
    s = 1
    while s < nodes.size:
        diff = np.linalg.norm(top[s:] - top[:-s], axis=-1)
        dist = nodes[s:] - nodes[:-s]
        semi = max(semi, float(np.max(diff / dist**frac)))
        s *= 2
    grid = {"lower": float(nodes[0]), "upper": float(nodes[-1]), "points": int(nodes.size), "dim": 1}
    return HolderNormReport(theta, beta, sup_part + semi, sup_part, semi, grid)


# ------------------------------------------------------ assumption audit


@dataclass
class ClauseResult:
    clause: str
    quantity: str
    value: float
    bound: float
    passed: bool
    note: str = ""


@dataclass
class AssumptionReport:
    clauses: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.clauses)

    def add(self, clause, quantity, value, bound, passed=None, note=""):
        value = float(value)
        passed = bool(value <= bound * (1 + 1e-12)) if passed is None else bool(passed)
        self.clauses.append(ClauseResult(clause, quantity, value, float(bound), passed, note))

    def failures(self):
        return [c for c in self.clauses if not c.passed]

    def find(self, quantity):
        return [c for c in self.clauses if c.quantity == quantity]


def _audit_times(T):
    return (0.0, 0.5 * T, T)


def _marks_for(measure: JumpMeasureSpec):
    """(z, weight, tag) triples representing the mark set for the audit."""
    out = []
    for tag in ("D", "E", "V"):
        z, w = measure.quadrature_nodes(tag)
        out.extend((float(zi), float(wi), tag) for zi, wi in zip(z, w))
    return out


def empirical_envelope(H: Field, z, grid: AuditGrid, T: float) -> float:
    """max over the audit grid and times of ``|r1^-1 H(t, x, z)|``."""
    X = grid.nodes()
    return max(float(np.max(np.linalg.norm(H(t, X, z), axis=-1) / r1(X))) for t in _audit_times(T))


def verify_assumptions(spec: ProblemSpec, audit_grid: AuditGrid | None = None) -> AssumptionReport:
    """Grid maxima of the governed quantities, compared with the declared bounds."""
    co = spec.coefficients
    grid = audit_grid or AuditGrid(dim=co.d1, points=201 if co.d1 == 1 else 21)
    X = grid.nodes()
    N0 = spec.N0
    rep = AssumptionReport()
    times = _audit_times(spec.T)
    bbar, btil = spec.beta_bar, spec.beta_tilde

    def tmax(fn):
        return max(fn(t) for t in times)

    def norm_at(fld, theta, beta, z=None):
        def wrapped(Y, _t):
            return np.asarray(fld(_t, Y, z)).reshape(Y.shape[:-1] + (-1,))

        return tmax(lambda t: weighted_holder_norm(lambda Y: wrapped(Y, t), theta, beta, grid).value)

    def grad_norm(fld, beta, z=None):
        def wrapped(Y, _t):
            return np.asarray(fld.gradient(_t, Y, z)).reshape(Y.shape[:-1] + (-1,))

        return tmax(lambda t: weighted_holder_norm(lambda Y: wrapped(Y, t), 0.0, beta, grid).value)

    def sup_weighted(fld, power, z=None):
        return tmax(lambda t: float(np.max(np.linalg.norm(np.asarray(fld(t, X, z)).reshape(len(X), -1), axis=-1)
                                           / r1(X) ** power)))

    # drift and diffusion
    rep.add("regularity", "|r1^-1 b|_0", sup_weighted(co.b, 1.0), N0)
    rep.add("regularity", f"|grad b|_{bbar - 1:g}", grad_norm(co.b, bbar - 1), N0)
    for k in (0, 1):
        rep.add("regularity", f"|r1^-1 sigma{k + 1}|_0", sup_weighted(co.sigma[k], 1.0), N0)
        rep.add("regularity", f"|grad sigma{k + 1}|_{bbar - 1:g}", grad_norm(co.sigma[k], bbar - 1), N0)

    # jump coefficients per mark
    alpha = co.alpha
    for k in (0, 1):
        measure = spec.measures[k]
        H, rho = co.H[k], co.rho[k]
        eta = spec.eta[k]
        integrals = {"D": 0.0, "E": 0.0}
        ell_integrals = {"D": 0.0, "E": 0.0}
        max_grad, max_inv, max_K, max_Kbar, max_l = 0.0, 0.0, 0.0, 0.0, 0.0
        for z, w, tag in _marks_for(measure):
            K_emp = empirical_envelope(H, z, grid, spec.T)
            Kbar_emp = grad_norm(H, bbar - 1, z)
            K_dec = co.K[k](z) if co.K[k] is not None else K_emp
            Kbar_dec = co.Kbar[k](z) if co.Kbar[k] is not None else Kbar_emp
            if co.K[k] is not None:
                rep.add("regularity", f"|r1^-1 H{k + 1}(z={z:g})|_0 <= K{k + 1}(z)", K_emp, K_dec)
            if co.Kbar[k] is not None:
                rep.add("regularity", f"|grad H{k + 1}(z={z:g})| <= Kbar{k + 1}(z)", Kbar_emp, Kbar_dec)
            max_K, max_Kbar = max(max_K, K_dec), max(max_Kbar, Kbar_dec)
            if tag == "D":
                integrals["D"] += w * (K_dec**alpha + Kbar_dec**2)
            elif tag == "E":
                integrals["E"] += w * (K_dec ** min(1.0, alpha) + Kbar_dec)
            # invertibility of x -> x + H(x, z)
            for t in times:
                G = H.gradient(t, X, z)
                gnorm = np.linalg.norm(G, ord=2, axis=(-2, -1))
                max_grad = max(max_grad, float(np.max(gnorm)))
                inv = np.linalg.inv(np.eye(co.d1) + G)
                max_inv = max(max_inv, float(np.max(np.linalg.norm(inv, ord=2, axis=(-2, -1)))))
            # zero-order jump coefficients
            l_emp = max(norm_at(rho, 0.0, btil, z), norm_at(co.h, co.theta, btil, z) if k == 0 else 0.0)
            l_dec = co.l[k](z) if co.l[k] is not None else l_emp
            if co.l[k] is not None:
                rep.add("zero-order", f"|rho{k + 1}(z={z:g})|, |r1^-theta h(z)| <= l{k + 1}(z)", l_emp, l_dec)
            max_l = max(max_l, l_dec)
            if tag == "D":
                ell_integrals["D"] += w * l_dec**2
            elif tag == "E":
                ell_integrals["E"] += w * l_dec
        fam = k + 1
        rep.add("regularity", f"int_D{fam}(K^alpha+Kbar^2) pi", integrals["D"], N0)
        rep.add("regularity", f"int_E{fam}(K^(1^alpha)+Kbar) pi", integrals["E"], N0)
        rep.add("regularity", f"K{fam}+Kbar{fam}", max_K + max_Kbar, N0)
        small = max_grad <= eta
        note = f"max |grad H| = {max_grad:.4g}"
        if small:
            note += f"; small-jump bound 1/(1-max|grad H|) = {1 / (1 - max_grad):.6g}" if max_grad < 1 else ""
        rep.add("invertibility", f"|grad H{fam}| <= eta{fam}", max_grad, eta, note=note)
        rep.add("invertibility", f"|(I+grad H{fam})^-1|", max_inv, N0)
        rep.add("zero-order", f"l{fam}+int_D l^2 pi+int_E l pi", max_l + ell_integrals["D"] + ell_integrals["E"], N0)

    # zero-order and free terms
    rep.add("zero-order", f"|c|_{btil:g}", norm_at(co.c, 0.0, btil), N0)
    for k in (0, 1):
        rep.add("zero-order", f"|upsilon{k + 1}|_{btil:g}", norm_at(co.upsilon[k], 0.0, btil), N0)
    rep.add("zero-order", f"|r1^-theta f|_{btil:g}", norm_at(co.f, co.theta, btil), N0)
    rep.add("zero-order", f"|r1^-theta g|_{btil:g}", norm_at(co.g, co.theta, btil), N0)

    # representation theorem hypotheses
    rep.add("theorem", "beta' - alpha > 0", spec.beta_prime - alpha, 0.0, passed=spec.beta_prime > alpha)
    rep.add("theorem", "beta' < min(beta_bar, beta_tilde)", spec.beta_prime, min(bbar, btil),
            passed=spec.beta_prime < min(bbar, btil))
    phi_norm = weighted_holder_norm(spec.phi, spec.theta_prime, spec.beta_prime, grid).value
    rep.add("theorem", f"|r1^-theta' phi|_{spec.beta_prime:g}", phi_norm, np.inf, passed=np.isfinite(phi_norm))
    latent_v = spec.measures[1].mass(("V",))
    rep.add("structure", "pi2(V)", latent_v, 0.0, passed=latent_v == 0.0, note="set V exists only for family 1")
    return rep
