"""Analytic oracles, convergence studies and the Poisson moment inequalities."""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import ConfigurationError
from .noise import JumpMeasureSpec
from .problem import CoefficientSet, Field, ProblemSpec
from .solver import compute_correction_terms, estimate_solution, positivity_report, sweep_observed_seeds

AUDIT_TOL = 1e-4
AUDIT_POINTS = np.linspace(-2.0, 2.0, 9)


# ------------------------------------------------------------ generator


def _hessian(u, t, X, step):
    d = X.shape[-1]
    out = np.zeros(X.shape[:-1] + u(t, X).shape[-1:] + (d, d))
    for i in range(d):
        for j in range(d):
            ei = np.zeros(d)
            ej = np.zeros(d)
            ei[i] = step
            ej[j] = step
            out[..., i, j] = (u(t, X + ei + ej) - u(t, X + ei - ej) - u(t, X - ei + ej) + u(t, X - ei - ej)) / (4 * step**2)
    return out


def _gradient(u, t, X, step):
    d = X.shape[-1]
    cols = []
    for i in range(d):
        e = np.zeros(d)
        e[i] = step
        cols.append((u(t, X + e) - u(t, X - e)) / (2 * step))
    return np.stack(cols, axis=-1)  # (..., d2, d1)


def mean_generator(spec: ProblemSpec, u, t, X, step=1e-4):
    """Generator of the mean of the corrected equation, applied to ``u(t, .)``.

    Observed-family stochastic integrals contribute their compensators: the
    D-set parts vanish, jumps in E and V add ``(I + rho) u(x + H) - u + h``.
    """
    co = spec.coefficients
    alpha = co.alpha
    corr = compute_correction_terms(spec)
    U = u(t, X)
    G = _gradient(u, t, X, step)
    out = np.einsum("...i,...li->...l", corr.b_hat(t, X), G)
    out = out + np.einsum("...lm,...m->...l", corr.c_hat(t, X), U) + corr.f_hat(t, X)
    if alpha == 2.0:
        Hs = _hessian(u, t, X, step)
        for k in (0, 1):
            s = co.sigma[k](t, X)
            out = out + 0.5 * np.einsum("...ir,...jr,...lij->...l", s, s, Hs)
            out = out + np.einsum("...ir,...lmr,...mi->...l", s, co.upsilon[k](t, X), G)
    for k in (0, 1):
        measure = spec.measures[k]
        H, rho = co.H[k], co.rho[k]
        z, w = measure.quadrature_nodes("D")
        for zj, wj in zip(z, w):
            shifted = u(t, X + H(t, X, zj))
            out = out + wj * np.einsum("...lm,...m->...l", rho(t, X, zj), shifted - U)
            lin = np.einsum("...i,...li->...l", H(t, X, zj), G) if 1.0 < alpha <= 2.0 else 0.0
            out = out + wj * (shifted - U - lin)
        tags = ("E", "V") if k == 0 else ("E",)
        for tag in tags:
            z, w = measure.quadrature_nodes(tag)
            for zj, wj in zip(z, w):
                shifted = u(t, X + H(t, X, zj))
                term = shifted + np.einsum("...lm,...m->...l", rho(t, X, zj), shifted) - U
                if k == 0:
                    term = term + co.h(t, X, zj)
                out = out + wj * term
    return out


def generator_defect(spec, u, points=AUDIT_POINTS, dt=1e-3):
    """max |d/dt u - A u| at t = 0 (one-sided second-order difference in time)."""
    X = np.asarray(points, dtype=float).reshape(-1, spec.d1)
    dudt = (-3 * u(0.0, X) + 4 * u(dt, X) - u(2 * dt, X)) / (2 * dt)
    return float(np.max(np.abs(dudt - mean_generator(spec, u, 0.0, X))))


# -------------------------------------------------------------- oracles


@dataclass
class OracleProblem:
    """A problem with a known solution and the rule for accepting estimates.

    ``tolerance`` is ``("abs", tol)`` or ``("stderr", k, floor)`` meaning
    ``error <= max(floor, k * stderr)``.  ``mode="sweep"`` averages over
    observed seeds instead of latent replicas (for observed-noise problems,
    where the closed form is the mean over observed realizations).
    """

    name: str
    spec: ProblemSpec
    closed_form: Callable
    tolerance: tuple
    queries: np.ndarray
    t: float
    samples: int = 1
    n_steps: int | None = None
    mode: str = "latent"
    audit_defect: float = field(init=False, default=np.nan)

    def __post_init__(self):
        self.queries = np.asarray(self.queries, dtype=float)
        self.audit_defect = generator_defect(self.spec, self.closed_form)
        if not self.audit_defect <= AUDIT_TOL:
            raise ConfigurationError(
                f"oracle {self.name!r}: closed form fails the generator self-audit (defect {self.audit_defect:.3g})"
            )

    def accept(self, error, stderr):
        if self.tolerance[0] == "abs":
            return error <= self.tolerance[1], self.tolerance[1]
        _, k, floor = self.tolerance
        bound = max(floor, k * stderr)
        return error <= bound, bound


@dataclass
class OracleReport:
    name: str
    sup_error: float
    stderr: float
    bound: float
    passed: bool
    runtime: float
    samples: int


def run_oracle(oracle: OracleProblem, samples=None, n_steps=None, seed=0, threads=1) -> OracleReport:
    samples = oracle.samples if samples is None else samples
    n_steps = oracle.n_steps if n_steps is None else n_steps
    start = time.perf_counter()
    if oracle.mode == "sweep":
        res = sweep_observed_seeds(oracle.spec, oracle.t, oracle.queries, seed, samples, n_steps=n_steps, threads=threads)
        est, se = res.mean, res.stderr
    else:
        sol = estimate_solution(oracle.spec, oracle.t, oracle.queries, seed, samples, n_steps=n_steps, threads=threads)
        est, se = sol.estimate, sol.stderr
    runtime = time.perf_counter() - start
    X = oracle.queries.reshape(-1, oracle.spec.d1)
    exact = oracle.closed_form(oracle.t, X)
    err = np.abs(est - exact)
    sup_error = float(np.max(err))
    stderr = float(np.max(se))
    # stderr-based tolerances are applied pointwise
    if oracle.tolerance[0] == "stderr":
        _, k, floor = oracle.tolerance
        bounds = np.maximum(floor, k * se)
        passed = bool(np.all(err <= bounds))
        bound = float(bounds[np.unravel_index(np.argmax(err - bounds), err.shape)])
    else:
        passed, bound = oracle.accept(sup_error, stderr)
    return OracleReport(oracle.name, sup_error, stderr, float(bound), bool(passed), runtime, samples)


def _scalar(fn):
    return Field(lambda t, X, z=None: fn(t, X[..., :1]), (1,), "phi")


def transport_oracle(c=0.0, n_steps=1000):
    """b = 1, alpha = 1: characteristics are translations, ``u = e^{c t} sin(x + t)``."""
    co = CoefficientSet.build(alpha=1.0, b=1.0, c=c)
    spec = ProblemSpec(co, (), 1.0, phi=_scalar(lambda t, x: np.sin(x)), name="transport")
    return OracleProblem("transport" if c == 0 else f"transport+c{c:g}", spec,
                         lambda t, X: np.exp(c * t) * np.sin(X[..., :1] + t),
                         ("abs", 1e-3 if c == 0 else 1e-3 * math.exp(c)), np.linspace(-3, 3, 101), 1.0, 1, n_steps)


def heat_oracle(samples=200_000, n_steps=20, points=101, T=0.5):
    """One latent Wiener channel with unit diffusion and a Gaussian initial condition."""
    co = CoefficientSet.build(alpha=2.0, sigma2=1.0, channels=(1, 1))
    spec = ProblemSpec(co, (), T, phi=_scalar(lambda t, x: np.exp(-x**2 / 2)), name="latent-heat")
    return OracleProblem("latent-heat", spec,
                         lambda t, X: (1 + t) ** -0.5 * np.exp(-X[..., :1] ** 2 / (2 * (1 + t))),
                         ("stderr", 4.0, 5e-3), np.linspace(-3, 3, points), T, samples, n_steps)


def poisson_series(phi, x, rate_t, shift, tail=1e-12):
    """sum_k e^{-rate_t} rate_t^k / k! phi(x + k shift), truncated once the tail is below ``tail``."""
    x = np.asarray(x, dtype=float)
    total = np.zeros_like(x)
    weight = math.exp(-rate_t)
    cumulative = 0.0
    k = 0
    while True:
        total = total + weight * phi(x + k * shift)
        cumulative += weight
        if 1.0 - cumulative < tail and k > rate_t:
            break
        k += 1
        weight *= rate_t / k
    return total


def compound_poisson_oracle(samples=100_000, rate=2.0, shift=0.3, T=1.0, n_steps=10):
    """Observed compound Poisson jumps of constant size; the mean solution is a Poisson series."""
    measure = JumpMeasureSpec(atoms=((1.0, rate, "E"),), name="poisson-atom")
    co = CoefficientSet.build(alpha=0.5, H1=shift)
    spec = ProblemSpec(co, (measure,), T, phi=_scalar(lambda t, x: np.sin(x)), beta_prime=1.0, name="compound-poisson")

    def closed(t, X):
        return poisson_series(np.sin, X[..., :1], rate * t, shift)

    return OracleProblem("compound-poisson", spec, closed, ("stderr", 4.0, 0.0), np.linspace(-3, 3, 101), T,
                         samples, n_steps, mode="sweep")


def sin_drift_oracle(n_steps=100, T=1.0):
    """b = sin x: ``u = phi(2 atan(tan(x/2) e^t))`` on (-pi, pi)."""
    co = CoefficientSet.build(alpha=1.0, b=Field(lambda t, X, z=None: np.sin(X), (1,), "b"))
    phi = _scalar(lambda t, x: np.cos(x))
    spec = ProblemSpec(co, (), T, phi=phi, name="sin-drift")
    return OracleProblem("sin-drift", spec, lambda t, X: np.cos(2 * np.arctan(np.tan(X[..., :1] / 2) * np.exp(t))),
                         ("abs", 1e-2), np.linspace(-2.5, 2.5, 21), T, 1, n_steps)


def oracle_suite(heat_samples=200_000, poisson_samples=100_000):
    return [transport_oracle(), heat_oracle(heat_samples), compound_poisson_oracle(poisson_samples)]


# --------------------------------------------------------- convergence


@dataclass
class ConvergenceTable:
    name: str
    rows: list  # dicts with dt, samples, error, stderr
    dt_order: float
    sample_slope: float

    def to_csv(self):
        lines = ["dt,samples,error,stderr"]
        lines += [f"{r['dt']!r},{r['samples']},{r['error']!r},{r['stderr']!r}" for r in self.rows]
        return "\n".join(lines) + "\n"


def _slope(x, y):
    x, y = np.log(np.asarray(x, float)), np.log(np.asarray(y, float))
    return float(np.polyfit(x, y, 1)[0])


def convergence_study(oracle: OracleProblem, dts, samples_list, seed=0) -> ConvergenceTable:
    """Errors over a Δt sweep (at the first sample size) and a sample-size sweep (at the finest Δt).

    The Δt order is the slope of log error against log Δt.  The sample slope
    uses the standard error when it is positive and the error otherwise.
    """
    if len(dts) < 3 or len(samples_list) < 3:
        raise ConfigurationError("a convergence study needs at least three Δt values and three sample sizes")
    rows = []
    T = oracle.spec.T
    for dt in dts:
        rep = run_oracle(oracle, samples=samples_list[0], n_steps=int(round(T / dt)), seed=seed)
        rows.append({"dt": float(dt), "samples": samples_list[0], "error": rep.sup_error, "stderr": rep.stderr})
    fine = min(dts)
    for M in samples_list:
        rep = run_oracle(oracle, samples=M, n_steps=int(round(T / fine)), seed=seed)
        rows.append({"dt": float(fine), "samples": M, "error": rep.sup_error, "stderr": rep.stderr})
    dt_rows = rows[: len(dts)]
    m_rows = rows[len(dts):]
    dt_order = _slope([r["dt"] for r in dt_rows], [max(r["error"], 1e-300) for r in dt_rows])
    if all(r["stderr"] > 0 for r in m_rows):
        ys = [r["stderr"] for r in m_rows]
    else:
        ys = [max(r["error"], 1e-300) for r in m_rows]
    sample_slope = _slope([r["samples"] for r in m_rows], ys)
    return ConvergenceTable(oracle.name, rows, dt_order, sample_slope)


# ----------------------------------------------------------- Burkholder


def stirling2(n, k):
    if n == k:
        return 1
    if k == 0 or k > n:
        return 0
    return k * stirling2(n - 1, k) + stirling2(n - 1, k - 1)


def poisson_moment(p, mean):
    """E N^p for N ~ Poisson(mean), integer p (Touchard polynomial)."""
    return float(sum(stirling2(p, k) * mean**k for k in range(p + 1)))


@dataclass
class BurkholderReport:
    p: int
    mean: float
    moment: float
    lower: float
    upper: float
    lower_ok: bool
    upper_ok: bool
    mc_moment: float | None = None
    mc_stderr: float | None = None

    @property
    def passed(self):
        return self.lower_ok and self.upper_ok


def burkholder_check(p, rate, T, n_mc=0, seed=0) -> BurkholderReport:
    """Both explicit moment inequalities for ``A = N_T`` (unit integrand on one atom).

    Here ``L_T = rate T`` is deterministic and the jump-sum term equals
    ``E N_T = rate T``.
    """
    if not p > 1:
        raise ConfigurationError("p must exceed 1")
    mu = rate * T
    e1 = 1.0 / (2 * p)
    e2 = 1.0 / (p * 2 ** (p - 1))
    moment = poisson_moment(p, mu)
    lower = max(e1 ** (p - 1) * p**p * (1 - p * e1) / (p * (p - 1) ** (p - 1)) * mu**p, mu)
    upper = p * 2 ** (p - 2) / (1 - p * 2 ** (p - 2) * e2) * (mu + (p - 1) ** (p - 1) / (e2 ** (p - 1) * p**p) * mu**p)
    rep = BurkholderReport(p, mu, moment, lower, upper, lower <= moment, moment <= upper)
    if n_mc:
        from .noise import stream

        draws = stream(seed, 1, 3).poisson(mu, size=int(n_mc)).astype(float) ** p
        rep.mc_moment = float(draws.mean())
        rep.mc_stderr = float(draws.std(ddof=1) / math.sqrt(n_mc))
    return rep


# ----------------------------------------------------------- positivity


def _zcol(z):
    # marks broadcast against X.shape[:-1]; add the component axis
    return np.asarray(z, dtype=float)[..., None]


def _expr_field(fn, shape, name):
    return Field(fn, shape, name)


def random_positivity_spec(clause, rng: np.random.Generator, T=0.5):
    """A random scalar problem meeting the hypotheses of the lower (1) or upper (2) bound."""
    a_b, a_s, a_h = rng.uniform(-0.5, 0.5), rng.uniform(0.2, 0.6), rng.uniform(-0.2, 0.2)
    c0 = rng.uniform(-0.5, 0.5) if clause == 1 else -rng.uniform(0.0, 0.5)
    f0 = rng.uniform(0.0, 0.3)
    r_obs = rng.uniform(-0.9, 0.5) if clause == 1 else -rng.uniform(0.0, 0.9)
    r_lat = rng.uniform(-0.9, 0.5) if clause == 1 else -rng.uniform(0.0, 0.9)
    shift = rng.uniform(0.0, 2 * np.pi)
    b = _expr_field(lambda t, X, z=None: a_b * np.sin(X + shift), (1,), "b")
    H1 = _expr_field(lambda t, X, z=None: a_h * np.sin(X) * _zcol(z), (1,), "H1")
    H2 = _expr_field(lambda t, X, z=None: 0.5 * a_h * np.cos(X) * _zcol(z), (1,), "H2")
    ups = 0.3 * rng.uniform(-1, 1) if clause == 1 else 0.0
    measures = (JumpMeasureSpec(atoms=((1.0, 1.0, "E"),)), JumpMeasureSpec(atoms=((0.5, 1.0, "D"), (1.0, 0.5, "E"))))
    if clause == 1:
        f = _expr_field(lambda t, X, z=None: f0 * (1 + np.cos(X)), (1,), "f")
        c = _expr_field(lambda t, X, z=None: c0 * np.cos(X)[..., None], (1, 1), "c")
        phi = _expr_field(lambda t, X, z=None: np.exp(-X**2) * (1 + np.sin(3 * X)) / 2, (1,), "phi")
    else:
        f = _expr_field(lambda t, X, z=None: -f0 * (1 + np.cos(X)), (1,), "f")
        c = _expr_field(lambda t, X, z=None: c0 * (1 + np.cos(X))[..., None] / 2, (1, 1), "c")
        phi = _expr_field(lambda t, X, z=None: 1 - 0.5 * np.exp(-X**2), (1,), "phi")
    co = CoefficientSet.build(
        alpha=2.0, channels=(1, 1), b=b, sigma1=[[a_s / 2]], sigma2=[[a_s]], c=c, f=f,
        upsilon1=np.full((1, 1, 1), ups), H1=H1, H2=H2,
        rho1=np.full((1, 1), r_obs), rho2=np.full((1, 1), r_lat),
    )
    return ProblemSpec(co, measures, T, phi=phi, name=f"positivity-{clause}")


def positivity_suite(clause, count=5, seed=0, M_inner=400, n_steps=25, queries=None):
    """Reports for ``count`` random problems of one clause, each at one observed seed."""
    rng = np.random.default_rng(seed)
    queries = np.linspace(-2, 2, 21) if queries is None else queries
    out = []
    for i in range(count):
        spec = random_positivity_spec(clause, rng)
        sol = estimate_solution(spec, spec.T, queries, seed + i, M_inner, n_steps=n_steps)
        out.append((spec, sol, positivity_report(sol, spec)))
    return out
