"""Solution estimators.

``estimate_solution`` fixes one observed noise realization and averages the
pathwise value ``Phi_t(X_t^{-1}(x))`` over independent latent replicas.
``interlace_large_jumps`` composes such solutions across large observed
jumps.  Both work in blocks of ``BLOCK`` replicas; block statistics are
merged in a fixed pairwise order so results do not depend on the number of
worker threads.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, NumericalError
from .flow import Model, NoiseBatch, Simulator, seed_mesh, solve_inverse
from .jumpmaps import DEFAULT_TOL, invert_jump_map
from .noise import LATENT, OBSERVED, TAG_CODE, TimeGrid, compensator_quadrature, jump_events, wiener_increments
from .problem import AuditGrid, Field, ProblemSpec, empirical_envelope

BLOCK = 1024
MAX_DISCARD_FRACTION = 0.01
DEFAULT_DT = 1e-3
LARGE_EVENT_CAP = 10_000


# ------------------------------------------------------------ corrections


@dataclass
class CorrectionFields:
    b_hat: Field
    c_hat: Field
    f_hat: Field


def _sigma_dsigma(sigma, t, X):
    return np.einsum("...jr,...irj->...i", sigma(t, X), sigma.gradient(t, X))


def correction_parts(spec_or_model, measures=None):
    """The added parts of (b_hat, c_hat, f_hat) as callables ``(t, X) -> array``."""
    m = spec_or_model if isinstance(spec_or_model, Model) else Model.from_spec(spec_or_model)
    two = m.alpha == 2.0
    comp = 1.0 < m.alpha <= 2.0

    def node_sum(k, fld, t, X):
        z, w = m.dnodes[k]
        handle = m.handle(k)
        total = 0.0
        for zj, wj in zip(z, w):
            y = invert_jump_map(handle, t, X, zj, m.tol)
            total = total + wj * (fld(t, X, zj) - fld(t, y, zj))
        return total

    def quad_sum(k, fld, t, X):
        if measures is None:
            return node_sum(k, fld, t, X)
        handle = m.handle(k)

        def integrand(zj):
            y = invert_jump_map(handle, t, X, zj, m.tol)
            return fld(t, X, zj) - fld(t, y, zj)

        return compensator_quadrature(integrand, measures[k], "D")

    def db(t, X):
        out = np.zeros(X.shape[:-1] + (m.d1,))
        for k in (0, 1):
            if two and not m.sigma[k].is_zero and not m.sigma[k].is_constant:
                out = out + _sigma_dsigma(m.sigma[k], t, X)
            if comp and not m.H[k].is_zero and not m.H[k].is_constant:
                out = out + quad_sum(k, m.H[k], t, X)
        return out

    def dc(t, X):
        out = np.zeros(X.shape[:-1] + (m.d2, m.d2))
        for k in (0, 1):
            if two and not m.sigma[k].is_zero and not m.upsilon[k].is_zero and not m.upsilon[k].is_constant:
                out = out + np.einsum("...jr,...abrj->...ab", m.sigma[k](t, X), m.upsilon[k].gradient(t, X))
            if not m.rho[k].is_zero and not m.H[k].is_zero:
                out = out + quad_sum(k, m.rho[k], t, X)
        return out

    def df(t, X):
        out = np.zeros(X.shape[:-1] + (m.d2,))
        if two and not m.sigma[0].is_zero and not m.g.is_zero and not m.g.is_constant:
            out = out + np.einsum("...jr,...arj->...a", m.sigma[0](t, X), m.g.gradient(t, X))
        if not m.h.is_zero and not m.H[0].is_zero:
            out = out + quad_sum(0, m.h, t, X)
        return out

    return db, dc, df


def compute_correction_terms(spec: ProblemSpec) -> CorrectionFields:
    """``b_hat``, ``c_hat``, ``f_hat`` of the equation the plain estimator solves."""
    m = Model.from_spec(spec)
    db, dc, df = correction_parts(m, spec.measures)
    drift = 1.0 if 1.0 <= m.alpha <= 2.0 else 0.0

    def wrap(fn, name):
        def call(t, X, z=None):
            try:
                return fn(t, X)
            except NumericalError as exc:
                raise NumericalError(f"correction term {name}: {exc}") from exc

        return call

    return CorrectionFields(
        Field(wrap(lambda t, X: drift * m.b(t, X) + db(t, X), "b_hat"), (m.d1,), "b_hat"),
        Field(wrap(lambda t, X: m.c(t, X) + dc(t, X), "c_hat"), (m.d2, m.d2), "c_hat"),
        Field(wrap(lambda t, X: m.f(t, X) + df(t, X), "f_hat"), (m.d2,), "f_hat"),
    )


# ---------------------------------------------------------------- results


@dataclass
class SolutionField:
    t: float
    points: np.ndarray  # (Q, d1)
    estimate: np.ndarray  # (Q, d2)
    stderr: np.ndarray  # (Q, d2)
    inner_samples: int
    observed_noise_seed: int
    latent_seed: int
    segment_weights: list = field(default_factory=list)
    discarded: int = 0
    n_steps: int = 0
    segment_index: int = 0
    outside_hull: int = 0

    def __post_init__(self):
        if self.inner_samples < 1:
            raise NumericalError("no inner replica survived")
        if not np.all(np.isfinite(self.estimate)):
            raise NumericalError("estimate is not finite at every query point")


# ---------------------------------------------------------- reductions


def _stats(values):
    """(n, mean, M2) of ``values`` along axis 0; the mean is taken about the first row."""
    n = values.shape[0]
    if n == 0:
        shape = values.shape[1:]
        return 0, np.zeros(shape), np.zeros(shape)
    v0 = values[0]
    mean = v0 + np.mean(values - v0, axis=0)
    M2 = np.sum((values - mean) ** 2, axis=0)
    return n, mean, M2


def _merge(a, b):
    na, ma, Ma = a
    nb, mb, Mb = b
    if na == 0:
        return b
    if nb == 0:
        return a
    n = na + nb
    delta = mb - ma
    return n, ma + delta * (nb / n), Ma + Mb + delta * delta * (na * nb / n)


def tree_reduce(stats):
    """Pairwise merge of block statistics in a fixed order."""
    stats = list(stats)
    if not stats:
        raise ValueError("nothing to reduce")
    while len(stats) > 1:
        nxt = [_merge(stats[i], stats[i + 1]) for i in range(0, len(stats) - 1, 2)]
        if len(stats) % 2:
            nxt.append(stats[-1])
        stats = nxt
    return stats[0]


def _finish(stat):
    n, mean, M2 = stat
    if n > 1:
        stderr = np.sqrt(np.maximum(M2, 0.0) / (n - 1)) / math.sqrt(n)
    else:
        stderr = np.zeros_like(mean)
    return mean, stderr


# ---------------------------------------------------------- noise setup


@dataclass
class _Setup:
    model: Model
    spec: ProblemSpec
    grid: TimeGrid
    observed_seed: int
    latent_seed: int
    obs_dW: np.ndarray
    obs_events: tuple  # (times, marks, families) of kept observed events
    latent_active: bool
    latent_events_active: bool


def _grid_for(spec, dt=None, n_steps=None):
    if n_steps is None:
        n_steps = max(1, int(round(spec.T / (DEFAULT_DT if dt is None else dt))))
    return TimeGrid.uniform(spec.T, int(n_steps))


def _wiener_matters(co, k):
    used = (co.alpha == 2.0 and not co.sigma[k].is_zero) or not co.upsilon[k].is_zero or (k == 0 and not co.g.is_zero)
    return co.channels[k] > 0 and used


def _increments(spec, grid, family, seed, replica=0):
    # unused channels are left at zero; they would not change any result
    co = spec.coefficients
    k = 0 if family == OBSERVED else 1
    if not _wiener_matters(co, k):
        return np.zeros((grid.n_steps, co.channels[k]))
    return wiener_increments(grid, family, co.channels[k], seed, replica)


def _observed_noise(spec, grid, seed):
    dW = _increments(spec, grid, OBSERVED, seed)
    times, marks, tags = jump_events(spec.measures[0], grid.T, OBSERVED, seed)
    return dW, times, marks, tags


def _latent_noise(spec, grid, seed, replica, with_events):
    dW = _increments(spec, grid, LATENT, seed, replica)
    if with_events:
        times, marks, _ = jump_events(spec.measures[1], grid.T, LATENT, seed, replica)
    else:
        times, marks = np.zeros(0), np.zeros(0)
    return dW, times, marks


def _latent_flags(model, spec):
    """(latent noise matters at all, latent events matter).

    Latent events change nothing when H2 and rho2 vanish; dropping them
    keeps the replicas identical so one of them represents all.
    """
    events = not (model.H[1].is_zero and model.rho[1].is_zero) and spec.measures[1].mass() > 0
    wiener = model.channels[1] > 0 and (
        (model.diffusion_on and not model.sigma[1].is_zero) or not model.upsilon[1].is_zero
    )
    return events or wiener, events


def _batch(setup: _Setup, replicas):
    rows = []
    dW2 = []
    t1, z1, f1 = setup.obs_events
    for r in replicas:
        dW, t2, z2 = _latent_noise(setup.spec, setup.grid, setup.latent_seed, int(r), setup.latent_events_active)
        dW2.append(dW)
        rows.append((np.concatenate([t1, t2]), np.concatenate([z1, z2]),
                     np.concatenate([f1, np.full(t2.size, LATENT, dtype=np.int8)])))
    return NoiseBatch.assemble(setup.grid, setup.obs_dW[None], np.stack(dW2), rows)


# ------------------------------------------------------- core inversion


def _invert_segment(sim, t0, t1, targets, phi_of_y, tol, want):
    """Newton-invert the flow on [t0, t1] at ``targets`` (R, Q, d1) for every row.

    ``want`` is "phi" (terminal Phi with ``phi_of_y`` as start) or "psi"
    (Psi and Gamma).  Returns (y, states, ok_rows, outside_count).
    """
    R, Q, d1 = targets.shape
    seeds = seed_mesh(targets.reshape(-1, d1))
    images = sim.run(seeds, t0, t1).X
    store = {}
    m = sim.model

    def extras(y):
        if want == "phi":
            return {"phi0": phi_of_y(y)}
        return {"psi": True, "gamma": True}

    def on_converge(mask, run):
        for name in ("phi", "psi", "gamma"):
            arr = getattr(run, name)
            if arr is None:
                continue
            if name not in store:
                store[name] = np.zeros(arr.shape)
            store[name][mask] = arr[mask]

    res = solve_inverse(lambda y: sim.run(y, t0, t1, jacobian=True, **extras(y)), targets, seeds, images, tol,
                        on_converge=on_converge)
    ok = np.all(res.converged, axis=1)
    if want == "phi" and "phi" not in store:
        store["phi"] = np.zeros((R, Q, m.d2))
    return res.y, store, ok, int(np.count_nonzero(res.outside_hull))


def _phi_of(phi_field, t=0.0):
    return lambda y: phi_field(t, y)


def _check_discards(discarded, total):
    if discarded > MAX_DISCARD_FRACTION * total:
        raise NumericalError(f"{discarded} of {total} inner replicas failed flow inversion (cap is 1%)")


def _run_blocks(job, count, threads):
    blocks = [(start, min(count, start + BLOCK)) for start in range(0, count, BLOCK)]
    if threads and threads > 1 and len(blocks) > 1:
        with ThreadPoolExecutor(max_workers=int(threads)) as pool:
            return list(pool.map(job, blocks))
    return [job(b) for b in blocks]


def _queries(query_grid, d1):
    Q = np.asarray(query_grid, dtype=float)
    if Q.ndim == 1:
        Q = Q[:, None] if d1 == 1 else Q[None, :]
    if Q.shape[-1] != d1:
        raise ConfigurationError(f"query points have dimension {Q.shape[-1]}, expected {d1}")
    return Q


def _prepare(spec, observed_seed, latent_seed, dt, n_steps, model=None, allow_v=False):
    model = Model.from_spec(spec) if model is None else model
    grid = _grid_for(spec, dt, n_steps)
    dW, times, marks, tags = _observed_noise(spec, grid, observed_seed)
    if not allow_v and np.any(tags == TAG_CODE["V"]):
        raise ConfigurationError("observed V-set events present; use interlace_large_jumps")
    active, events = _latent_flags(model, spec)
    latent_seed = observed_seed if latent_seed is None else latent_seed
    obs = (times, marks, np.full(times.size, OBSERVED, dtype=np.int8))
    return _Setup(model, spec, grid, int(observed_seed), int(latent_seed), dW, obs, active, events), tags


def estimate_solution(spec: ProblemSpec, t, query_grid, observed_seed=0, M_inner=1000, dt=None, n_steps=None,
                      latent_seed=None, threads=1, tol=1e-10, model=None) -> SolutionField:
    """Average of ``Phi_t(X_t^{-1}(x))`` over ``M_inner`` latent replicas at one observed realization."""
    if M_inner < 1:
        raise ConfigurationError("M_inner must be at least 1")
    if not 0 < t <= spec.T:
        raise ConfigurationError(f"t={t} must lie in (0, {spec.T}]")
    setup, _ = _prepare(spec, observed_seed, latent_seed, dt, n_steps, model)
    d1 = setup.model.d1
    Q = _queries(query_grid, d1)
    phi_of_y = _phi_of(spec.phi)
    # identical replicas: one computation represents all of them exactly
    count = M_inner if setup.latent_active else 1

    def job(block):
        lo, hi = block
        batch = _batch(setup, range(lo, hi))
        sim = Simulator(setup.model, batch)
        targets = np.broadcast_to(Q, (batch.rows,) + Q.shape)
        _, store, ok, outside = _invert_segment(sim, 0.0, t, targets, phi_of_y, tol, "phi")
        return _stats(store["phi"][ok]), int(np.count_nonzero(~ok)), outside

    results = _run_blocks(job, count, threads)
    discarded = sum(r[1] for r in results)
    _check_discards(discarded, count)
    n, mean, M2 = tree_reduce([r[0] for r in results])
    if not setup.latent_active:
        n, M2 = M_inner if n else 0, np.zeros_like(M2)
        discarded *= M_inner
    mean, stderr = _finish((n, mean, M2))
    return SolutionField(float(t), Q, mean, stderr, int(n), setup.observed_seed, setup.latent_seed,
                         [(0, spec.theta_prime)], discarded, setup.grid.n_steps, 0,
                         sum(r[2] for r in results))


# ---------------------------------------------------- observed-seed sweep


@dataclass
class SweepResult:
    points: np.ndarray
    samples: np.ndarray  # (count, Q, d2): one solution value per observed seed
    mean: np.ndarray
    stderr: np.ndarray
    seeds: np.ndarray


def sweep_observed_seeds(spec, t, query_grid, base_seed=0, count=100, dt=None, n_steps=None, threads=1, tol=1e-10,
                         M_inner=1) -> SweepResult:
    """Solutions at observed seeds ``base_seed + r``, ``r < count``, and their mean.

    With ``M_inner = 1`` the observed seeds are batched; row ``r`` is the
    value ``estimate_solution(seed=base_seed + r, M_inner=1)`` returns.
    """
    model = Model.from_spec(spec)
    grid = _grid_for(spec, dt, n_steps)
    d1 = model.d1
    Q = _queries(query_grid, d1)
    seeds = base_seed + np.arange(count)
    if M_inner > 1:
        samples = np.stack([estimate_solution(spec, t, Q, int(s), M_inner, dt, n_steps, threads=threads, tol=tol).estimate
                            for s in seeds])
        mean, stderr = _finish(_stats(samples))
        return SweepResult(Q, samples, mean, stderr, seeds)
    _, events = _latent_flags(model, spec)
    phi_of_y = _phi_of(spec.phi)

    def job(block):
        lo, hi = block
        dW1, dW2, rows = [], [], []
        for s in seeds[lo:hi]:
            dW, t1, z1, tags = _observed_noise(spec, grid, int(s))
            if np.any(tags == TAG_CODE["V"]):
                raise ConfigurationError("observed V-set events present; use interlace_large_jumps")
            w2, t2, z2 = _latent_noise(spec, grid, int(s), 0, events)
            dW1.append(dW)
            dW2.append(w2)
            rows.append((np.concatenate([t1, t2]), np.concatenate([z1, z2]),
                         np.concatenate([np.full(t1.size, OBSERVED, dtype=np.int8), np.full(t2.size, LATENT, dtype=np.int8)])))
        batch = NoiseBatch.assemble(grid, np.stack(dW1), np.stack(dW2), rows)
        sim = Simulator(model, batch)
        targets = np.broadcast_to(Q, (batch.rows,) + Q.shape)
        _, store, ok, _ = _invert_segment(sim, 0.0, t, targets, phi_of_y, tol, "phi")
        if not np.all(ok):
            raise NumericalError(f"flow inversion failed for {int(np.count_nonzero(~ok))} observed seeds")
        return store["phi"]

    samples = np.concatenate(_run_blocks(job, count, threads))
    mean, stderr = _finish(tree_reduce([_stats(samples[i : i + BLOCK]) for i in range(0, count, BLOCK)]))
    return SweepResult(Q, samples, mean, stderr, seeds)


# ------------------------------------------------------- large jumps


def segment_weights(theta, theta_prime, beta_prime, xis, eps=0.01):
    """Weight exponents ``lambda_n`` for the segments between large jumps.

    ``xis`` holds the growth exponent at each large jump; the rule used at
    the first jump is reapplied with the previous segment's exponent.
    """
    weights = [(0, max(theta, theta_prime) + eps)]
    prev = theta_prime
    for n, xi in enumerate(xis, start=1):
        base = max(theta, prev)
        lam = max(xi * (base + 1 + eps + beta_prime), theta, base + eps)
        weights.append((n, lam))
        prev = lam
    return weights


def _large_mask_for(co, k_index, grid_audit, T, delta):
    cache = {}
    declared = co.K[k_index]

    def is_large(z):
        z = float(z)
        if z not in cache:
            K = declared(z) if declared is not None else empirical_envelope(co.H[k_index], z, grid_audit, T)
            cache[z] = K > delta
        return cache[z]

    return is_large


def _masked_model(model: Model, large_z, large_w, remove=None):
    """Model on a segment: large D1 nodes dropped and their compensators moved into b, c, f.

    Without ``remove`` the segments must solve the same corrected equation as
    the plain estimator, whose correction integrals still run over the moved
    nodes; adding those back turns each compensator ``fld(x)`` into
    ``fld(pre-image of x)``.
    """
    m = model
    comp = 1.0 < m.alpha <= 2.0
    b, c, f = m.b, m.c, m.f
    if large_z.size:
        Hl, rl, hl = m.H[0], m.rho[0], m.h
        handle = m.handle(0)

        def at(t, X, zj):
            return X if remove is not None else invert_jump_map(handle, t, X, zj, m.tol)

        def moved(fld, t, X):
            return sum(w * fld(t, at(t, X, zj), zj) for zj, w in zip(large_z, large_w))

        def b_bar(t, X, z=None, _b=b):
            out = np.array(_b(t, X), dtype=float)
            if comp and not Hl.is_zero:
                out = out - moved(Hl, t, X)
            return out

        def c_bar(t, X, z=None, _c=c):
            return np.array(_c(t, X), dtype=float) - moved(rl, t, X)

        def f_bar(t, X, z=None, _f=f):
            return np.array(_f(t, X), dtype=float) - moved(hl, t, X)

        if comp and not Hl.is_zero:
            b = Field(b_bar, (m.d1,), "b_bar")
        if not rl.is_zero:
            c = Field(c_bar, (m.d2, m.d2), "c_bar")
        if not hl.is_zero:
            f = Field(f_bar, (m.d2,), "f_bar")
    z, w = m.dnodes[0]
    small = np.array([zj not in set(large_z.tolist()) for zj in z], dtype=bool) if z.size else np.zeros(0, bool)
    out = m.replace(b=b, c=c, f=f, dnodes=((z[small], w[small]), m.dnodes[1]))
    if remove is not None:
        out = _without_corrections(out)
    return out


def _without_corrections(m: Model) -> Model:
    """Shift b, c, f so that the hat-corrected equation becomes the original one."""
    db, dc, df = correction_parts(m)
    b, c, f = m.b, m.c, m.f
    return m.replace(
        b=Field(lambda t, X, z=None: np.array(b(t, X)) - db(t, X), (m.d1,), "b_orig"),
        c=Field(lambda t, X, z=None: np.array(c(t, X)) - dc(t, X), (m.d2, m.d2), "c_orig"),
        f=Field(lambda t, X, z=None: np.array(f(t, X)) - df(t, X), (m.d2,), "f_orig"),
    )


def interlace_large_jumps(spec: ProblemSpec, t, query_grid, observed_seed=0, M_inner=1000, delta=None, dt=None,
                          n_steps=None, latent_seed=None, threads=1, tol=1e-10, eps=0.01, event_cap=LARGE_EVENT_CAP,
                          remove_corrections=False, audit_grid=None) -> SolutionField:
    """Solution built by composing segment solutions across large observed jumps.

    Observed events in V, or with envelope ``K1(z) > delta``, are large.  On
    each segment the truncated problem is solved pathwise for one latent
    replica; at a large jump ``u <- (I + rho) u(x + H) + h`` is applied.
    """
    co = spec.coefficients
    delta = spec.eta[0] if delta is None else float(delta)
    if not 0 < t <= spec.T:
        raise ConfigurationError(f"t={t} must lie in (0, {spec.T}]")
    base = Model.from_spec(spec)
    grid_audit = audit_grid or AuditGrid(dim=co.d1, points=201 if co.d1 == 1 else 21)
    is_large = _large_mask_for(co, 0, grid_audit, spec.T, delta)

    # large D1 nodes move out of the compensators
    z1, w1 = base.dnodes[0]
    big = np.array([is_large(z) for z in z1], dtype=bool) if z1.size else np.zeros(0, bool)
    setup, tags = _prepare(spec, observed_seed, latent_seed, dt, n_steps, None, allow_v=True)
    times, marks, fams = setup.obs_events
    large_ev = np.array([tags[i] == TAG_CODE["V"] or is_large(marks[i]) for i in range(times.size)], dtype=bool)
    if np.count_nonzero(large_ev) > event_cap:
        raise ConfigurationError(
            f"{int(np.count_nonzero(large_ev))} large jumps on the horizon exceed the cap {event_cap}; "
            "large-jump activity must be finite"
        )
    if not large_ev.any() and not big.any() and not remove_corrections:
        return estimate_solution(spec, t, query_grid, observed_seed, M_inner, dt, n_steps, latent_seed, threads, tol)

    model = _masked_model(base, z1[big], w1[big], remove=True if remove_corrections else None)
    setup.model = model
    setup.latent_active, setup.latent_events_active = _latent_flags(model, spec)
    keep = ~large_ev
    setup.obs_events = (times[keep], marks[keep], fams[keep])
    use = large_ev & (times <= t)
    jt, jz = times[use], marks[use]
    order = np.argsort(jt, kind="stable")
    jt, jz = jt[order], jz[order]
    xis = [float(co.xi(z)) if co.xi is not None else 1.0 for z in jz]
    weights = segment_weights(co.theta, spec.theta_prime, spec.beta_prime, xis, eps)
    bounds = [0.0] + jt.tolist() + [float(t)]
    Q = _queries(query_grid, model.d1)
    d2 = model.d2
    H1, rho1, h1 = model.H[0], model.rho[0], model.h
    count = M_inner if setup.latent_active else 1
    phi_of_y = _phi_of(spec.phi)

    def job(block):
        lo, hi = block
        batch = _batch(setup, range(lo, hi))
        sim = Simulator(model, batch)
        R = batch.rows
        cur = np.array(np.broadcast_to(Q, (R,) + Q.shape))
        A = np.broadcast_to(np.eye(d2), (R, Q.shape[0], d2, d2)).copy()
        B = np.zeros((R, Q.shape[0], d2))
        ok = np.ones(R, dtype=bool)
        for n in range(len(bounds) - 2, -1, -1):
            s0, s1 = bounds[n], bounds[n + 1]
            if s1 > s0:
                y, store, ok_n, _ = _invert_segment(sim, s0, s1, cur, phi_of_y, tol, "psi")
                ok &= ok_n
                B = B + np.einsum("rqij,rqj->rqi", A, store["gamma"])
                A = A @ store["psi"]
            else:
                y = cur
            if n >= 1:
                s, z = bounds[n], jz[n - 1]
                if not h1.is_zero:
                    B = B + np.einsum("rqij,rqj->rqi", A, h1(s, y, z))
                if not rho1.is_zero:
                    A = A @ (np.eye(d2) + rho1(s, y, z))
                cur = y + H1(s, y, z)
            else:
                cur = y
        value = np.einsum("rqij,rqj->rqi", A, spec.phi(0.0, cur)) + B
        return _stats(value[ok]), int(np.count_nonzero(~ok))

    results = _run_blocks(job, count, threads)
    discarded = sum(r[1] for r in results)
    _check_discards(discarded, count)
    n, mean, M2 = tree_reduce([r[0] for r in results])
    if not setup.latent_active:
        n, M2 = M_inner if n else 0, np.zeros_like(M2)
    mean, stderr = _finish((n, mean, M2))
    return SolutionField(float(t), Q, mean, stderr, int(n), setup.observed_seed, setup.latent_seed, weights,
                         discarded, setup.grid.n_steps, int(jt.size))


# ------------------------------------------------------------ positivity


@dataclass
class PositivityReport:
    min_u: float
    max_u: float
    lower_ok: bool
    upper_ok: bool
    lower_hypotheses: bool
    upper_hypotheses: bool
    notes: list


def _sup(fld, X, T, z=None):
    return max(float(np.max(fld(t, X, z))) for t in (0.0, 0.5 * T, T))


def _inf(fld, X, T, z=None):
    return min(float(np.min(fld(t, X, z))) for t in (0.0, 0.5 * T, T))


def positivity_report(solution: SolutionField, spec: ProblemSpec, audit_grid=None) -> PositivityReport:
    """Lower bound 0 and upper bound 1 checks with a 3-stderr allowance."""
    co = spec.coefficients
    if co.d2 != 1:
        raise ConfigurationError("positivity statements are for scalar equations (d2 = 1)")
    grid = audit_grid or AuditGrid(dim=co.d1, points=201 if co.d1 == 1 else 21)
    X = grid.nodes()
    T = spec.T
    notes = []
    marks = []
    for k in (0, 1):
        for tag in ("D", "E", "V"):
            z, _ = spec.measures[k].quadrature_nodes(tag)
            marks.extend((k, float(zj)) for zj in z)
    rho_min = min([_inf(co.rho[k], X, T, z) for k, z in marks] + [0.0])
    rho_max = max([_sup(co.rho[k], X, T, z) for k, z in marks] + [0.0])
    free_zero = co.g.is_zero and co.h.is_zero
    lower = free_zero and rho_min >= -1 and _inf(co.f, X, T) >= 0 and _inf(spec.phi, X, T) >= 0
    upper = (free_zero and co.upsilon[0].is_zero and co.upsilon[1].is_zero and rho_min >= -1 and rho_max <= 0
             and _sup(co.f, X, T) <= 0 and _sup(co.c, X, T) <= 0 and _sup(spec.phi, X, T) <= 1)
    if not lower:
        notes.append("hypotheses for the lower bound do not hold; check is informational")
    if not upper:
        notes.append("hypotheses for the upper bound do not hold; check is informational")
    u = solution.estimate[:, 0]
    se = solution.stderr[:, 0]
    return PositivityReport(float(u.min()), float(u.max()), bool(np.all(u >= -3 * se)), bool(np.all(u <= 1 + 3 * se)),
                            bool(lower), bool(upper), notes)
