"""Characteristic flow: simulation, Jacobian, and numerical inversion.

The simulator works on a batch of noise rows (replicas) times starting
points.  Between events it takes explicit Euler steps on the base grid;
events are applied exactly at their sampled times, splitting the step.
Wiener increments of a split step are shared pro rata over the pieces, so
the observed path is the same in every latent replica and the pieces always
sum to the grid increment.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, NumericalError
from .jumpmaps import DEFAULT_TOL, JumpMapHandle, invert_jump_map
from .noise import LATENT, OBSERVED, TAG_CODE, NoiseRealization, TimeGrid
from .problem import Field, ProblemSpec

MAX_NEWTON = 50
SEED_POINTS = 129
SEED_SPREAD = 1.5


@dataclass(frozen=True)
class Model:
    """The coefficient set in the form the simulator consumes.

    ``dnodes[k]`` holds the D-set quadrature nodes and weights of family
    ``k+1`` used in every compensator drift.
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
    dnodes: tuple
    eta: tuple
    tol: float = DEFAULT_TOL
    stability_guard: float = 10.0

    @classmethod
    def from_spec(cls, spec: ProblemSpec, tol=DEFAULT_TOL):
        co = spec.coefficients
        dnodes = tuple(spec.measures[k].quadrature_nodes("D") for k in (0, 1))
        return cls(co.d1, co.d2, co.alpha, co.channels, co.b, co.sigma, co.upsilon, co.c, co.f, co.g, co.H,
                   co.rho, co.h, dnodes, tuple(spec.eta), tol)

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    @property
    def drift_on(self):
        return 1.0 <= self.alpha <= 2.0

    @property
    def diffusion_on(self):
        return self.alpha == 2.0

    @property
    def compensator_on(self):
        return 1.0 < self.alpha <= 2.0

    def handle(self, k):
        return JumpMapHandle(self.H[k], self.eta[k])


# ------------------------------------------------------------ noise batch


@dataclass
class NoiseBatch:
    """Noise for ``R`` rows on a common grid.

    ``dW1`` has shape (1 or R, n, m1); ``dW2`` (1 or R, n, m2).  Events of
    both families are merged per row and padded with ``inf`` times.
    """

    grid: TimeGrid
    dW1: np.ndarray
    dW2: np.ndarray
    ev_time: np.ndarray
    ev_mark: np.ndarray
    ev_family: np.ndarray
    rows: int

    @classmethod
    def assemble(cls, grid, dW1_rows, dW2_rows, event_rows):
        """``event_rows`` is a list (one per row) of (times, marks, families)."""
        rows = len(event_rows)
        width = max([len(e[0]) for e in event_rows] + [0])
        times = np.full((rows, width + 1), np.inf)
        marks = np.zeros((rows, width + 1))
        fams = np.zeros((rows, width + 1), dtype=np.int8)
        for r, (t, z, k) in enumerate(event_rows):
            if len(t):
                order = np.argsort(t, kind="stable")
                times[r, : len(t)] = np.asarray(t)[order]
                marks[r, : len(t)] = np.asarray(z)[order]
                fams[r, : len(t)] = np.asarray(k)[order]
        return cls(grid, np.asarray(dW1_rows, float), np.asarray(dW2_rows, float), times, marks, fams, rows)

    @classmethod
    def from_realization(cls, noise: NoiseRealization, keep_observed=None):
        ev = _realization_events(noise, keep_observed)
        return cls.assemble(noise.grid, noise.observed_wiener.increments[None], noise.latent_wiener.increments[None], [ev])


def _realization_events(noise, keep_observed=None):
    p1, p2 = noise.observed_jumps, noise.latent_jumps
    keep = np.ones(len(p1), dtype=bool) if keep_observed is None else np.asarray(keep_observed, dtype=bool)
    if np.any(p1.tags[keep] == TAG_CODE["V"]):
        raise ConfigurationError("observed V-set events require the large-jump interlacer")
    times = np.concatenate([p1.times[keep], p2.times])
    marks = np.concatenate([p1.marks[keep], p2.marks])
    fams = np.concatenate([np.full(int(keep.sum()), OBSERVED), np.full(len(p2), LATENT)])
    return times, marks, fams


# -------------------------------------------------------------- simulator


@dataclass
class RunResult:
    X: np.ndarray
    J: np.ndarray | None = None
    phi: np.ndarray | None = None
    psi: np.ndarray | None = None
    gamma: np.ndarray | None = None
    record: dict | None = None


def _mv(A, v):
    return np.einsum("...ij,...j->...i", A, v)


class Simulator:
    """Joint Euler scheme for X, its Jacobian and the transform states."""

    def __init__(self, model: Model, batch: NoiseBatch):
        from .transform import TransformStepper

        self.model = model
        self.batch = batch
        self.transform = TransformStepper(model)
        m = model
        self._drift_b = m.drift_on and not m.b.is_zero
        self._diff = [m.diffusion_on and not m.sigma[k].is_zero and m.channels[k] > 0 for k in (0, 1)]
        self._comp = [m.compensator_on and not m.H[k].is_zero and len(m.dnodes[k][0]) > 0 for k in (0, 1)]
        self._pre = [
            len(m.dnodes[k][0]) > 0 and (self._comp[k] or self.transform.needs_preimages(k)) for k in (0, 1)
        ]
        self._handles = [m.handle(0), m.handle(1)]

    # ---- one Euler piece of length h (per row) starting at time t
    def _advance(self, t, X, J, states, h, dw):
        m = self.model
        hh = h[:, None, None]
        pre = [None, None]
        for k in (0, 1):
            if self._pre[k]:
                z, _ = m.dnodes[k]
                if m.H[k].is_zero:
                    pre[k] = [X] * len(z)
                else:
                    pre[k] = [invert_jump_map(self._handles[k], t, X, zj, m.tol) for zj in z]
        dX = None
        if self._drift_b:
            dX = -m.b(t, X) * hh
        for k in (0, 1):
            if self._comp[k]:
                z, w = m.dnodes[k]
                acc = sum(wj * m.H[k](t, yj, zj) for zj, wj, yj in zip(z, w, pre[k]))
                dX = acc * hh if dX is None else dX + acc * hh
        for k in (0, 1):
            if self._diff[k]:
                if m.sigma[k].is_constant:
                    # same displacement for every point of a row
                    inc = (dw[k] @ m.sigma[k].constant.T)[:, None, :]
                else:
                    inc = np.einsum("...im,...m->...i", m.sigma[k](t, X), dw[k][:, None, :])
                dX = inc if dX is None else dX + inc
        if J is not None:
            J = self._jacobian_step(t, X, J, pre, hh, dw)
        if states:
            self.transform.advance(t, X, pre, states, h, dw)
        if dX is None:
            return X, J
        size = np.abs(dX[..., 0]) if m.d1 == 1 else np.sqrt(np.sum(dX * dX, axis=-1))
        # the bound is at least the guard itself, so the full test is rarely needed
        if not size.max() <= m.stability_guard:
            scale = np.abs(X[..., 0]) if m.d1 == 1 else np.sqrt(np.sum(X * X, axis=-1))
            ok = np.all(size <= m.stability_guard * (1.0 + scale))
        else:
            ok = True
        if not ok:
            raise NumericalError(f"flow step at t={t:.6g} exceeded the stability guard; use a smaller time step")
        return X + dX, J

    def _jacobian_step(self, t, X, J, pre, hh, dw):
        m = self.model
        A = None
        if self._drift_b and not m.b.is_constant:
            A = -m.b.gradient(t, X) * hh[..., None]
        for k in (0, 1):
            if self._comp[k] and not m.H[k].is_constant:
                z, w = m.dnodes[k]
                for zj, wj, yj in zip(z, w, pre[k]):
                    G = m.H[k].gradient(t, yj, zj)
                    term = wj * (G @ np.linalg.inv(np.eye(m.d1) + G)) * hh[..., None]
                    A = term if A is None else A + term
        for k in (0, 1):
            if self._diff[k] and not m.sigma[k].is_constant:
                term = np.einsum("...imj,...m->...ij", m.sigma[k].gradient(t, X), dw[k][:, None, :])
                A = term if A is None else A + term
        return J if A is None else J + A @ J

    # ---- jump of rows ``rows`` of family k at per-row times/marks
    def _jump(self, X, J, states, rows, k, times, marks):
        m = self.model
        z = marks[:, None]
        t = times[:, None]
        if np.all(times == times[0]):
            t = float(times[0])
        Xr = X[rows]
        if m.H[k].is_zero:
            y = Xr
        else:
            try:
                y = invert_jump_map(self._handles[k], t, Xr, z, m.tol)
            except NumericalError as exc:
                raise NumericalError(f"jump at s={float(np.min(times)):.6g}, z={float(marks[0]):.6g}: {exc}") from exc
            X[rows] = y
            if J is not None and not m.H[k].is_constant:
                G = m.H[k].gradient(t, y, z)
                J[rows] = np.linalg.solve(np.eye(m.d1) + G, J[rows])
        if states:
            self.transform.jump(t, y, z, k, states, rows)

    def run(self, points, t0, t1, jacobian=False, phi0=None, psi=False, gamma=False, record=False,
            extra_states=None) -> RunResult:
        """Simulate from ``t0`` to ``t1`` starting at ``points`` (R, P, d1) or (P, d1)."""
        m, nb = self.model, self.batch
        R = nb.rows
        X = np.array(np.broadcast_to(points, (R,) + np.shape(points)[-2:]), dtype=float)
        P = X.shape[1]
        J = np.broadcast_to(np.eye(m.d1), (R, P, m.d1, m.d1)).copy() if jacobian else None
        states = {}
        if phi0 is not None:
            states["phi"] = np.array(np.broadcast_to(phi0, (R, P, m.d2)), dtype=float)
        if psi:
            states["psi"] = np.broadcast_to(np.eye(m.d2), (R, P, m.d2, m.d2)).copy()
        if gamma:
            states["gamma"] = np.zeros((R, P, m.d2))
        for name, init in (extra_states or {}).items():
            init = np.asarray(init, dtype=float)
            states[name] = np.array(np.broadcast_to(init, (R, P) + init.shape[2:]))
        rec = None
        if record:
            rec = {"t": [t0], "X": [X.copy()], "J": [J.copy()] if jacobian else None,
                   **{name: [s.copy()] for name, s in states.items()}}
        nodes = nb.grid.nodes
        if t1 < t0 or t0 < 0 or t1 > nodes[-1] * (1 + 1e-12):
            raise ConfigurationError(f"simulation interval [{t0}, {t1}] outside the noise horizon")
        ar = np.arange(R)
        ptr = np.array([np.searchsorted(nb.ev_time[r], t0, side="right") for r in range(R)])
        first = max(int(np.searchsorted(nodes, t0, side="right")) - 1, 0)
        for i in range(first, nodes.size - 1):
            a, b = nodes[i], nodes[i + 1]
            lo, hi = max(a, t0), min(b, t1)
            if hi <= lo and not (i == first and t1 == t0):
                if a >= t1:
                    break
                continue
            span = b - a
            cur = np.full(R, lo)
            while True:
                nt = nb.ev_time[ar, ptr]
                has = nt <= hi
                if not np.any(has):
                    break
                target = np.where(has, nt, cur)
                X, J = self._piece(a, X, J, states, target - cur, i, span)
                cur = target
                rows = np.nonzero(has)[0]
                fam = nb.ev_family[rows, ptr[rows]]
                for k in (0, 1):
                    sel = rows[fam == k + 1]
                    if sel.size:
                        self._jump(X, J, states, sel, k, nb.ev_time[sel, ptr[sel]], nb.ev_mark[sel, ptr[sel]])
                ptr[rows] += 1
            X, J = self._piece(a, X, J, states, hi - cur, i, span)
            if record:
                rec["t"].append(hi)
                rec["X"].append(X.copy())
                if jacobian:
                    rec["J"].append(J.copy())
                for name, s in states.items():
                    rec[name].append(s.copy())
            if hi >= t1:
                break
        if not np.all(np.isfinite(X)) or any(not np.all(np.isfinite(s)) for s in states.values()):
            raise NumericalError("non-finite flow or transform state; use a smaller time step")
        return RunResult(X, J, states.get("phi"), states.get("psi"), states.get("gamma"), rec)

    def _piece(self, t, X, J, states, h, step, span):
        moving = h > 0
        if not np.any(moving):
            return X, J
        nb = self.batch
        frac = h / span
        dw = []
        for dW in (nb.dW1, nb.dW2):
            inc = dW[:, step, :]
            dw.append(inc * frac[:, None] if inc.shape[0] == h.size else inc[0][None, :] * frac[:, None])
        if np.all(moving) or moving.mean() > 0.5:
            return self._advance(t, X, J, states, h, dw)
        idx = np.nonzero(moving)[0]
        sub_states = {name: s[idx] for name, s in states.items()}
        Xs, Js = self._advance(t, X[idx], None if J is None else J[idx], sub_states, h[idx], [d[idx] for d in dw])
        X = X.copy()
        X[idx] = Xs
        if J is not None:
            J = J.copy()
            J[idx] = Js
        for name, s in states.items():
            s[idx] = sub_states[name]
        return X, J


# ------------------------------------------------------- public flow API


@dataclass
class FlowResult:
    initial_points: np.ndarray
    times: np.ndarray
    trajectory: np.ndarray  # (nodes, P, d1)
    jacobian: np.ndarray | None
    noise_ref: str
    model: Model = field(repr=False)
    noise: NoiseRealization = field(repr=False)


def _model_for(spec_or_model, tol=DEFAULT_TOL):
    return spec_or_model if isinstance(spec_or_model, Model) else Model.from_spec(spec_or_model, tol)


def _points(points, d1):
    P = np.asarray(points, dtype=float)
    if P.ndim == 1:
        P = P[:, None] if d1 == 1 else P[None, :]
    return P


def simulate_flow(spec, noise: NoiseRealization, points, with_jacobian=False, t_end=None) -> FlowResult:
    """Simulate ``X_t(x)`` (and optionally its Jacobian) at every grid node."""
    model = _model_for(spec)
    P = _points(points, model.d1)
    sim = Simulator(model, NoiseBatch.from_realization(noise))
    t_end = noise.grid.T if t_end is None else t_end
    res = sim.run(P, 0.0, t_end, jacobian=with_jacobian, record=True)
    rec = res.record
    traj = np.stack([x[0] for x in rec["X"]])
    jac = np.stack([j[0] for j in rec["J"]]) if with_jacobian else None
    return FlowResult(P, np.array(rec["t"]), traj, jac, noise.ident, model, noise)


def simulate_jacobian(spec, noise: NoiseRealization, points) -> np.ndarray:
    """Jacobian trajectories ``grad X`` at every grid node, shape (nodes, P, d1, d1)."""
    return simulate_flow(spec, noise, points, with_jacobian=True).jacobian


def seed_mesh(queries, n=SEED_POINTS, spread=SEED_SPREAD):
    """Tensor mesh spanning ``spread`` times the hull of ``queries`` (about ``n`` points)."""
    Q = np.asarray(queries, dtype=float).reshape(-1, np.shape(queries)[-1])
    d = Q.shape[-1]
    per_axis = n if d == 1 else max(3, int(np.ceil(n ** (1.0 / d))))
    lo, hi = Q.min(axis=0), Q.max(axis=0)
    mid, half = 0.5 * (lo + hi), 0.5 * (hi - lo)
    half = np.where(half > 0, half, 1.0) * spread
    axes = [np.linspace(mid[i] - half[i], mid[i] + half[i], per_axis) for i in range(d)]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([g.ravel() for g in mesh], axis=-1)


def nearest_seed(seed_points, seed_images, targets):
    """For each target pick the seed whose image is closest.

    ``seed_images`` (R, S, d1), ``targets`` (R, Q, d1) -> (R, Q, d1).
    """
    R, Q = targets.shape[:2]
    out = np.empty(targets.shape)
    if targets.shape[-1] == 1:
        # sorted search per row; picks the same seed as the brute-force argmin up to ties
        for r in range(R):
            img = seed_images[r, :, 0]
            order = np.argsort(img, kind="stable")
            srt = img[order]
            pos = np.clip(np.searchsorted(srt, targets[r, :, 0]), 1, srt.size - 1)
            left, right = srt[pos - 1], srt[pos]
            pick = np.where(np.abs(targets[r, :, 0] - left) <= np.abs(right - targets[r, :, 0]), pos - 1, pos)
            out[r] = seed_points[order[pick]]
        return out
    chunk = max(1, 2_000_000 // max(1, Q * seed_images.shape[1]))
    for r0 in range(0, R, chunk):
        img = seed_images[r0 : r0 + chunk]
        tg = targets[r0 : r0 + chunk]
        dist = np.sum((img[:, None, :, :] - tg[:, :, None, :]) ** 2, axis=-1)
        out[r0 : r0 + chunk] = seed_points[np.argmin(dist, axis=-1)]
    return out


def _outside_hull(seed_images, targets):
    lo = seed_images.min(axis=1, keepdims=True)
    hi = seed_images.max(axis=1, keepdims=True)
    return np.any((targets < lo) | (targets > hi), axis=-1)


@dataclass
class NewtonResult:
    y: np.ndarray
    residual: np.ndarray
    converged: np.ndarray
    iterations: int
    outside_hull: np.ndarray
    run: RunResult | None = None


def solve_inverse(forward, targets, seed_points, seed_images, tol, max_iter=MAX_NEWTON, on_converge=None):
    """Newton iteration for ``forward(y) = targets`` from the nearest seed.

    ``forward(y)`` returns a :class:`RunResult` with ``X`` and ``J``.
    ``on_converge(mask, run)`` is called with the newly converged entries so
    the caller can keep quantities simulated at the accepted iterate.
    """
    y = nearest_seed(seed_points, seed_images, targets)
    outside = _outside_hull(seed_images, targets)
    converged = np.zeros(targets.shape[:2], dtype=bool)
    best = np.full(targets.shape[:2], np.inf)
    it = 0
    for it in range(1, max_iter + 1):
        run = forward(y)
        r = run.X - targets
        err = np.sqrt(np.sum(r * r, axis=-1))
        best = np.where(converged, best, err)
        newly = (err <= tol) & ~converged
        if on_converge is not None and np.any(newly):
            on_converge(newly, run)
        converged |= newly
        if np.all(converged):
            break
        try:
            step = np.linalg.solve(run.J, r[..., None])[..., 0]
        except np.linalg.LinAlgError:
            # singular Jacobian somewhere: least-squares step for every entry
            step = np.einsum("...ij,...j->...i", np.linalg.pinv(run.J), r)
        y = np.where(converged[..., None], y, y - step)
    return NewtonResult(y, best, converged, it, outside)


@dataclass
class FlowInverse:
    y: np.ndarray
    residual: np.ndarray
    iterations: int
    outside_hull: np.ndarray


def invert_flow(flow: FlowResult, t, query_x, tol=1e-10) -> FlowInverse:
    """``X_t^{-1}(query_x)`` by Newton re-simulation under the flow's own noise."""
    Q = _points(query_x, flow.model.d1)
    k = int(np.argmin(np.abs(flow.times - t)))
    if abs(flow.times[k] - t) > 1e-12:
        raise ConfigurationError(f"time {t} is not a stored node of the flow")
    sim = Simulator(flow.model, NoiseBatch.from_realization(flow.noise))
    res = solve_inverse(
        lambda y: sim.run(y, 0.0, t, jacobian=True),
        Q[None],
        flow.initial_points,
        flow.trajectory[k][None],
        tol,
    )
    if not np.all(res.converged):
        raise NumericalError(f"flow inversion diverged after {MAX_NEWTON} iterations; best residual {res.residual.max():.3g}")
    return FlowInverse(res.y[0], res.residual[0], res.iterations, res.outside_hull[0])
