"""Linear Feynman-Kac transform along characteristics.

``Phi`` carries the zero-order terms (c, upsilon, rho) and the free terms
(f, g, h); ``Psi`` is its fundamental solution (free terms off, starts at
the identity) and ``Gamma`` the inhomogeneous part (starts at zero), so that
``Phi = Psi phi(x) + Gamma`` holds exactly for the linear scheme.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, NumericalError


def _mv(A, v):
    return np.einsum("...ij,...j->...i", A, v)


class TransformStepper:
    """Euler updates of the transform states, driven by the flow simulator.

    States are held in a dict: ``phi`` and ``gamma`` (R, P, d2), ``psi``
    (R, P, d2, d2), and ``logpsi`` (R, P) for the scalar exponential form.
    """

    def __init__(self, model):
        m = model
        self.model = m
        self.has_c = not m.c.is_zero
        self.has_f = not m.f.is_zero
        self.has_g = not m.g.is_zero and m.channels[0] > 0
        self.has_ups = [not m.upsilon[k].is_zero and m.channels[k] > 0 for k in (0, 1)]
        self.has_rho = [not m.rho[k].is_zero for k in (0, 1)]
        self.has_h = not m.h.is_zero

    def needs_preimages(self, k):
        return self.has_rho[k] or (k == 0 and self.has_h)

    def advance(self, t, X, pre, states, h, dw):
        m = self.model
        free = "phi" in states or "gamma" in states
        h4 = h[:, None, None, None]
        M = None  # multiplicative increment, (R, P, d2, d2)
        drift = None  # its dt part, kept for the log form
        if self.has_c:
            drift = m.c(t, X) * h4
        for k in (0, 1):
            if self.has_rho[k] and pre[k] is not None:
                z, w = m.dnodes[k]
                comp = sum(wj * m.rho[k](t, yj, zj) for zj, wj, yj in zip(z, w, pre[k])) * h4
                drift = -comp if drift is None else drift - comp
        M = drift
        noise = []
        for k in (0, 1):
            if self.has_ups[k]:
                ups = m.upsilon[k](t, X)
                noise.append((ups, dw[k]))
                term = np.einsum("...ijm,...m->...ij", ups, dw[k][:, None, :])
                M = term if M is None else M + term
        a = None
        if free:
            h3 = h[:, None, None]
            if self.has_f:
                a = m.f(t, X) * h3
            if self.has_h and pre[0] is not None:
                z, w = m.dnodes[0]
                comp = sum(wj * m.h(t, yj, zj) for zj, wj, yj in zip(z, w, pre[0])) * h3
                a = -comp if a is None else a - comp
            if self.has_g:
                term = np.einsum("...im,...m->...i", m.g(t, X), dw[0][:, None, :])
                a = term if a is None else a + term
        for name, S in states.items():
            if name == "psi":
                if M is not None:
                    S += M @ S
            elif name == "logpsi":
                inc = 0.0 if drift is None else drift[..., 0, 0]
                for ups, d in noise:
                    u = ups[..., 0, 0, :]
                    inc = inc - 0.5 * np.sum(u * u, axis=-1) * h[:, None] + np.einsum("...m,...m->...", u, d[:, None, :])
                S += inc
            else:
                upd = None if M is None else _mv(M, S)
                if a is not None and name in ("phi", "gamma"):
                    upd = a if upd is None else upd + a
                if upd is not None:
                    S += upd

    def jump(self, t, y, z, k, states, rows):
        m = self.model
        R = m.rho[k](t, y, z) if self.has_rho[k] else None
        hv = m.h(t, y, z) if (k == 0 and self.has_h) else None
        for name, S in states.items():
            Sr = S[rows]
            if name == "psi":
                if R is not None:
                    S[rows] = Sr + R @ Sr
            elif name == "logpsi":
                if R is not None:
                    one = 1.0 + R[..., 0, 0]
                    if np.any(one <= 0):
                        ts = np.ravel(t)[0]
                        raise NumericalError(f"rho{k + 1} <= -1 at event s={float(ts):.6g}, z={float(np.ravel(z)[0]):.6g}")
                    S[rows] = Sr + np.log(one)
            else:
                upd = Sr
                if R is not None:
                    upd = upd + _mv(R, Sr)
                if hv is not None:
                    upd = upd + hv
                S[rows] = upd


@dataclass
class TransformState:
    """(Phi, Psi, Gamma) at the nodes ``times`` along one characteristic."""

    times: np.ndarray
    X: np.ndarray  # (nodes, d1)
    phi: np.ndarray  # (nodes, d2)
    psi: np.ndarray  # (nodes, d2, d2)
    gamma: np.ndarray  # (nodes, d2)


def _start_point(spec_model, flow_or_x):
    from .flow import FlowResult

    if isinstance(flow_or_x, FlowResult):
        pts = flow_or_x.initial_points
        if pts.shape[0] != 1:
            raise ConfigurationError("simulate_transform follows one characteristic; pass a single-point flow")
        return pts
    return np.asarray(flow_or_x, dtype=float).reshape(1, spec_model.d1)


def simulate_transform(spec, noise, flow_or_x, phi=None) -> TransformState:
    """Simulate the characteristic from ``x`` jointly with Phi, Psi and Gamma.

    ``phi`` defaults to ``spec.phi``; it may be a field or a vector ``phi(x)``.
    """
    from .flow import Model, NoiseBatch, Simulator

    model = Model.from_spec(spec)
    x = _start_point(model, flow_or_x)
    if phi is None:
        phi0 = spec.phi(0.0, x)
    elif callable(phi):
        phi0 = np.asarray(phi(0.0, x), dtype=float).reshape(1, model.d2)
    else:
        phi0 = np.asarray(phi, dtype=float).reshape(1, model.d2)
    sim = Simulator(model, NoiseBatch.from_realization(noise))
    res = sim.run(x, 0.0, noise.grid.T, phi0=phi0, psi=True, gamma=True, record=True)
    rec = res.record
    out = TransformState(
        np.array(rec["t"]),
        np.stack([v[0, 0] for v in rec["X"]]),
        np.stack([v[0, 0] for v in rec["phi"]]),
        np.stack([v[0, 0] for v in rec["psi"]]),
        np.stack([v[0, 0] for v in rec["gamma"]]),
    )
    for name in ("phi", "psi", "gamma"):
        arr = getattr(out, name)
        bad = ~np.isfinite(arr.reshape(arr.shape[0], -1)).all(axis=1)
        if np.any(bad):
            raise NumericalError(f"non-finite {name} at node {int(np.argmax(bad))}")
    return out


def scalar_psi_closed_form(spec, noise, flow_or_x, x=None) -> np.ndarray:
    """The exponential form of the scalar fundamental solution along the path.

    Returns ``Psi_t`` at every grid node (shape (nodes,)).  Requires d2 = 1
    and vanishing free terms g and h.
    """
    from .flow import Model, NoiseBatch, Simulator

    model = Model.from_spec(spec)
    if model.d2 != 1:
        raise ConfigurationError("the closed form exists only for scalar unknowns (d2 = 1)")
    if not (model.g.is_zero and model.h.is_zero):
        raise ConfigurationError("the closed form requires g = 0 and h = 0")
    start = _start_point(model, flow_or_x if x is None else x)
    sim = Simulator(model, NoiseBatch.from_realization(noise))
    res = sim.run(start, 0.0, noise.grid.T, record=True, extra_states={"logpsi": np.zeros((1, 1))})
    return np.exp(np.array([v[0, 0] for v in res.record["logpsi"]]))


def decomposition_check(state: TransformState, phi_x) -> float:
    """Largest nodewise defect ``|Phi - (Psi phi(x) + Gamma)|``."""
    phi_x = np.asarray(phi_x, dtype=float).reshape(-1)
    recon = np.einsum("nij,j->ni", state.psi, phi_x) + state.gamma
    return float(np.max(np.abs(state.phi - recon)))
