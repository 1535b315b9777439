"""Driving randomness: Wiener increments and Poisson jump events.

Every stream is drawn from a Philox generator whose key is a hash of
``(seed, family, kind, replica)``, so any replica can be regenerated on its
own, in any order and on any thread, and the observed family (k=1) never
shares counter blocks with the latent family (k=2).
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import integrate

from .errors import ConfigurationError, NumericalError

OBSERVED = 1
LATENT = 2
TAGS = ("D", "E", "V")
TAG_CODE = {tag: i for i, tag in enumerate(TAGS)}

KIND_WIENER = 1
KIND_JUMPS = 2

DEFAULT_CHANNELS = 4


def stream_key(seed: int, family: int, kind: int, replica: int = 0) -> int:
    """128-bit Philox key for one independent stream."""
    msg = f"sidemc|{int(seed)}|{int(family)}|{int(kind)}|{int(replica)}".encode()
    return int.from_bytes(hashlib.blake2b(msg, digest_size=16).digest(), "little")


def stream(seed: int, family: int, kind: int, replica: int = 0) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=stream_key(seed, family, kind, replica)))


def _check_family(family):
    if family not in (OBSERVED, LATENT):
        raise ConfigurationError(f"noise family must be 1 (observed) or 2 (latent), got {family!r}")


# ------------------------------------------------------------------ grids


@dataclass(frozen=True)
class TimeGrid:
    """Strictly increasing, quasi-uniform time nodes from 0 to T."""

    nodes: np.ndarray

    def __post_init__(self):
        nodes = np.asarray(self.nodes, dtype=float)
        object.__setattr__(self, "nodes", nodes)
        if nodes.ndim != 1 or nodes.size < 2:
            raise ConfigurationError("time grid needs at least two nodes")
        steps = np.diff(nodes)
        if nodes[0] != 0.0:
            raise ConfigurationError("time grid must start at 0")
        if not np.all(steps > 0):
            raise ConfigurationError("time grid nodes must be strictly increasing")
        if steps.max() > 2.0 * steps.min() * (1 + 1e-12):
            raise ConfigurationError("time grid is not quasi-uniform (max step > 2 min step)")

    @classmethod
    def uniform(cls, T: float, n_steps: int) -> "TimeGrid":
        if n_steps < 1 or not T > 0:
            raise ConfigurationError(f"need T > 0 and n_steps >= 1, got T={T}, n_steps={n_steps}")
        nodes = np.linspace(0.0, T, int(n_steps) + 1)
        nodes[-1] = T
        return cls(nodes)

    @property
    def t0(self) -> float:
        return 0.0

    @property
    def T(self) -> float:
        return float(self.nodes[-1])

    @property
    def n_steps(self) -> int:
        return self.nodes.size - 1

    @property
    def steps(self) -> np.ndarray:
        return np.diff(self.nodes)


# ------------------------------------------------------------------ Wiener


@dataclass(frozen=True)
class WienerPath:
    family: int
    channels: int
    increments: np.ndarray  # (n_steps, channels)
    seed: int
    replica: int = 0


def wiener_increments(grid: TimeGrid, family: int, channels: int, seed: int, replica: int = 0) -> np.ndarray:
    if channels == 0:
        return np.zeros((grid.n_steps, 0))
    gen = stream(seed, family, KIND_WIENER, replica)
    return gen.standard_normal((grid.n_steps, channels)) * np.sqrt(grid.steps)[:, None]


def sample_wiener_path(grid: TimeGrid, family: int, channels: int, seed: int, replica: int = 0) -> WienerPath:
    """Gaussian increments for every (step, channel) of one noise family."""
    _check_family(family)
    if not isinstance(grid, TimeGrid):
        grid = TimeGrid(np.asarray(grid, dtype=float))
    if channels < 1:
        raise ConfigurationError("a Wiener path needs at least one channel")
    return WienerPath(family, channels, wiener_increments(grid, family, channels, seed, replica), int(seed), replica)


# ------------------------------------------------------------ jump measures

_GL4_X, _GL4_W = np.polynomial.legendre.leggauss(4)


def _panel_edges(lo: float, hi: float, panels: int) -> np.ndarray:
    # geometric panels resolve densities that blow up at a small cutoff
    if lo > 0 and hi / lo > 4:
        return np.geomspace(lo, hi, panels + 1)
    if hi < 0 and lo / hi > 4:
        return -np.geomspace(-hi, -lo, panels + 1)[::-1]
    return np.linspace(lo, hi, panels + 1)


def _composite_gauss(lo: float, hi: float, panels: int):
    edges = _panel_edges(lo, hi, panels)
    a, b = edges[:-1, None], edges[1:, None]
    nodes = 0.5 * (a + b) + 0.5 * (b - a) * _GL4_X
    weights = 0.5 * (b - a) * _GL4_W
    return nodes.ravel(), weights.ravel()


@dataclass(frozen=True)
class JumpMeasureSpec:
    """Intensity measure of one Poisson random measure on a scalar mark space.

    Either ``atoms`` (tuples ``(z, rate)`` or ``(z, rate, tag)``) or a
    ``density`` callable on ``interval``. ``partition`` is a tuple of
    ``(lo, hi, tag)`` rules, first match wins, unmatched marks are "D".
    ``cutoff`` removes marks with ``|z| < cutoff`` (density mode only).
    """

    atoms: tuple | None = None
    density: Callable | None = None
    interval: tuple = (0.0, 1.0)
    partition: tuple = ()
    cutoff: float = 0.0
    name: str = ""
    quad_nodes: int = 64
    quad_tol: float = 1e-6
    _cache: dict = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self):
        if self.atoms is not None and self.density is not None:
            raise ConfigurationError(f"measure {self.name!r}: give atoms or a density, not both")
        if self.atoms is not None:
            clean = []
            for atom in self.atoms:
                z, rate = float(atom[0]), float(atom[1])
                tag = atom[2] if len(atom) > 2 else self.classify(z)
                if tag not in TAG_CODE:
                    raise ConfigurationError(f"measure {self.name!r}: unknown set tag {tag!r}")
                if rate < 0 or not np.isfinite(rate):
                    raise ConfigurationError(f"measure {self.name!r}: atom rate must be finite and >= 0")
                clean.append((z, rate, tag))
            object.__setattr__(self, "atoms", tuple(clean))
        for rule in self.partition:
            if rule[2] not in TAG_CODE:
                raise ConfigurationError(f"measure {self.name!r}: unknown set tag {rule[2]!r}")

    @classmethod
    def empty(cls) -> "JumpMeasureSpec":
        return cls(atoms=())

    @property
    def is_atomic(self) -> bool:
        return self.density is None

    def classify(self, z):
        """Set tag ("D", "E" or "V") of a scalar mark."""
        for lo, hi, tag in self.partition:
            if lo <= z <= hi:
                return tag
        return "D"

    def tag_codes(self, marks: np.ndarray) -> np.ndarray:
        codes = np.full(np.shape(marks), TAG_CODE["D"], dtype=np.int8)
        assigned = np.zeros(np.shape(marks), dtype=bool)
        for lo, hi, tag in self.partition:
            hit = (marks >= lo) & (marks <= hi) & ~assigned
            codes[hit] = TAG_CODE[tag]
            assigned |= hit
        return codes

    # pieces of the restricted mark set, split by partition tag
    def _pieces(self):
        if "pieces" in self._cache:
            return self._cache["pieces"]
        lo, hi = map(float, self.interval)
        eps = float(self.cutoff)
        base = []
        if hi > lo:
            if eps <= 0:
                base = [(lo, hi)]
            else:
                if lo < -eps:
                    base.append((lo, min(hi, -eps)))
                if hi > eps:
                    base.append((max(lo, eps), hi))
        cuts = sorted({p for rule in self.partition for p in rule[:2]})
        pieces = []
        for a, b in base:
            points = [a] + [c for c in cuts if a < c < b] + [b]
            for u, v in zip(points[:-1], points[1:]):
                if v > u:
                    pieces.append((u, v, self.classify(0.5 * (u + v))))
        self._cache["pieces"] = pieces
        return pieces

    def _density_values(self, z):
        values = np.broadcast_to(np.asarray(self.density(z), dtype=float), np.shape(z))
        if not np.all(np.isfinite(values)) or np.any(values < 0):
            raise ConfigurationError(f"measure {self.name!r}: density must be finite and >= 0 on the mark set")
        return values

    def mass(self, tags=None) -> float:
        """Total intensity of marks above the cutoff (restricted to ``tags``)."""
        key = ("mass", tags)
        if key in self._cache:
            return self._cache[key]
        if self.is_atomic:
            value = sum(rate for _, rate, tag in self.atoms if tags is None or tag in tags)
        else:
            value = 0.0
            for a, b, tag in self._pieces():
                if tags is not None and tag not in tags:
                    continue
                piece, err = integrate.quad(lambda s: float(self._density_values(np.float64(s))), a, b, limit=200)
                if not np.isfinite(piece) or err > 1e-6 * max(1.0, abs(piece)) or piece > 1e12:
                    raise ConfigurationError(
                        f"measure {self.name!r}: density has infinite or unresolved mass on [{a}, {b}] "
                        f"with small-jump cutoff {self.cutoff}; raise the cutoff"
                    )
                value += piece
        self._cache[key] = value
        return value

    def quadrature_nodes(self, tag: str, panels: int | None = None):
        """Nodes ``z`` and weights ``w`` with ``sum w g(z) ~ integral of g over the tagged set``."""
        panels = (self.quad_nodes // 4) if panels is None else panels
        key = ("nodes", tag, panels)
        if key in self._cache:
            return self._cache[key]
        if self.is_atomic:
            chosen = [(z, rate) for z, rate, t in self.atoms if t == tag and rate > 0]
            z = np.array([c[0] for c in chosen], dtype=float)
            w = np.array([c[1] for c in chosen], dtype=float)
        else:
            zs, ws = [], []
            for a, b, t in self._pieces():
                if t != tag:
                    continue
                nodes, weights = _composite_gauss(a, b, panels)
                zs.append(nodes)
                ws.append(weights * self._density_values(nodes))
            z = np.concatenate(zs) if zs else np.zeros(0)
            w = np.concatenate(ws) if ws else np.zeros(0)
        self._cache[key] = (z, w)
        return z, w

    # inverse-CDF tables for mark sampling in density mode
    def _mark_table(self):
        if "table" in self._cache:
            return self._cache["table"]
        zs, cdf = [], []
        total = 0.0
        for a, b, _ in self._pieces():
            grid = _panel_edges(a, b, 4096)
            dens = self._density_values(grid)
            cum = np.concatenate([[0.0], np.cumsum(0.5 * (dens[1:] + dens[:-1]) * np.diff(grid))])
            zs.append(grid)
            cdf.append(total + cum)
            total += cum[-1]
        table = (np.concatenate(zs), np.concatenate(cdf) / total) if total > 0 else None
        self._cache["table"] = table
        return table

    def sample_marks(self, gen: np.random.Generator, count: int, return_tags=False):
        """Marks drawn from the normalised measure, optionally with their set codes.

        Atoms carry their own tag, so codes come from the drawn atom rather
        than from the partition.
        """
        if count == 0:
            marks, codes = np.zeros(0), np.zeros(0, dtype=np.int8)
        elif self.is_atomic:
            rates = np.array([a[1] for a in self.atoms])
            values = np.array([a[0] for a in self.atoms])
            atom_codes = np.array([TAG_CODE[a[2]] for a in self.atoms], dtype=np.int8)
            cum = np.cumsum(rates) / rates.sum()
            cum[-1] = 1.0
            idx = np.searchsorted(cum, gen.random(count), side="right")
            marks, codes = values[idx], atom_codes[idx]
        else:
            z, cdf = self._mark_table()
            marks = np.interp(gen.random(count), cdf, z)
            codes = self.tag_codes(marks)
        return (marks, codes) if return_tags else marks


def compensator_quadrature(integrand, spec: JumpMeasureSpec, set_tag: str, return_error: bool = False, tol=None):
    """Integral of ``integrand(z)`` against the measure over one tagged set.

    Atomic measures give the exact weighted sum. Density measures use the
    composite 64-node Gauss rule; its difference from the 32-node rule is
    the error estimate, and exceeding ``tol`` raises :class:`NumericalError`.
    """
    z, w = spec.quadrature_nodes(set_tag)
    value = _weighted_sum(integrand, z, w)
    if spec.is_atomic:
        return (value, 0.0) if return_error else value
    zc, wc = spec.quadrature_nodes(set_tag, panels=max(1, spec.quad_nodes // 8))
    coarse = _weighted_sum(integrand, zc, wc)
    err = float(np.max(np.abs(np.asarray(value) - np.asarray(coarse)))) if np.size(value) else 0.0
    tol = spec.quad_tol if tol is None else tol
    if err > tol * max(1.0, float(np.max(np.abs(value))) if np.size(value) else 1.0):
        raise NumericalError(f"quadrature over set {set_tag} of measure {spec.name!r} did not converge (error {err:.3g})")
    return (value, err) if return_error else value


def _weighted_sum(integrand, z, w):
    total = 0.0
    for zi, wi in zip(z, w):
        total = total + wi * np.asarray(integrand(zi), dtype=float)
    return total


# ------------------------------------------------------------ jump events


@dataclass(frozen=True)
class JumpEventList:
    family: int
    times: np.ndarray
    marks: np.ndarray
    tags: np.ndarray  # int8 codes into TAGS
    seed: int
    replica: int = 0

    def __len__(self):
        return self.times.size

    @property
    def tag_names(self):
        return [TAGS[c] for c in self.tags]


def jump_events(spec: JumpMeasureSpec, T: float, family: int, seed: int, replica: int = 0):
    mass = spec.mass()
    if mass == 0.0:
        return np.zeros(0), np.zeros(0), np.zeros(0, dtype=np.int8)
    gen = stream(seed, family, KIND_JUMPS, replica)
    count = int(gen.poisson(mass * T))
    # uniform order statistics on (0, T]
    times = np.sort(T - gen.random(count) * T)
    marks, tags = spec.sample_marks(gen, count, return_tags=True)
    if family == LATENT and np.any(tags == TAG_CODE["V"]):
        raise ConfigurationError("set V exists only for the observed family")
    return times, marks, tags


def sample_jump_events(spec: JumpMeasureSpec, grid: TimeGrid, family: int, seed: int, replica: int = 0) -> JumpEventList:
    """Poisson events (time, mark, set tag) on (0, T] for one noise family."""
    _check_family(family)
    if family == LATENT and _has_v(spec):
        raise ConfigurationError("set V exists only for the observed family")
    times, marks, tags = jump_events(spec, grid.T, family, seed, replica)
    return JumpEventList(family, times, marks, tags, int(seed), replica)


def _has_v(spec: JumpMeasureSpec) -> bool:
    if spec.is_atomic:
        return any(tag == "V" and rate > 0 for _, rate, tag in spec.atoms)
    return any(tag == "V" for _, _, tag in spec._pieces())


# ------------------------------------------------------------- realization


@dataclass(frozen=True)
class NoiseRealization:
    """One full driving environment: both Wiener families and both event lists."""

    grid: TimeGrid
    observed_wiener: WienerPath
    latent_wiener: WienerPath
    observed_jumps: JumpEventList
    latent_jumps: JumpEventList

    @property
    def ident(self) -> str:
        return f"obs{self.observed_wiener.seed}/lat{self.latent_wiener.seed}:{self.latent_wiener.replica}"


def sample_noise(grid: TimeGrid, measures, channels, observed_seed: int, latent_seed=None, replica: int = 0) -> NoiseRealization:
    """Sample an observed realization and latent replica ``replica``."""
    latent_seed = observed_seed if latent_seed is None else latent_seed
    m1, m2 = channels
    w1 = WienerPath(OBSERVED, m1, wiener_increments(grid, OBSERVED, m1, observed_seed), int(observed_seed))
    w2 = WienerPath(LATENT, m2, wiener_increments(grid, LATENT, m2, latent_seed, replica), int(latent_seed), replica)
    p1 = sample_jump_events(measures[0], grid, OBSERVED, observed_seed)
    p2 = sample_jump_events(measures[1], grid, LATENT, latent_seed, replica)
    return NoiseRealization(grid, w1, w2, p1, p2)
