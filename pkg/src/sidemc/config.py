"""Configuration documents: a small line-oriented format with positions.

Grammar::

    document   := (blank | comment | section | assignment)*
    section    := "[" NAME "]"
    assignment := KEY "=" value          # a value may span lines inside brackets
    value      := NUMBER | STRING | "true" | "false" | list
    list       := "[" (value ("," value)* ","?)? "]"
    comment    := "#" to end of line

Strings use double quotes with ``\\"`` and ``\\\\`` escapes.  Every value
keeps its 1-based line and column so later checks can point at it.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError
from .expr import Expression, ExpressionSyntaxError
from .noise import JumpMeasureSpec
from .problem import COEFFICIENT_NAMES, MARK_FIELDS, CoefficientSet, Field, ProblemSpec


@dataclass
class Located:
    value: object
    line: int
    col: int


@dataclass
class ConfigIssue:
    line: int
    col: int
    message: str

    def __str__(self):
        return f"line {self.line}, column {self.col}: {self.message}"


class ConfigError(ConfigurationError):
    def __init__(self, issues):
        self.issues = sorted(issues, key=lambda i: (i.line, i.col))
        super().__init__("; ".join(str(i) for i in self.issues))


# ---------------------------------------------------------------- reader

_NUMBER = re.compile(r"[+-]?(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?")
_NAME = re.compile(r"[A-Za-z_][A-Za-z0-9_]*")


class _Reader:
    def __init__(self, text):
        self.text = text
        self.pos = 0
        self.line = 1
        self.col = 1

    def error(self, message):
        raise ConfigError([ConfigIssue(self.line, self.col, message)])

    def peek(self):
        return self.text[self.pos] if self.pos < len(self.text) else ""

    def advance(self, n=1):
        for _ in range(n):
            if self.text[self.pos] == "\n":
                self.line += 1
                self.col = 1
            else:
                self.col += 1
            self.pos += 1

    def skip_inline(self):
        while self.peek() in (" ", "\t", "\r"):
            self.advance()

    def skip_space(self, newlines):
        # whitespace and comments; newlines only inside brackets
        while True:
            ch = self.peek()
            if ch in (" ", "\t", "\r") or (newlines and ch == "\n"):
                self.advance()
            elif ch == "#":
                while self.peek() not in ("", "\n"):
                    self.advance()
            else:
                return

    def value(self, nested=False):
        self.skip_space(nested)
        line, col = self.line, self.col
        ch = self.peek()
        if ch == "[":
            self.advance()
            items = []
            while True:
                self.skip_space(True)
                if self.peek() == "]":
                    self.advance()
                    return Located(items, line, col)
                items.append(self.value(True))
                self.skip_space(True)
                if self.peek() == ",":
                    self.advance()
                elif self.peek() == "]":
                    continue
                else:
                    self.error("expected ',' or ']' in list")
        if ch == '"':
            self.advance()
            out = []
            while True:
                c = self.peek()
                if c in ("", "\n"):
                    self.error("unterminated string")
                if c == "\\":
                    self.advance()
                    nxt = self.peek()
                    if nxt not in ('"', "\\"):
                        self.error(f"unknown escape \\{nxt}")
                    out.append(nxt)
                    self.advance()
                    continue
                self.advance()
                if c == '"':
                    return Located("".join(out), line, col)
                out.append(c)
        m = _NUMBER.match(self.text, self.pos)
        if m:
            text = m.group(0)
            self.advance(len(text))
            num = float(text)
            if re.fullmatch(r"[+-]?\d+", text):
                num = int(text)
            return Located(num, line, col)
        m = _NAME.match(self.text, self.pos)
        if m and m.group(0) in ("true", "false"):
            self.advance(len(m.group(0)))
            return Located(m.group(0) == "true", line, col)
        self.error("expected a number, a quoted string, true/false or a list")


def _read(text):
    r = _Reader(text)
    sections = {}
    current = None
    while r.peek() != "":
        r.skip_space(False)
        ch = r.peek()
        if ch == "":
            break
        if ch == "\n":
            r.advance()
            continue
        line, col = r.line, r.col
        if ch == "[":
            r.advance()
            r.skip_inline()
            m = _NAME.match(r.text, r.pos)
            if not m:
                r.error("expected a section name")
            name = m.group(0)
            r.advance(len(name))
            r.skip_inline()
            if r.peek() != "]":
                r.error("expected ']' after section name")
            r.advance()
            if name in sections:
                raise ConfigError([ConfigIssue(line, col, f"section [{name}] appears twice")])
            sections[name] = (Located(None, line, col), {})
            current = name
        else:
            m = _NAME.match(r.text, r.pos)
            if not m:
                r.error(f"unexpected character {ch!r}")
            key = m.group(0)
            if current is None:
                raise ConfigError([ConfigIssue(line, col, f"key {key!r} outside any section")])
            r.advance(len(key))
            r.skip_inline()
            if r.peek() != "=":
                r.error(f"expected '=' after {key!r}")
            r.advance()
            val = r.value()
            entries = sections[current][1]
            if key in entries:
                raise ConfigError([ConfigIssue(line, col, f"key {key!r} set twice in [{current}]")])
            entries[key] = Located(val, line, col)
        r.skip_space(False)
        if r.peek() not in ("", "\n"):
            r.error("unexpected text after value")
    return sections


# -------------------------------------------------------------- schema

SCHEMA = {
    "problem": {"d1", "d2", "alpha", "T", "theta", "theta_prime", "beta_prime", "beta_bar", "beta_tilde", "channels",
                "eta", "N0", "name"},
    "coefficients": set(COEFFICIENT_NAMES) | {"phi"},
    "envelopes": {"K1", "K2", "Kbar1", "Kbar2", "l1", "l2", "xi", "zeta"},
    "measure1": {"atoms", "density", "interval", "partition", "cutoff", "quad_nodes", "quad_tol"},
    "measure2": {"atoms", "density", "interval", "partition", "cutoff", "quad_nodes", "quad_tol"},
    "run": {"t", "seed", "latent_seed", "inner", "steps", "threads", "grid", "points", "method", "delta", "tol",
            "remove_corrections", "norm_theta", "norm_beta", "event_cap"},
    "validate": {"heat_samples", "poisson_samples", "heat_steps", "transport_steps"},
    "converge": {"oracle", "dts", "samples"},
}


@dataclass
class RunParams:
    t: float | None = None
    seed: int = 0
    latent_seed: int | None = None
    inner: int = 1000
    steps: int | None = None
    threads: int = 1
    points: np.ndarray | None = None
    method: str = "plain"
    delta: float | None = None
    tol: float = 1e-10
    remove_corrections: bool = False
    norm_theta: float = 0.01
    norm_beta: float = 1.2
    event_cap: int = 10_000

    def describe(self) -> dict:
        out = {k: getattr(self, k) for k in self.__dataclass_fields__ if k != "points"}
        out["points"] = None if self.points is None else self.points.tolist()
        return out


@dataclass
class ConfigDocument:
    text: str
    sections: dict
    spec: ProblemSpec
    run: RunParams
    validate: dict = field(default_factory=dict)
    converge: dict = field(default_factory=dict)

    def get(self, section, key, default=None):
        entry = self.sections.get(section, (None, {}))[1].get(key)
        return default if entry is None else _plain(entry.value)


def _plain(loc):
    v = loc.value if isinstance(loc, Located) else loc
    if isinstance(v, list):
        return [_plain(x) for x in v]
    return v


# ------------------------------------------------------------- builders


class _Builder:
    def __init__(self, sections):
        self.sections = sections
        self.issues = []

    def issue(self, loc, message):
        self.issues.append(ConfigIssue(loc.line, loc.col, message))

    def entry(self, section, key):
        return self.sections.get(section, (None, {}))[1].get(key)

    def number(self, section, key, default, kind=float, positive=False):
        e = self.entry(section, key)
        if e is None:
            return default
        v = e.value.value
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            self.issue(e.value, f"{key} must be a number")
            return default
        if kind is int and (not float(v).is_integer()):
            self.issue(e.value, f"{key} must be an integer")
            return default
        if positive and not v > 0:
            self.issue(e.value, f"{key} must be positive")
            return default
        return kind(v)

    def numbers(self, section, key, default, length=None):
        e = self.entry(section, key)
        if e is None:
            return default
        v = _plain(e.value)
        if not isinstance(v, list) or not all(isinstance(x, (int, float)) and not isinstance(x, bool) for x in v):
            self.issue(e.value, f"{key} must be a list of numbers")
            return default
        if length is not None and len(v) != length:
            self.issue(e.value, f"{key} needs {length} entries, got {len(v)}")
            return default
        return [float(x) for x in v]

    def string(self, section, key, default):
        e = self.entry(section, key)
        if e is None:
            return default
        if not isinstance(e.value.value, str):
            self.issue(e.value, f"{key} must be a quoted string")
            return default
        return e.value.value

    def boolean(self, section, key, default):
        e = self.entry(section, key)
        if e is None:
            return default
        if not isinstance(e.value.value, bool):
            self.issue(e.value, f"{key} must be true or false")
            return default
        return e.value.value

    def expression(self, loc, d1, allow_z, name):
        v = loc.value
        if isinstance(v, bool) or not isinstance(v, (str, int, float)):
            self.issue(loc, f"{name}: expected an expression string or a number")
            return None
        source = repr(float(v)) if not isinstance(v, str) else v
        try:
            ex = Expression(source)
        except ExpressionSyntaxError as exc:
            # column of the offending character inside the quoted string
            self.issues.append(ConfigIssue(loc.line, loc.col + 1 + exc.position, f"{name}: {exc.message}"))
            return None
        if ex.max_x_index > d1:
            self.issue(loc, f"{name}: x{ex.max_x_index} exceeds the dimension d1={d1}")
            return None
        if "z" in ex.names and not allow_z:
            self.issue(loc, f"{name}: the mark z is only available in jump coefficients")
            return None
        return ex

    def field(self, key, shape, d1):
        e = self.entry("coefficients", key)
        if e is None:
            return None
        allow_z = key in MARK_FIELDS

        def walk(loc, dims):
            if not dims:
                if isinstance(loc.value, list):
                    self.issue(loc, f"{key}: too many nesting levels for shape {shape}")
                    return None
                return self.expression(loc, d1, allow_z, key)
            if not isinstance(loc.value, list):
                if int(np.prod(dims)) == 1 and loc is e.value:
                    return np.array(self.expression(loc, d1, allow_z, key), dtype=object).reshape(dims).tolist()
                self.issue(loc, f"{key}: expected a list of {dims[0]} entries for shape {shape}")
                return None
            if len(loc.value) != dims[0]:
                self.issue(loc, f"{key}: expected {dims[0]} entries for shape {shape}, got {len(loc.value)}")
                return None
            return [walk(item, dims[1:]) for item in loc.value]

        tree = walk(e.value, list(shape))
        flat = np.array(tree, dtype=object).ravel().tolist() if tree is not None else [None]
        if tree is None or any(x is None for x in flat):
            return None
        return Field.from_expressions(tree, shape, name=key)

    def mark_function(self, key):
        e = self.entry("envelopes", key)
        if e is None:
            return None
        ex = self.expression(e.value, 0, True, key)
        if ex is None:
            return None
        if ex.names - {"z"}:
            self.issue(e.value, f"{key} may depend on z only")
            return None
        return lambda z, _ex=ex: float(_ex.evaluate({"z": z}))

    def measure(self, name):
        if name not in self.sections:
            return JumpMeasureSpec.empty()
        atoms_e = self.entry(name, "atoms")
        dens_e = self.entry(name, "density")
        partition = []
        part_e = self.entry(name, "partition")
        if part_e is not None:
            for rule in _as_list(part_e.value):
                v = _plain(rule)
                if not (isinstance(v, list) and len(v) == 3 and isinstance(v[2], str)
                        and all(isinstance(x, (int, float)) for x in v[:2])):
                    self.issue(rule, "partition rules are [lo, hi, \"D\"|\"E\"|\"V\"]")
                    continue
                if v[2] not in ("D", "E", "V"):
                    self.issue(rule, f"unknown set tag {v[2]!r}")
                    continue
                partition.append((float(v[0]), float(v[1]), v[2]))
        common = dict(partition=tuple(partition), name=name,
                      cutoff=self.number(name, "cutoff", 0.0),
                      quad_nodes=self.number(name, "quad_nodes", 64, int, positive=True),
                      quad_tol=self.number(name, "quad_tol", 1e-6, positive=True))
        if atoms_e is not None and dens_e is not None:
            self.issue(dens_e, "give atoms or density, not both")
            return JumpMeasureSpec.empty()
        if atoms_e is not None:
            atoms = []
            for a in _as_list(atoms_e.value):
                v = _plain(a)
                ok = isinstance(v, list) and len(v) in (2, 3) and all(isinstance(x, (int, float)) for x in v[:2])
                if ok and len(v) == 3 and v[2] not in ("D", "E", "V"):
                    ok = False
                if not ok:
                    self.issue(a, "atoms are [z, rate] or [z, rate, \"D\"|\"E\"|\"V\"]")
                    continue
                if v[1] < 0:
                    self.issue(a, "atom rate must be >= 0")
                    continue
                atoms.append(tuple(v))
            return JumpMeasureSpec(atoms=tuple(atoms), **common)
        if dens_e is not None:
            ex = self.expression(dens_e.value, 0, True, "density")
            if ex is None:
                return JumpMeasureSpec.empty()
            interval = self.numbers(name, "interval", [0.0, 1.0], 2)
            return JumpMeasureSpec(density=lambda z, _ex=ex: _ex(0.0, None, np.asarray(z, dtype=float)),
                                   interval=tuple(interval), **common)
        return JumpMeasureSpec.empty()


def _as_list(loc):
    if not isinstance(loc.value, list):
        return [loc]
    return loc.value


def _grid_points(b: _Builder, d1):
    e_pts = b.entry("run", "points")
    e_grid = b.entry("run", "grid")
    if e_pts is not None:
        v = np.asarray(_plain(e_pts.value), dtype=float)
        if d1 == 1 and v.ndim == 1:
            return v[:, None]
        if v.ndim != 2 or v.shape[1] != d1:
            b.issue(e_pts.value, f"points must be a list of {d1}-vectors")
            return None
        return v
    if e_grid is None:
        return None
    v = _plain(e_grid.value)
    axes = v if (isinstance(v, list) and v and isinstance(v[0], list)) else [v] * d1
    if len(axes) != d1 or not all(isinstance(a, list) and len(a) == 3 for a in axes):
        b.issue(e_grid.value, "grid is [lower, upper, count] or one such triple per axis")
        return None
    lines = [np.linspace(float(a[0]), float(a[1]), int(a[2])) for a in axes]
    mesh = np.meshgrid(*lines, indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=-1)


def parse_config(text: str) -> ConfigDocument:
    """Parse and validate a configuration; raises :class:`ConfigError` listing every problem found."""
    sections = _read(text)
    b = _Builder(sections)
    for name, (head, entries) in sections.items():
        if name not in SCHEMA:
            b.issue(head, f"unknown section [{name}]")
            continue
        for key, e in entries.items():
            if key not in SCHEMA[name]:
                b.issue(e, f"unknown key {key!r} in [{name}]")
    d1 = b.number("problem", "d1", 1, int, positive=True)
    d2 = b.number("problem", "d2", 1, int, positive=True)
    alpha = b.number("problem", "alpha", 1.0)
    T = b.number("problem", "T", 1.0, positive=True)
    channels = b.numbers("problem", "channels", [1, 1], 2)
    eta = b.numbers("problem", "eta", [0.5, 0.5], 2)
    m1, m2 = int(channels[0]), int(channels[1])
    shapes = {"b": (d1,), "sigma1": (d1, m1), "sigma2": (d1, m2), "upsilon1": (d2, d2, m1), "upsilon2": (d2, d2, m2),
              "c": (d2, d2), "f": (d2,), "g": (d2, m1), "H1": (d1,), "H2": (d1,), "rho1": (d2, d2),
              "rho2": (d2, d2), "h": (d2,), "phi": (d2,)}
    fields = {}
    for key, shape in shapes.items():
        f = b.field(key, shape, d1)
        if f is not None:
            fields[key] = f
    phi = fields.pop("phi", None)
    envelopes = {k: b.mark_function(k) for k in SCHEMA["envelopes"]}
    measures = (b.measure("measure1"), b.measure("measure2"))
    run = RunParams(
        t=b.number("run", "t", None),
        seed=b.number("run", "seed", 0, int),
        latent_seed=b.number("run", "latent_seed", None, int),
        inner=b.number("run", "inner", 1000, int, positive=True),
        steps=b.number("run", "steps", None, int, positive=True),
        threads=b.number("run", "threads", 1, int, positive=True),
        points=_grid_points(b, d1),
        method=b.string("run", "method", "plain"),
        delta=b.number("run", "delta", None),
        tol=b.number("run", "tol", 1e-10, positive=True),
        remove_corrections=b.boolean("run", "remove_corrections", False),
        norm_theta=b.number("run", "norm_theta", 0.01),
        norm_beta=b.number("run", "norm_beta", 1.2, positive=True),
        event_cap=b.number("run", "event_cap", 10_000, int, positive=True),
    )
    if run.method not in ("plain", "interlace"):
        b.issue(b.entry("run", "method").value, "method must be \"plain\" or \"interlace\"")
    elif run.remove_corrections and run.method != "interlace":
        b.issue(b.entry("run", "remove_corrections").value, "remove_corrections needs method = \"interlace\"")
    if b.issues:
        raise ConfigError(b.issues)
    try:
        co = CoefficientSet.build(d1=d1, d2=d2, alpha=alpha, channels=(m1, m2),
                                  theta=b.number("problem", "theta", 0.0), envelopes=envelopes, **fields)
        spec = ProblemSpec(co, measures, T, phi=phi if phi is not None else np.zeros(d2),
                           theta_prime=b.number("problem", "theta_prime", 0.0),
                           beta_prime=b.number("problem", "beta_prime", None),
                           eta=tuple(eta), beta_bar=b.number("problem", "beta_bar", None),
                           beta_tilde=b.number("problem", "beta_tilde", None),
                           N0=b.number("problem", "N0", 1e3, positive=True),
                           name=b.string("problem", "name", ""))
    except ConfigError:
        raise
    except ConfigurationError as exc:
        head = sections.get("problem", (Located(None, 1, 1), {}))[0]
        raise ConfigError([ConfigIssue(head.line, head.col, str(exc))]) from None
    if run.t is None:
        run.t = spec.T
    if run.points is None:
        run.points = np.linspace(-3, 3, 101)[:, None] if d1 == 1 else np.zeros((1, d1))
    validate = {k: b.number("validate", k, None, int) for k in SCHEMA["validate"]}
    converge = {
        "oracle": b.string("converge", "oracle", "sin-drift"),
        "dts": b.numbers("converge", "dts", [0.04, 0.02, 0.01, 0.005]),
        "samples": [int(x) for x in b.numbers("converge", "samples", [1, 2, 4])],
    }
    if b.issues:
        raise ConfigError(b.issues)
    return ConfigDocument(text, sections, spec, run, validate, converge)


