"""Command line front end: ``sidemc solve|validate|converge|audit|replay``.

Every command writes ``manifest.jsonl`` into the output directory, also when
it fails.  Exit codes: 0 ok, 1 audit or oracle failure, 2 configuration
error, 3 numerical or evaluation error.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from .config import ConfigError, RunParams, parse_config
from .errors import ConfigurationError, EvaluationError, NumericalError
from .problem import grid_holder_norm, verify_assumptions

EXIT_OK, EXIT_FAILED, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3
COMMANDS = ("solve", "validate", "converge", "audit")
MANIFEST = "manifest.jsonl"


def _write_text(path: Path, text: str):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


# ------------------------------------------------------------------ CSV


def solution_csv(sol) -> str:
    d1 = sol.points.shape[1]
    d2 = sol.estimate.shape[1]
    head = [f"x{i + 1}" for i in range(d1)] + [f"u{i + 1}" for i in range(d2)] + [f"stderr{i + 1}" for i in range(d2)]
    lines = [",".join(head + ["segment_index"])]
    for q in range(sol.points.shape[0]):
        vals = list(sol.points[q]) + list(sol.estimate[q]) + list(sol.stderr[q])
        lines.append(",".join(repr(float(v)) for v in vals) + f",{int(sol.segment_index)}")
    return "\n".join(lines) + "\n"


def read_solution_csv(path):
    """Parse a solution CSV back into ``(points, estimate, stderr, segment_index)``."""
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().strip().split(",")
        rows = [line.strip().split(",") for line in fh if line.strip()]
    d1 = sum(h.startswith("x") for h in header)
    d2 = sum(h.startswith("u") for h in header)
    data = np.array([[float(v) for v in r[:-1]] for r in rows]).reshape(len(rows), d1 + 2 * d2)
    seg = np.array([int(r[-1]) for r in rows])
    return data[:, :d1], data[:, d1:d1 + d2], data[:, d1 + d2:], seg


# ------------------------------------------------------------- manifest


class Manifest:
    def __init__(self, out: Path):
        self.path = out / MANIFEST
        self.records = []

    def add(self, record: dict):
        self.records.append(record)

    def write(self):
        _write_text(self.path, "".join(json.dumps(r, sort_keys=True, allow_nan=True) + "\n" for r in self.records))


def read_manifest(path) -> list:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


# ------------------------------------------------------------ overrides


def resolve_overrides(args, environ=None) -> dict:
    """Flags win over environment variables, which win over the config file."""
    env = os.environ if environ is None else environ
    out = {}
    for key, var in (("seed", "SIDEMC_SEED"), ("threads", "SIDEMC_THREADS")):
        raw = env.get(var)
        if raw not in (None, ""):
            try:
                out[key] = int(raw)
            except ValueError:
                raise ConfigurationError(f"{var}={raw!r} is not an integer") from None
    for key in ("seed", "inner", "steps", "threads"):
        val = getattr(args, key, None)
        if val is not None:
            out[key] = int(val)
    return out


def apply_overrides(run: RunParams, overrides: dict):
    for key, val in overrides.items():
        setattr(run, key, val)
    if run.threads < 1 or run.inner < 1 or (run.steps is not None and run.steps < 1):
        raise ConfigurationError("threads, inner and steps must be positive")


# ------------------------------------------------------------- commands


def _norm_report(sol, run):
    if sol.points.shape[1] != 1 or sol.points.shape[0] < 3:
        return {"available": False, "reason": "norm report needs a 1-D grid with at least 3 points"}
    order = np.argsort(sol.points[:, 0], kind="stable")
    rep = grid_holder_norm(sol.estimate[order], sol.points[order, 0], run.norm_theta, run.norm_beta)
    return {"available": True, "theta": rep.theta, "beta": rep.beta, "norm": rep.value, "sup_part": rep.sup_part,
            "seminorm": rep.seminorm_part, "grid": rep.grid}


def run_solve(doc, out: Path, manifest: Manifest):
    from .solver import estimate_solution, interlace_large_jumps

    run = doc.run
    common = dict(observed_seed=run.seed, M_inner=run.inner, n_steps=run.steps, latent_seed=run.latent_seed,
                  threads=run.threads, tol=run.tol)
    if run.method == "interlace":
        sol = interlace_large_jumps(doc.spec, run.t, run.points, delta=run.delta, event_cap=run.event_cap,
                                    remove_corrections=run.remove_corrections, **common)
    else:
        sol = estimate_solution(doc.spec, run.t, run.points, **common)
    _write_text(out / "solution.csv", solution_csv(sol))
    manifest.add({"record": "solution", "file": "solution.csv", "points": int(sol.points.shape[0]),
                  "inner_samples": sol.inner_samples, "observed_seed": sol.observed_noise_seed,
                  "latent_seed": sol.latent_seed, "n_steps": sol.n_steps, "discarded": sol.discarded,
                  "outside_hull": sol.outside_hull,
                  "segment_weights": [[int(i), float(w)] for i, w in sol.segment_weights],
                  "norm_report": _norm_report(sol, run)})
    return EXIT_OK


def run_validate(doc, out: Path, manifest: Manifest):
    from .validation import compound_poisson_oracle, heat_oracle, run_oracle, transport_oracle

    v = doc.validate
    oracles = [transport_oracle(n_steps=v.get("transport_steps") or 1000),
               heat_oracle(v.get("heat_samples") or 200_000, n_steps=v.get("heat_steps") or 20),
               compound_poisson_oracle(v.get("poisson_samples") or 100_000)]
    lines = ["name,sup_error,stderr,bound,passed,runtime,samples"]
    ok = True
    for oracle in oracles:
        rep = run_oracle(oracle, seed=doc.run.seed, threads=doc.run.threads)
        ok &= rep.passed
        lines.append(f"{rep.name},{rep.sup_error!r},{rep.stderr!r},{rep.bound!r},"
                     f"{'pass' if rep.passed else 'fail'},{rep.runtime!r},{rep.samples}")
        manifest.add({"record": "oracle", "name": rep.name, "sup_error": rep.sup_error, "stderr": rep.stderr,
                      "bound": rep.bound, "passed": bool(rep.passed), "samples": rep.samples})
    _write_text(out / "validation.csv", "\n".join(lines) + "\n")
    return EXIT_OK if ok else EXIT_FAILED


def run_converge(doc, out: Path, manifest: Manifest):
    from . import validation as V

    builders = {"sin-drift": V.sin_drift_oracle, "transport": V.transport_oracle, "heat": V.heat_oracle,
                "poisson": V.compound_poisson_oracle}
    name = doc.converge["oracle"]
    if name not in builders:
        raise ConfigurationError(f"unknown oracle {name!r}; choose from {sorted(builders)}")
    table = V.convergence_study(builders[name](), doc.converge["dts"], doc.converge["samples"], seed=doc.run.seed)
    _write_text(out / "convergence.csv", table.to_csv())
    manifest.add({"record": "convergence", "oracle": name, "dt_order": table.dt_order,
                  "sample_slope": table.sample_slope, "rows": table.rows})
    return EXIT_OK


def run_audit(doc, out: Path, manifest: Manifest):
    rep = verify_assumptions(doc.spec)
    lines = ["clause,quantity,value,bound,status,note"]
    for c in rep.clauses:
        note = c.note.replace(",", ";")
        lines.append(f"{c.clause},{c.quantity},{c.value!r},{c.bound!r},{'pass' if c.passed else 'fail'},{note}")
    _write_text(out / "audit.csv", "\n".join(lines) + "\n")
    manifest.add({"record": "audit", "passed": rep.passed, "failures": [c.quantity for c in rep.failures()]})
    return EXIT_OK if rep.passed else EXIT_FAILED


RUNNERS = {"solve": run_solve, "validate": run_validate, "converge": run_converge, "audit": run_audit}


def run_command(command, config_text, out, overrides=None, config_path=None) -> int:
    """Run one command on configuration text; returns the exit status."""
    from . import __version__

    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = Manifest(out)
    overrides = dict(overrides or {})
    manifest.add({"record": "run", "command": command, "version": __version__, "config_path": config_path,
                  "config_text": config_text, "overrides": overrides})
    started = time.perf_counter()
    status, code, message = "ok", EXIT_OK, ""
    try:
        if command not in RUNNERS:
            raise ConfigurationError(f"unknown command {command!r}")
        doc = parse_config(config_text)
        apply_overrides(doc.run, overrides)
        manifest.add({"record": "params", **doc.run.describe()})
        code = RUNNERS[command](doc, out, manifest)
        status = "ok" if code == EXIT_OK else "failed"
    except ConfigError as exc:
        status, code, message = "config_error", EXIT_CONFIG, str(exc)
        manifest.add({"record": "issues", "issues": [
            {"line": i.line, "column": i.col, "message": i.message} for i in exc.issues]})
    except ConfigurationError as exc:
        status, code, message = "config_error", EXIT_CONFIG, str(exc)
    except (NumericalError, EvaluationError, FloatingPointError) as exc:
        status, code, message = "numerical_error", EXIT_NUMERIC, str(exc)
    finally:
        manifest.add({"record": "status", "status": status, "exit_code": code, "message": message,
                      "elapsed": time.perf_counter() - started})
        manifest.write()
    return code


def replay(manifest_path, out) -> int:
    """Rerun a manifest's command with its recorded configuration and overrides."""
    records = read_manifest(manifest_path)
    head = next((r for r in records if r.get("record") == "run"), None)
    if head is None:
        raise ConfigurationError(f"{manifest_path}: no run record")
    return run_command(head["command"], head["config_text"], out, head["overrides"], head.get("config_path"))


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sidemc", description="Monte Carlo solver for linear parabolic SIDEs")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", required=True)
        s.add_argument("--out", required=True)
        s.add_argument("--seed", type=int)
        s.add_argument("--inner", type=int)
        s.add_argument("--steps", type=int)
        s.add_argument("--threads", type=int)
    r = sub.add_parser("replay", help="rerun a manifest bit-identically")
    r.add_argument("--manifest", required=True)
    r.add_argument("--out", required=True)
    return p


def _early_failure(out, command, config_path, message) -> int:
    Path(out).mkdir(parents=True, exist_ok=True)
    m = Manifest(Path(out))
    m.add({"record": "run", "command": command, "config_path": config_path})
    m.add({"record": "status", "status": "config_error", "exit_code": EXIT_CONFIG, "message": message})
    m.write()
    print(f"sidemc: config_error: {message}", file=sys.stderr)
    return EXIT_CONFIG


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "replay":
        try:
            code = replay(args.manifest, args.out)
        except (OSError, ValueError, KeyError, ConfigurationError) as exc:
            return _early_failure(args.out, "replay", args.manifest, str(exc))
    else:
        try:
            text = Path(args.config).read_text(encoding="utf-8")
            overrides = resolve_overrides(args)
        except (OSError, UnicodeDecodeError, ConfigurationError) as exc:
            return _early_failure(args.out, args.command, args.config, str(exc))
        code = run_command(args.command, text, args.out, overrides, args.config)
    if code != EXIT_OK:
        status = read_manifest(Path(args.out) / MANIFEST)[-1]
        print(f"sidemc: {status['status']}: {status['message']}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
