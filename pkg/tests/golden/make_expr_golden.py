"""Regenerate ``tests/data/expr_golden.json``.

The reference values come from Python's own ``eval`` over the math module
(``^`` rewritten to ``**``); none of the package code is imported here.
"""
import json
import math
import random
from pathlib import Path

FUNCS1 = ["sin", "cos", "exp", "tanh", "abs", "sqrt"]
FUNCS2 = ["min", "max"]
VARS = ["t", "x1", "x2", "z"]

HAND = [
    "1+2*3",
    "2^3^2",
    "-2^2",
    "(-2)^2",
    "2^-1",
    "1-2-3",
    "8/4/2",
    "-x1",
    "--x1",
    "0.4*sin(x1)*z",
    "min(x1, x2)",
    "max(x1, x2, z)",
    "sqrt(abs(x1))",
    "exp(-t)*cos(x2)",
    "tanh(3*z-1)",
    "1e-3*x1+2.5E2",
    ".5*t",
    "x1^2+x2^2",
    "abs(-3)",
    "(1+t)^(-0.5)*exp(-x1^2/(2*(1+t)))",
]


def rand_expr(rng, depth):
    if depth <= 0 or rng.random() < 0.25:
        if rng.random() < 0.5:
            return rng.choice(VARS)
        return repr(round(rng.uniform(0.0, 3.0), rng.choice([0, 1, 2, 3])))
    kind = rng.random()
    if kind < 0.45:
        op = rng.choice(["+", "-", "*", "/"])
        left = rand_expr(rng, depth - 1)
        right = rand_expr(rng, depth - 1)
        if rng.random() < 0.5:
            return f"({left}){op}({right})"
        return f"{left}{op}{right}"
    if kind < 0.55:
        return f"-{rand_expr(rng, depth - 1)}"
    if kind < 0.65:
        base = rand_expr(rng, depth - 1)
        exponent = rng.choice(["2", "3", "0.5", "-1", "(1/3)"])
        return f"({base})^{exponent}"
    if kind < 0.9:
        fn = rng.choice(FUNCS1)
        return f"{fn}({rand_expr(rng, depth - 1)})"
    fn = rng.choice(FUNCS2)
    args = ", ".join(rand_expr(rng, depth - 1) for _ in range(rng.choice([2, 3])))
    return f"{fn}({args})"


def reference(text, env):
    code = text.replace("^", "**")
    namespace = {name: getattr(math, name) for name in ["sin", "cos", "exp", "tanh", "sqrt"]}
    namespace.update(abs=abs, min=min, max=max, __builtins__={})
    namespace.update(env)
    value = eval(code, namespace)  # noqa: S307 - trusted generator input
    if isinstance(value, complex):
        raise ValueError("complex")
    value = float(value)
    if not math.isfinite(value) or abs(value) > 1e12:
        raise ValueError("out of range")
    return value


def main():
    rng = random.Random(20240611)
    cases = []
    candidates = list(HAND)
    while len(candidates) < 5000:
        candidates.append(rand_expr(rng, rng.choice([2, 3, 4])))
    for text in candidates:
        env = {
            "t": round(rng.uniform(0.0, 2.0), 6),
            "x1": round(rng.uniform(-3.0, 3.0), 6),
            "x2": round(rng.uniform(-3.0, 3.0), 6),
            "z": round(rng.uniform(0.1, 1.5), 6),
        }
        try:
            value = reference(text, env)
        except (ZeroDivisionError, ValueError, OverflowError, TypeError):
            continue
        cases.append({"expr": text, "point": env, "value": value})
        if len(cases) == 200:
            break
    out = Path(__file__).resolve().parents[1] / "data" / "expr_golden.json"
    out.write_text(json.dumps(cases, indent=1) + "\n")
    print(f"wrote {len(cases)} cases to {out}")


if __name__ == "__main__":
    main()
