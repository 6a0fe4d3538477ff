"""Random expression/environment generator over the full DSL grammar.

Divisions draw their denominators from forms bounded away from zero so that
central finite differences stay meaningful; magnitudes are rejection-capped.
"""

import numpy as np

from drcontrol.exprdsl import (
    BinOp,
    ControlVar,
    Env,
    Func,
    Neg,
    NoiseVar,
    Num,
    Pi,
    Pow,
    StateVar,
    eval_with_partials,
)

MAG_CAP = 1e4


def _leaf(rng, dims):
    n, m, d, stage = dims
    choices = ["num", "pi"]
    if n:
        choices += ["x"] * 3
    if m:
        choices += ["u"] * 3
    if d and stage:
        choices += ["w"] * 2
    kind = rng.choice(choices)
    if kind == "num":
        return Num(round(float(rng.uniform(-3, 3)), 3))
    if kind == "pi":
        return Pi()
    if kind == "x":
        return StateVar(int(rng.integers(1, n + 1)))
    if kind == "u":
        return ControlVar(int(rng.integers(1, m + 1)))
    return NoiseVar(int(rng.integers(1, stage + 1)), int(rng.integers(1, d + 1)))


def _node(rng, dims, depth):
    if depth <= 0:
        return _leaf(rng, dims)
    kind = rng.choice(
        ["add", "sub", "mul", "div", "neg", "pow", "sin", "cos", "exp", "leaf"],
        p=[0.16, 0.14, 0.18, 0.08, 0.08, 0.10, 0.09, 0.09, 0.04, 0.04],
    )
    if kind == "leaf":
        return _leaf(rng, dims)
    if kind in ("add", "sub", "mul"):
        op = {"add": "+", "sub": "-", "mul": "*"}[kind]
        return BinOp(op, _node(rng, dims, depth - 1), _node(rng, dims, depth - 1))
    if kind == "div":
        # denominator bounded away from zero: nonzero literal or 2 + cos(.)
        if rng.random() < 0.5:
            den = Num(round(float(rng.uniform(0.5, 3.0)) * (1 if rng.random() < 0.5 else -1), 3))
        else:
            den = BinOp("+", Num(2.0), Func("cos", _node(rng, dims, depth - 1)))
        return BinOp("/", _node(rng, dims, depth - 1), den)
    if kind == "neg":
        return Neg(_node(rng, dims, depth - 1))
    if kind == "pow":
        return Pow(_node(rng, dims, depth - 1), int(rng.integers(0, 5)))
    return Func(kind, _node(rng, dims, depth - 1))


def random_env(rng, dims):
    n, m, d, stage = dims
    return Env(
        x=rng.uniform(-2, 2, size=n),
        u=rng.uniform(-2, 2, size=m),
        w={k: rng.uniform(-2, 2, size=d) for k in range(1, stage + 1)},
    )


def random_case(rng, dims=(2, 2, 2, 2), depth=4, wrt=None):
    """One (expr, env) pair with bounded value and partials; rejects pathologies."""
    if wrt is None:
        n, m, _, _ = dims
        wrt = [f"x{i}" for i in range(1, n + 1)] + [f"u{j}" for j in range(1, m + 1)]
    while True:
        expr = _node(rng, dims, depth)
        env = random_env(rng, dims)
        try:
            v, p = eval_with_partials(expr, env, wrt)
        except Exception:
            continue
        if abs(v) > MAG_CAP or np.max(np.abs(p)) > MAG_CAP:
            continue
        return expr, env, wrt


def central_difference(expr, env, wrt, h=1e-6):
    """Independent first-derivative oracle for the DSL."""
    from drcontrol.exprdsl import evaluate, _wrt_key

    out = []
    for name in wrt:
        key = _wrt_key(name)
        out.append(
            (evaluate(expr, _shift(env, key, h)) - evaluate(expr, _shift(env, key, -h)))
            / (2 * h)
        )
    return np.array(out)


def _shift(env, key, h):
    x, u, w = np.array(env.x), np.array(env.u), {k: np.array(v) for k, v in env.w.items()}
    if key[0] == "x":
        x[key[1] - 1] += h
    elif key[0] == "u":
        u[key[1] - 1] += h
    else:
        w[key[1]][key[2] - 1] += h
    return Env(x=x, u=u, w=w)
