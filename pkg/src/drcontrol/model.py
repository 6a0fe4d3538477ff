"""Problem definition, state simulation, cost evaluation, and first variations."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import exprdsl
from .ambiguity import (
    NodeField,
    ScenarioTree,
    SublinearResult,
    build_tree,
    sublinear_backward,
)
from .errors import ValidationError
from .exprdsl import Env, Expr, eval_with_partials, evaluate, free_variables

ADMISSIBILITY_TOL = 1e-12


@dataclass(frozen=True, eq=False)
class ControlSet:
    """Convex control constraint: a box with possibly infinite bounds."""

    lo: np.ndarray  # (m,), entries may be -inf
    hi: np.ndarray  # (m,), entries may be +inf

    @staticmethod
    def unconstrained(m):
        return ControlSet(np.full(m, -np.inf), np.full(m, np.inf))

    @staticmethod
    def box(lo, hi):
        lo = np.asarray(lo, dtype=float)
        hi = np.asarray(hi, dtype=float)
        if lo.shape != hi.shape or np.any(lo > hi):
            raise ValidationError([f"control box must satisfy lo <= hi, got {lo}, {hi}"])
        return ControlSet(lo, hi)

    @property
    def kind(self):
        if np.all(np.isneginf(self.lo)) and np.all(np.isposinf(self.hi)):
            return "unconstrained"
        return "box"

    def project(self, u):
        return np.clip(u, self.lo, self.hi)

    def contains(self, u, tol=ADMISSIBILITY_TOL):
        return bool(np.all(u >= self.lo - tol) and np.all(u <= self.hi + tol))

    def start_point(self):
        """Canonical interior start for iterative solvers."""
        lo = np.where(np.isfinite(self.lo), self.lo, np.nan)
        hi = np.where(np.isfinite(self.hi), self.hi, np.nan)
        center = np.where(
            np.isnan(lo) & np.isnan(hi),
            0.0,
            np.where(
                np.isnan(hi),
                lo + 1.0,
                np.where(np.isnan(lo), hi - 1.0, 0.5 * (lo + hi)),
            ),
        )
        return center


@dataclass(frozen=True, eq=False)
class Stage:
    """One transition: drift/diffusion expressions, running cost, constraints."""

    drift: tuple            # n expressions
    diffusion: tuple        # d tuples of n expressions
    running_cost: Expr
    controls: ControlSet
    noise: "StageAmbiguity"
    state_box: tuple        # (lo (n,), hi (n,))


@dataclass(frozen=True, eq=False)
class Problem:
    horizon: int
    state_dim: int
    control_dim: int
    noise_dim: int
    x0: np.ndarray
    stages: tuple
    terminal: Expr

    def tree(self, budget=None):
        noises = [s.noise for s in self.stages]
        if budget is None:
            return build_tree(noises)
        return build_tree(noises, budget=budget)


@dataclass(frozen=True, eq=False)
class Policy:
    """Per-node controls; controls[k] has shape (count_k, m)."""

    controls: tuple

    def stage(self, k):
        return self.controls[k]


@dataclass(frozen=True, eq=False)
class Trajectory:
    """Per-node states; states[k] has shape (count_k, n), states[0] = [x0]."""

    states: tuple

    def stage(self, k):
        return self.states[k]


def policy_from_arrays(arrays):
    return Policy(tuple(np.asarray(a, dtype=float) for a in arrays))


def zero_policy(problem, tree):
    return Policy(
        tuple(
            np.zeros((tree.node_counts[k], problem.control_dim))
            for k in range(problem.horizon)
        )
    )


def rollout(problem, tree, controller):
    """Build a policy by applying a feedback rule stage by stage.

    ``controller(k, x, tree)`` gets the stage-k node states (count_k, n) and
    returns the controls (count_k, m). Returns (Policy, Trajectory).
    """
    states = [np.broadcast_to(np.asarray(problem.x0, dtype=float),
                              (1, problem.state_dim)).copy()]
    controls = []
    for k in range(problem.horizon):
        u = np.asarray(controller(k, states[k], tree), dtype=float)
        u = u.reshape(tree.node_counts[k], problem.control_dim)
        controls.append(u)
        states.append(_step_states(problem, tree, k, states[k], u))
    return Policy(tuple(controls)), Trajectory(tuple(states))


def _expr_dims_ok(expr, n, m, d, stage, where, issues):
    for key in free_variables(expr):
        if key[0] == "x" and not 1 <= key[1] <= n:
            issues.append(f"{where}: x{key[1]} out of range")
        elif key[0] == "u" and not 1 <= key[1] <= m:
            issues.append(f"{where}: u{key[1]} out of range")
        elif key[0] == "w":
            if not 1 <= key[2] <= d:
                issues.append(f"{where}: w{key[1]}_{key[2]} component out of range")
            if key[1] > stage:
                issues.append(f"{where}: w{key[1]}_{key[2]} references future noise")


def validate_problem(problem):
    """Check every structural invariant; raises ValidationError with all issues."""
    issues = []
    n, m, d = problem.state_dim, problem.control_dim, problem.noise_dim
    if problem.horizon < 1:
        issues.append("horizon must be >= 1")
    if len(problem.stages) != problem.horizon:
        issues.append(
            f"expected {problem.horizon} stages, got {len(problem.stages)}"
        )
    x0 = np.asarray(problem.x0, dtype=float)
    if x0.shape != (n,):
        issues.append(f"x0 has shape {x0.shape}, expected ({n},)")
    elif not np.all(np.isfinite(x0)):
        issues.append("x0 must be finite")
    for k, stage in enumerate(problem.stages):
        where = f"stage {k}"
        if len(stage.drift) != n:
            issues.append(f"{where}: drift must have {n} components")
        if len(stage.diffusion) != d:
            issues.append(f"{where}: diffusion must have {d} channels")
        for sig in stage.diffusion:
            if len(sig) != n:
                issues.append(f"{where}: each diffusion channel needs {n} components")
        for e in stage.drift:
            _expr_dims_ok(e, n, m, d, k, f"{where} drift", issues)
        for sig in stage.diffusion:
            for e in sig:
                _expr_dims_ok(e, n, m, d, k, f"{where} diffusion", issues)
        _expr_dims_ok(stage.running_cost, n, m, d, k, f"{where} running cost", issues)
        if stage.noise.dim != d:
            issues.append(
                f"{where}: noise support lives in R^{stage.noise.dim}, expected R^{d}"
            )
        lo, hi = stage.state_box
        lo = np.asarray(lo, dtype=float)
        hi = np.asarray(hi, dtype=float)
        if lo.shape != (n,) or hi.shape != (n,):
            issues.append(f"{where}: state box must have shape ({n},)")
        elif not np.all(lo < hi):
            issues.append(f"{where}: state box needs lo < hi componentwise")
        if np.any(stage.controls.lo > stage.controls.hi):
            issues.append(f"{where}: control box needs lo <= hi")
    _expr_dims_ok(problem.terminal, n, 0, d, 0, "terminal cost", issues)
    if issues:
        raise ValidationError(issues)


def check_admissible(problem, tree, policy, tol=ADMISSIBILITY_TOL):
    if len(policy.controls) != problem.horizon:
        raise ValidationError(["policy must cover stages 0..N-1"])
    issues = []
    for k in range(problem.horizon):
        u = policy.controls[k]
        if u.shape[-2:] != (tree.node_counts[k], problem.control_dim):
            issues.append(
                f"policy stage {k}: shape {u.shape}, expected "
                f"({tree.node_counts[k]}, {problem.control_dim})"
            )
            continue
        cs = problem.stages[k].controls
        if not (np.all(u >= cs.lo - tol) and np.all(u <= cs.hi + tol)):
            issues.append(f"policy stage {k}: control outside its constraint set")
    if issues:
        raise ValidationError(issues)


def stage_env(tree, k, x, u):
    """Env binding stage-k node states/controls and all visible past noises."""
    return Env(x=x, u=u, w=tree.path_noise(k))


def eval_stage_vector(exprs, env, lead_shape=()):
    """Evaluate a tuple of expressions into one array stacked on the last axis.

    ``lead_shape`` pins the leading (node/batch) axes so constant expressions
    still produce full-size columns.
    """
    cols = [np.asarray(evaluate(e, env), dtype=float) for e in exprs]
    shape = np.broadcast_shapes(lead_shape, *[c.shape for c in cols])
    return np.stack([np.broadcast_to(c, shape) for c in cols], axis=-1)


def eval_stage_vector_partials(exprs, env, wrt, lead_shape=()):
    """Vector of expressions with partials: values (..., n), jac (..., n, nwrt)."""
    vals, jacs = [], []
    for e in exprs:
        v, p = eval_with_partials(e, env, wrt)
        v = np.asarray(v, dtype=float)
        p = np.asarray(p, dtype=float)  # (nwrt, ...) or (nwrt,)
        vals.append(v)
        jacs.append(np.moveaxis(p, 0, -1) if p.ndim > 1 else p)
    shape = np.broadcast_shapes(lead_shape, *[v.shape for v in vals])
    nwrt = len(wrt)
    vals = np.stack([np.broadcast_to(v, shape) for v in vals], axis=-1)
    jacs = np.stack([np.broadcast_to(j, shape + (nwrt,)) for j in jacs], axis=-2)
    return vals, jacs


def _x_names(n):
    return [f"x{i}" for i in range(1, n + 1)]


def _u_names(m):
    return [f"u{j}" for j in range(1, m + 1)]


def _step_states(problem, tree, k, x, u):
    """Map stage-k node states/controls to stage-(k+1) node states."""
    stage = problem.stages[k]
    env = stage_env(tree, k, x, u)
    lead = np.asarray(x).shape[:-1]
    b = eval_stage_vector(stage.drift, env, lead)
    sigs = [eval_stage_vector(sig, env, lead) for sig in stage.diffusion]
    S = tree.branching(k)
    w_next = tree.noise_at(k + 1)  # (count_{k+1}, d)
    x_next = np.repeat(b, S, axis=-2)
    for l in range(problem.noise_dim):
        x_next = x_next + np.repeat(sigs[l], S, axis=-2) * w_next[:, l][:, None]
    return x_next


def simulate_batch(problem, tree, controls):
    """Forward states for per-node controls with optional leading batch axes."""
    x0 = np.asarray(problem.x0, dtype=float)
    lead = controls[0].shape[:-2]
    states = [np.broadcast_to(x0, lead + (1, problem.state_dim)).copy()]
    for k in range(problem.horizon):
        states.append(_step_states(problem, tree, k, states[k], controls[k]))
    return states


def simulate(problem, tree, policy):
    """Solve the controlled dynamics nodewise; exact at every tree edge."""
    check_admissible(problem, tree, policy)
    return Trajectory(tuple(simulate_batch(problem, tree, list(policy.controls))))


def leaf_cost_batch(problem, tree, controls, states):
    """Total cost payload per leaf: running sums plus terminal cost."""
    lead = controls[0].shape[:-2]
    cum = np.zeros(lead + (1,))
    for k in range(problem.horizon):
        env = stage_env(tree, k, states[k], controls[k])
        f = np.asarray(evaluate(problem.stages[k].running_cost, env), dtype=float)
        f = np.broadcast_to(f, lead + (tree.node_counts[k],))
        cum = np.repeat(cum + f, tree.branching(k), axis=-1)
    phi = np.asarray(evaluate(problem.terminal, Env(x=states[-1])), dtype=float)
    return cum + np.broadcast_to(phi, cum.shape)


@dataclass(frozen=True, eq=False)
class CostResult:
    value: float
    sub: SublinearResult
    trajectory: Trajectory
    leaf_payload: np.ndarray


def cost(problem, tree, policy, rel_tol=None):
    """Worst-case total cost J(u) with conditionals and tie structure."""
    traj = simulate(problem, tree, policy)
    payload = leaf_cost_batch(
        problem, tree, list(policy.controls), list(traj.states)
    )
    kwargs = {} if rel_tol is None else {"rel_tol": rel_tol}
    sub = sublinear_backward(tree, payload, **kwargs)
    return CostResult(sub.value, sub, traj, payload)


def stage_coefficients(problem, tree, k, x, u):
    """Drift/diffusion/cost derivatives at (x, u) for one stage, nodewise.

    Returns dict with b, b_x, b_u, sig (list over channels), sig_x, sig_u,
    f, f_x, f_u; the x/u jacobians have shapes (count, n, n) and (count, n, m).
    """
    n, m = problem.state_dim, problem.control_dim
    stage = problem.stages[k]
    env = stage_env(tree, k, x, u)
    lead = np.asarray(x).shape[:-1]
    wrt = _x_names(n) + _u_names(m)
    b, b_j = eval_stage_vector_partials(stage.drift, env, wrt, lead)
    sig, sig_x, sig_u = [], [], []
    for l in range(problem.noise_dim):
        s, s_j = eval_stage_vector_partials(stage.diffusion[l], env, wrt, lead)
        sig.append(s)
        sig_x.append(s_j[..., :n])
        sig_u.append(s_j[..., n:])
    f, f_j = eval_with_partials(stage.running_cost, env, wrt)
    f = np.broadcast_to(np.asarray(f, dtype=float), b.shape[:-1])
    f_j = np.moveaxis(np.asarray(f_j, dtype=float), 0, -1)
    f_j = np.broadcast_to(f_j, b.shape[:-1] + (n + m,))
    return {
        "b": b,
        "b_x": b_j[..., :n],
        "b_u": b_j[..., n:],
        "sig": sig,
        "sig_x": sig_x,
        "sig_u": sig_u,
        "f": f,
        "f_x": f_j[..., :n],
        "f_u": f_j[..., n:],
    }


def terminal_gradient(problem, x_leaf):
    """phi_x at the leaf states, shape (count_N, n)."""
    v, p = eval_with_partials(
        problem.terminal, Env(x=x_leaf), _x_names(problem.state_dim)
    )
    p = np.asarray(p, dtype=float)
    p = np.moveaxis(p, 0, -1)
    return np.broadcast_to(p, (x_leaf.shape[0], problem.state_dim))


def direction_arrays(direction):
    """Accept a Policy-like object or a plain list of per-stage arrays."""
    arrays = direction.controls if isinstance(direction, Policy) else direction
    return [np.asarray(a, dtype=float) for a in arrays]


def variational_state(problem, tree, policy, direction, trajectory=None):
    """Linearized state response to a control perturbation direction.

    ``direction`` is a per-node policy difference (same shapes as the policy).
    Returns the NodeField of first-variation states over stages 0..N.
    """
    traj = trajectory if trajectory is not None else simulate(problem, tree, policy)
    dirs = direction_arrays(direction)
    n = problem.state_dim
    xhat = [np.zeros((1, n))]
    for k in range(problem.horizon):
        co = stage_coefficients(problem, tree, k, traj.states[k], policy.controls[k])
        v = dirs[k]
        drift_part = (
            np.einsum("cij,cj->ci", co["b_x"], xhat[k])
            + np.einsum("cij,cj->ci", co["b_u"], v)
        )
        sig_parts = [
            np.einsum("cij,cj->ci", co["sig_x"][l], xhat[k])
            + np.einsum("cij,cj->ci", co["sig_u"][l], v)
            for l in range(problem.noise_dim)
        ]
        S = tree.branching(k)
        w_next = tree.noise_at(k + 1)
        nxt = np.repeat(drift_part, S, axis=0)
        for l in range(problem.noise_dim):
            nxt = nxt + np.repeat(sig_parts[l], S, axis=0) * w_next[:, l][:, None]
        xhat.append(nxt)
    return NodeField(0, tuple(xhat))


def gateaux_term(problem, tree, policy, direction, trajectory=None):
    """Leaf payload of the first-order cost variation along ``direction``."""
    traj = trajectory if trajectory is not None else simulate(problem, tree, policy)
    dirs = direction_arrays(direction)
    xhat = variational_state(problem, tree, policy, direction, trajectory=traj)
    cum = np.zeros(1)
    for k in range(problem.horizon):
        co = stage_coefficients(problem, tree, k, traj.states[k], policy.controls[k])
        v = dirs[k]
        term = (
            np.einsum("ci,ci->c", co["f_x"], xhat.stage(k))
            + np.einsum("ci,ci->c", co["f_u"], v)
        )
        cum = np.repeat(cum + term, tree.branching(k))
    phi_x = terminal_gradient(problem, traj.states[-1])
    return cum + np.einsum("ci,ci->c", phi_x, xhat.stage(problem.horizon))
