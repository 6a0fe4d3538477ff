"""Robust dynamic programming and backward maximum-principle solvers.

Both solvers sweep the tree backward, per node and per collocation point over
the stage state box. The DP route minimizes the robust one-step value
Q(x, u) = f(x, u) + max over candidates of the weighted continuation average
by damped projected Newton with multistart; the MP route instead iterates the
first-order fixed point: pick the worst-case candidate at the current control,
assemble the stage adjoint pair from the continuation gradient, and Newton-step
the projected stationarity condition, re-selecting the candidate each iterate.
Stage values and feedback laws are fitted per node as Chebyshev polynomials;
misfits larger than the tolerance abort the solve rather than degrade it.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .ambiguity import Selection, worst_case_value
from .chebfit import (
    collocation_points,
    design,
    design_grad,
    make_basis,
)
from .errors import (
    BudgetExceeded,
    FitResidualExceeded,
    FixedPointDiverged,
    InnerSolveFailed,
)
from .exprdsl import Env, eval_with_partials, evaluate
from .maxprinciple import Certificate, TieReport, certify, selection_summary
from .model import (
    Policy,
    Trajectory,
    cost,
    leaf_cost_batch,
    simulate_batch,
    _u_names,
    _x_names,
)

_TINY = 1e-12


@dataclass(frozen=True)
class SolveOptions:
    degree: int = 4
    points_per_axis: Optional[int] = None   # default degree + 3
    newton_max_iter: int = 100
    newton_tol: float = 1e-12
    max_halvings: int = 40
    multistart: int = 3
    tie_rel_tol: float = 1e-9
    tie_abs_tol: float = 1e-12
    leaf_budget: int = 10 ** 7
    fit_tol: float = 1e-7
    fixed_point_max_iter: int = 200
    convexity_samples: int = 200
    seed: int = 0

    def resolved_points(self):
        pts = self.points_per_axis if self.points_per_axis else self.degree + 3
        if self.degree < 2:
            raise ValueError("collocation degree must be >= 2")
        if pts <= self.degree:
            raise ValueError("points per axis must exceed the degree")
        return pts


@dataclass(frozen=True, eq=False)
class StageFit:
    basis: object
    value_coefs: np.ndarray        # (count, B)
    value_residual: float
    feedback_coefs: np.ndarray     # (count, m, B)
    feedback_residual: float
    point_selection: np.ndarray    # (count, P) candidate chosen at each point


@dataclass(frozen=True, eq=False)
class Solution:
    method: str
    value: float
    policy: Policy
    trajectory: Trajectory
    stage_fits: tuple
    selection: Selection
    tie_report: TieReport
    certificate: Certificate
    diagnostics: dict


def _tie_select(inner, prev, rel_tol, abs_tol):
    """Candidate choice per point: keep the previous pick while it stays tied."""
    best = inner.max(axis=-1, keepdims=True)
    slack = np.maximum(rel_tol * np.abs(best), abs_tol)
    mask = inner >= best - slack
    sel = np.argmax(mask, axis=-1)
    if prev is not None:
        keep = np.take_along_axis(mask, prev[..., None], axis=-1)[..., 0]
        sel = np.where(keep, prev, sel)
    return sel, mask


class _StageSolver:
    """Shared per-stage machinery for the DP and MP inner problems."""

    def __init__(self, problem, tree, k, options, cont):
        self.problem = problem
        self.tree = tree
        self.k = k
        self.options = options
        self.cont = cont
        self.stage = problem.stages[k]
        self.count = tree.node_counts[k]
        self.S = tree.branching(k)
        self.weights = self.stage.noise.weights        # (K, S)
        self.support = self.stage.noise.support        # (S, d)
        n = problem.state_dim
        pts = collocation_points(*self.stage.state_box, options.resolved_points())
        self.points = pts                               # (P, n)
        self.P = pts.shape[0]
        self.X = np.broadcast_to(pts, (self.count, self.P, n)).copy()
        self.wpast = {
            i: w[:, None, :] for i, w in tree.path_noise(k).items()
        }
        self.child_idx = (
            np.arange(self.count)[:, None] * self.S + np.arange(self.S)[None, :]
        )
        self.wrt_u = _u_names(problem.control_dim)

    def _env(self, U):
        return Env(x=self.X, u=U, w=self.wpast)

    def _dyn(self, U, with_grad):
        """Drift/diffusion/cost (and their u-jacobians) at all (node, point)s."""
        from .model import eval_stage_vector, eval_stage_vector_partials

        env = self._env(U)
        lead = (self.count, self.P)
        if with_grad:
            b, b_u = eval_stage_vector_partials(self.stage.drift, env, self.wrt_u, lead)
            sigs, sig_us = [], []
            for l in range(self.problem.noise_dim):
                s, s_u = eval_stage_vector_partials(
                    self.stage.diffusion[l], env, self.wrt_u, lead
                )
                sigs.append(s)
                sig_us.append(s_u)
            f, f_u = eval_with_partials(self.stage.running_cost, env, self.wrt_u)
            f = np.broadcast_to(np.asarray(f, dtype=float), lead)
            f_u = np.moveaxis(np.asarray(f_u, dtype=float), 0, -1)
            f_u = np.broadcast_to(f_u, lead + (self.problem.control_dim,))
            return b, b_u, sigs, sig_us, f, f_u
        b = eval_stage_vector(self.stage.drift, env, lead)
        sigs = [
            eval_stage_vector(sig, env, lead) for sig in self.stage.diffusion
        ]
        f = np.broadcast_to(
            np.asarray(evaluate(self.stage.running_cost, env), dtype=float), lead
        )
        return b, None, sigs, None, f, None

    def _children(self, b, sigs, with_grad):
        """Continuation values (and gradients) at every child branch."""
        vals, grads = [], []
        for j in range(self.S):
            Xc = b.copy()
            for l in range(self.problem.noise_dim):
                Xc += sigs[l] * self.support[j, l]
            v, g = self.cont(self.child_idx[:, j], Xc, with_grad)
            vals.append(v)
            grads.append(g)
        return vals, grads

    def values(self, U, prev_sel):
        """Robust stage value and candidate choice at each (node, point)."""
        b, _, sigs, _, f, _ = self._dyn(U, with_grad=False)
        vals, _ = self._children(b, sigs, with_grad=False)
        inner = np.einsum("jcp,kj->cpk", np.stack(vals), self.weights)
        sel, mask = _tie_select(
            inner, prev_sel, self.options.tie_rel_tol, self.options.tie_abs_tol
        )
        q = f + np.take_along_axis(inner, sel[..., None], axis=-1)[..., 0]
        return q, sel, mask

    def adjoint_reps(self, U, sel):
        """Stage adjoint pair (P, Q) from the continuation gradient under sel.

        Returns per-(node, point): P (..., n), Q (..., n, d), plus the pieces
        needed for H_u (b_u, sig_u, f_u) and the stage value under sel.
        """
        b, b_u, sigs, sig_us, f, f_u = self._dyn(U, with_grad=True)
        vals, grads = self._children(b, sigs, with_grad=True)
        wsel = self.weights[sel]                          # (count, P, S)
        stackv = np.stack(vals)                           # (S, count, P)
        stackg = np.stack(grads)                          # (S, count, P, n)
        value = f + np.einsum("cps,scp->cp", wsel, stackv)
        P = np.einsum("cps,scpn->cpn", wsel, stackg)
        Q = np.einsum("cps,scpn,sl->cpnl", wsel, stackg, self.support)
        return P, Q, b_u, sig_us, f_u, value

    def grad(self, U, sel):
        """Gradient of the robust stage value in u at a fixed candidate choice."""
        P, Q, b_u, sig_us, f_u, value = self.adjoint_reps(U, sel)
        g = np.einsum("cpn,cpnm->cpm", P, b_u) + f_u
        for l in range(self.problem.noise_dim):
            g += np.einsum("cpn,cpnm->cpm", Q[..., l], sig_us[l])
        return g, value

    # --- iterations ------------------------------------------------------

    def projected_gradient(self, U, g):
        cs = self.stage.controls
        can_dec = U > cs.lo + _TINY
        can_inc = U < cs.hi - _TINY
        return np.where(can_dec, np.maximum(g, 0.0), 0.0) - np.where(
            can_inc, np.maximum(-g, 0.0), 0.0
        )

    def _fd_jacobian(self, U, sel, g0):
        m = self.problem.control_dim
        J = np.empty(g0.shape + (m,))
        for c in range(m):
            h = 1e-6 * (1.0 + np.abs(U[..., c : c + 1]))
            Up = U.copy()
            Up[..., c : c + 1] += h
            gp, _ = self.grad(Up, sel)
            J[..., c] = (gp - g0) / h
        return 0.5 * (J + np.swapaxes(J, -1, -2))

    def _step(self, J, g):
        m = self.problem.control_dim
        if m == 1:
            h = J[..., 0, 0]
            safe = h > _TINY
            step = np.where(safe, -g[..., 0] / np.where(safe, h, 1.0), -g[..., 0])
            return step[..., None]
        ridge = J + _TINY * np.eye(m)
        try:
            step = np.linalg.solve(ridge, -g[..., None])[..., 0]
        except np.linalg.LinAlgError:
            step = -g
        descent = np.einsum("...m,...m->...", step, g)
        return np.where((descent < 0.0)[..., None], step, -g)

    def newton_min(self, u0):
        """Damped projected Newton minimization of the robust stage value."""
        opts = self.options
        cs = self.stage.controls
        U = cs.project(u0)
        q, sel, _ = self.values(U, None)
        converged = np.zeros(q.shape, dtype=bool)
        for _ in range(opts.newton_max_iter):
            g, _ = self.grad(U, sel)
            pg = self.projected_gradient(U, g)
            res = np.abs(pg).max(axis=-1)
            converged = res <= opts.newton_tol
            if converged.all():
                break
            J = self._fd_jacobian(U, sel, g)
            step = self._step(J, g)
            alpha = np.ones(q.shape + (1,))
            trial, qt, selt = U, q, sel
            for _ in range(opts.max_halvings):
                trial = cs.project(U + alpha * step)
                qt, selt, _ = self.values(trial, sel)
                ok = qt <= q + _TINY * (1.0 + np.abs(q))
                if ok.all():
                    break
                alpha = np.where(ok[..., None], alpha, 0.5 * alpha)
            else:
                trial = cs.project(U + np.where(ok[..., None], alpha, 0.0) * step)
                qt, selt, _ = self.values(trial, sel)
            U, q, sel = trial, qt, selt
        g, _ = self.grad(U, sel)
        pg = self.projected_gradient(U, g)
        res = np.abs(pg).max(axis=-1)
        return U, q, sel, res <= opts.newton_tol, res

    def multistarts(self, rough_grad):
        """Canonical start plus two offsets along the steepest coordinate."""
        cs = self.stage.controls
        m = self.problem.control_dim
        center = np.broadcast_to(cs.start_point(), (self.count, self.P, m)).copy()
        starts = [center]
        if self.options.multistart > 1:
            c = int(np.argmax(np.abs(rough_grad).sum(axis=(0, 1))))
            span_lo = np.where(
                np.isfinite(cs.lo[c]), cs.lo[c], center[..., c] - 1.0 - np.abs(center[..., c])
            )
            span_hi = np.where(
                np.isfinite(cs.hi[c]), cs.hi[c], center[..., c] + 1.0 + np.abs(center[..., c])
            )
            for t, span in ((1, span_lo), (2, span_hi)):
                if t >= self.options.multistart:
                    break
                s = center.copy()
                s[..., c] = span
                starts.append(s)
        return starts

    def solve_dp_stage(self):
        center = np.broadcast_to(
            self.stage.controls.start_point(),
            (self.count, self.P, self.problem.control_dim),
        ).copy()
        _, sel0, _ = self.values(center, None)
        g0, _ = self.grad(center, sel0)
        best = None
        disagreement = 0.0
        n_unconverged = None
        for u0 in self.multistarts(g0):
            U, q, sel, conv, res = self.newton_min(u0)
            if best is None:
                best = [U, q, sel, conv, res]
                n_unconverged = ~conv
                continue
            close = np.abs(q - best[1]) <= 1e-9 * (1.0 + np.abs(best[1]))
            diff = np.abs(U - best[0]).max(axis=-1)
            disagreement = max(
                disagreement, float(np.max(np.where(close & conv & best[3], diff, 0.0)))
            )
            better = conv & (q < best[1] - _TINY * (1.0 + np.abs(q))) | (
                conv & ~best[3]
            )
            pick = better[..., None]
            best[0] = np.where(pick, U, best[0])
            best[1] = np.where(better, q, best[1])
            best[2] = np.where(better, sel, best[2])
            best[3] = best[3] | conv
            best[4] = np.minimum(best[4], res)
            n_unconverged = n_unconverged & ~conv
        if n_unconverged.any():
            raise InnerSolveFailed(
                f"stage {self.k}: {int(n_unconverged.sum())} collocation points "
                f"did not reach gradient tolerance (max residual "
                f"{float(best[4].max()):.3e})"
            )
        return best[0], best[1], best[2], disagreement

    def solve_mp_stage(self):
        """Fixed point of the projected stationarity condition (paper route)."""
        opts = self.options
        cs = self.stage.controls
        U = np.broadcast_to(
            cs.start_point(), (self.count, self.P, self.problem.control_dim)
        ).copy()
        sel = None
        for it in range(opts.fixed_point_max_iter):
            _, sel, _ = self.values(U, sel)
            g, _ = self.grad(U, sel)
            resid = np.abs(U - cs.project(U - g)).max(axis=-1)
            if resid.max() <= opts.newton_tol:
                q, sel, _ = self.values(U, sel)
                return U, q, sel, it
            J = self._fd_jacobian(U, sel, g)
            step = self._step(J, g)
            alpha = np.ones(resid.shape + (1,))
            trial = U
            for _ in range(opts.max_halvings):
                trial = cs.project(U + alpha * step)
                _, selt, _ = self.values(trial, sel)
                gt, _ = self.grad(trial, selt)
                rt = np.abs(trial - cs.project(trial - gt)).max(axis=-1)
                ok = rt <= resid + _TINY
                if ok.all():
                    break
                alpha = np.where(ok[..., None], alpha, 0.5 * alpha)
            U = trial
        raise FixedPointDiverged(
            f"stage {self.k}: stationarity fixed point did not converge in "
            f"{opts.fixed_point_max_iter} iterations"
        )


def _make_cont(problem, tree, k, bases, vcoefs):
    """Continuation evaluator for stage k: child value and gradient in x."""
    n = problem.state_dim
    if k + 1 == problem.horizon:
        xnames = _x_names(n)
        terminal = problem.terminal

        def cont(child_idx, X, with_grad):
            lead = X.shape[:-1]
            if with_grad:
                v, p = eval_with_partials(terminal, Env(x=X), xnames)
                v = np.broadcast_to(np.asarray(v, dtype=float), lead)
                g = np.moveaxis(np.asarray(p, dtype=float), 0, -1)
                return v, np.broadcast_to(g, lead + (n,))
            v = np.broadcast_to(
                np.asarray(evaluate(terminal, Env(x=X)), dtype=float), lead
            )
            return v, None

    else:
        basis = bases[k + 1]
        coefs = vcoefs[k + 1]

        def cont(child_idx, X, with_grad):
            cf = coefs[child_idx]
            if with_grad:
                D, dD = design_grad(basis, X)
                v = np.einsum("cpb,cb->cp", D, cf)
                g = np.einsum("cpbn,cb->cpn", dD, cf)
                return v, g
            D = design(basis, X)
            return np.einsum("cpb,cb->cp", D, cf), None

    return cont


def _fit_stage(problem, solver, basis, U, q, options):
    from .chebfit import fit_many

    vcoef, vres = fit_many(basis, solver.points, q)
    if vres > options.fit_tol:
        quad = make_basis(basis.lo, basis.hi, 2)
        _, qres = fit_many(quad, solver.points, q)
        raise FitResidualExceeded(
            f"stage {solver.k}: value fit residual {vres:.3e} exceeds "
            f"{options.fit_tol:.1e} (degree-2 refit residual {qres:.3e}; "
            f"a tiny degree-2 residual means the instance is LQ and something "
            f"else is wrong)"
        )
    fcoef, fres = fit_many(basis, solver.points, np.moveaxis(U, -1, 1))
    return vcoef, vres, fcoef, fres


def _forward_policy(problem, tree, bases, fcoefs):
    """Simulate the fitted feedback laws from x0; returns (policy, trajectory)."""
    from .model import _step_states

    states = [np.broadcast_to(problem.x0, (1, problem.state_dim)).copy()]
    controls = []
    for k in range(problem.horizon):
        D = design(bases[k], states[k])                     # (count, B)
        u = np.einsum("cb,cmb->cm", D, fcoefs[k])
        u = problem.stages[k].controls.project(u)
        controls.append(u)
        states.append(_step_states(problem, tree, k, states[k], u))
    return Policy(tuple(controls)), Trajectory(tuple(states))


def _assemble(problem, tree, method, bases, vcoefs, vres, fcoefs, fres, point_sel,
              diagnostics, options):
    policy, traj = _forward_policy(problem, tree, bases, fcoefs)
    res = cost(problem, tree, policy)
    selection, ties = selection_summary(tree, res.sub.argmax_sets)
    certificate = certify(
        problem,
        tree,
        policy,
        convexity_samples=options.convexity_samples,
        seed=options.seed,
    )
    fits = tuple(
        StageFit(
            basis=bases[k],
            value_coefs=vcoefs[k],
            value_residual=vres[k],
            feedback_coefs=fcoefs[k],
            feedback_residual=fres[k],
            point_selection=point_sel[k],
        )
        for k in range(problem.horizon)
    )
    return Solution(
        method=method,
        value=res.value,
        policy=policy,
        trajectory=res.trajectory,
        stage_fits=fits,
        selection=selection,
        tie_report=ties,
        certificate=certificate,
        diagnostics=diagnostics,
    )


def solve_dp(problem, tree, options=None):
    """Robust dynamic programming with per-node polynomial collocation."""
    options = options or SolveOptions()
    t0 = time.perf_counter()
    N = problem.horizon
    bases = [
        make_basis(*problem.stages[k].state_box, options.degree) for k in range(N)
    ]
    vcoefs = [None] * N
    vres = [None] * N
    fcoefs = [None] * N
    fres = [None] * N
    point_sel = [None] * N
    disagreements = {}
    for k in range(N - 1, -1, -1):
        cont = _make_cont(problem, tree, k, bases, vcoefs)
        solver = _StageSolver(problem, tree, k, options, cont)
        U, q, sel, disagreement = solver.solve_dp_stage()
        vcoefs[k], vres[k], fcoefs[k], fres[k] = _fit_stage(
            problem, solver, bases[k], U, q, options
        )
        point_sel[k] = sel
        if disagreement > 1e-6:
            disagreements[k] = disagreement
    diagnostics = {
        "multistart_disagreement": disagreements,
        "solve_seconds": time.perf_counter() - t0,
    }
    return _assemble(
        problem, tree, "dp", bases, vcoefs, vres, fcoefs, fres, point_sel,
        diagnostics, options,
    )


def solve_mp_backward(problem, tree, options=None):
    """The backward maximum-principle algorithm (select, adjoin, make stationary)."""
    options = options or SolveOptions()
    t0 = time.perf_counter()
    N = problem.horizon
    bases = [
        make_basis(*problem.stages[k].state_box, options.degree) for k in range(N)
    ]
    vcoefs = [None] * N
    vres = [None] * N
    fcoefs = [None] * N
    fres = [None] * N
    point_sel = [None] * N
    iters = {}
    for k in range(N - 1, -1, -1):
        cont = _make_cont(problem, tree, k, bases, vcoefs)
        solver = _StageSolver(problem, tree, k, options, cont)
        U, q, sel, n_iter = solver.solve_mp_stage()
        vcoefs[k], vres[k], fcoefs[k], fres[k] = _fit_stage(
            problem, solver, bases[k], U, q, options
        )
        point_sel[k] = sel
        iters[k] = n_iter
    diagnostics = {
        "fixed_point_iterations": iters,
        "solve_seconds": time.perf_counter() - t0,
    }
    return _assemble(
        problem, tree, "mp", bases, vcoefs, vres, fcoefs, fres, point_sel,
        diagnostics, options,
    )


def brute_force_oracle(problem, tree, control_grid, budget=10 ** 7, chunk=1 << 16):
    """Exhaustive search over per-node controls drawn from a finite grid.

    The grid is shared by every node; the search space is the full product
    over all stage-0..N-1 nodes. Returns (best Policy, best J).
    """
    grid = np.asarray(control_grid, dtype=float)
    if grid.ndim == 1:
        grid = grid[:, None]
    if grid.shape[1] != problem.control_dim:
        raise ValueError("grid entries must have the control dimension")
    G = grid.shape[0]
    counts = [tree.node_counts[k] for k in range(problem.horizon)]
    total_nodes = sum(counts)
    total = G ** total_nodes
    if total > budget:
        raise BudgetExceeded(
            f"grid search over {total} candidate policies exceeds budget {budget}",
            size=total,
        )
    offsets = np.cumsum([0] + counts)
    radix = [G ** (total_nodes - 1 - t) for t in range(total_nodes)]
    best_val = np.inf
    best_id = None
    for start in range(0, total, chunk):
        ids = np.arange(start, min(start + chunk, total), dtype=np.int64)
        digit_idx = [
            ((ids // radix[t]) % G).astype(np.int64) for t in range(total_nodes)
        ]
        controls = []
        for k in range(problem.horizon):
            cols = digit_idx[offsets[k] : offsets[k + 1]]
            controls.append(
                np.stack([grid[c] for c in cols], axis=1)  # (B, count_k, m)
            )
        states = simulate_batch(problem, tree, controls)
        payload = leaf_cost_batch(problem, tree, controls, states)
        vals = worst_case_value(tree, payload)
        i = int(np.argmin(vals))
        if vals[i] < best_val:
            best_val = float(vals[i])
            best_id = int(ids[i])
    digits = [(best_id // radix[t]) % G for t in range(total_nodes)]
    policy = Policy(
        tuple(
            np.stack(
                [grid[digits[offsets[k] + i]] for i in range(counts[k])], axis=0
            )
            for k in range(problem.horizon)
        )
    )
    return policy, best_val
