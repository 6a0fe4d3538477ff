"""Worst-case measures, adjoint processes, Hamiltonian, and certificates.

The reference measure is encoded as a Selection: the per-node argmax of the
conditional total cost. The adjoint pair (P_k, Q_k) is computed two ways that
share no recursion — the backward conditional-expectation recursion, and the
explicit path-product formula summed directly over descendants — and their
agreement is part of every certificate. Stationarity is the projected
first-order condition on the Hamiltonian's control gradient, asserted at
every node carrying positive probability under the certified selection.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .ambiguity import (
    NodeField,
    Selection,
    expect_under_selection,
    node_probabilities,
    refine_sup_over_ties,
)
from .errors import InadmissiblePerturbation
from .exprdsl import Env, evaluate, eval_with_partials
from .model import (
    Policy,
    cost,
    direction_arrays,
    eval_stage_vector,
    simulate,
    stage_coefficients,
    stage_env,
    terminal_gradient,
    _u_names,
)

POSITIVE_PROB_TOL = 1e-15
STATIONARITY_TOL = 1e-8
ADJOINT_CROSSCHECK_TOL = 1e-10


@dataclass(frozen=True, eq=False)
class Adjoint:
    """Adjoint processes: P[k] is (count_k, n), Q[k] is (count_k, n, d)."""

    P: tuple
    Q: tuple


@dataclass(frozen=True)
class StageTieSummary:
    noise_stage: int          # 1-based: the stage of the noise being selected
    canonical_index: Optional[int]
    canonical_label: str
    tied_nodes: int
    max_multiplicity: int
    node_count: int


@dataclass(frozen=True)
class TieReport:
    stages: tuple  # StageTieSummary, ascending noise stage

    @property
    def any_ties(self):
        return any(s.max_multiplicity > 1 for s in self.stages)

    def summary_labels(self):
        """Per-noise-stage canonical labels, ascending stage order."""
        return tuple(s.canonical_label for s in self.stages)


def selection_summary(tree, argmax_sets):
    """Canonical selection plus the per-stage tie report."""
    indices = []
    summaries = []
    for k in range(tree.n_stages):
        mask = argmax_sets[k]
        canon = np.argmax(mask, axis=1)
        indices.append(canon)
        mult = mask.sum(axis=1)
        uniq = np.unique(canon)
        stage = tree.stages[k]
        if uniq.size == 1:
            ci = int(uniq[0])
            label = stage.labels[ci]
        else:
            ci = None
            label = "mixed(" + ",".join(stage.labels[int(i)] for i in uniq) + ")"
        summaries.append(
            StageTieSummary(
                noise_stage=k + 1,
                canonical_index=ci,
                canonical_label=label,
                tied_nodes=int((mult > 1).sum()),
                max_multiplicity=int(mult.max()),
                node_count=int(mask.shape[0]),
            )
        )
    return Selection(tuple(indices)), TieReport(tuple(summaries))


def worst_case_selection(problem, tree, policy):
    """Canonical worst-case measure at a policy, with tie report."""
    res = cost(problem, tree, policy)
    selection, report = selection_summary(tree, res.sub.argmax_sets)
    return selection, report


def _stage_weight_rows(tree, selection, k):
    return tree.stages[k].weights[selection.indices[k]]  # (count_k, S)


def adjoint_recursive(problem, tree, policy, selection, trajectory=None):
    """Solve the adjoint equations backward under the selected measure."""
    traj = trajectory if trajectory is not None else simulate(problem, tree, policy)
    N = problem.horizon
    n, d = problem.state_dim, problem.noise_dim
    P = [None] * N
    Q = [None] * N

    integrand = terminal_gradient(problem, traj.states[N])  # phi_x^T rows
    for k in range(N - 1, -1, -1):
        S = tree.branching(k)
        w = _stage_weight_rows(tree, selection, k)                   # (c, S)
        R = integrand.reshape(tree.node_counts[k], S, n)
        Wc = tree.noise_at(k + 1).reshape(tree.node_counts[k], S, d)
        P[k] = np.einsum("cs,csi->ci", w, R)
        Q[k] = np.einsum("cs,csi,csl->cil", w, R, Wc)
        if k > 0:
            co = stage_coefficients(
                problem, tree, k, traj.states[k], policy.controls[k]
            )
            integrand = (
                np.einsum("cji,cj->ci", co["b_x"], P[k])
                + sum(
                    np.einsum("cji,cj->ci", co["sig_x"][l], Q[k][:, :, l])
                    for l in range(d)
                )
                + co["f_x"]
            )
    return Adjoint(tuple(P), tuple(Q))


def adjoint_explicit(problem, tree, policy, selection, trajectory=None):
    """Adjoint via the explicit path-product formula, summed over descendants.

    Serves as the independent oracle for adjoint_recursive: it never forms the
    backward recursion, only transition-matrix products along tree paths.
    """
    traj = trajectory if trajectory is not None else simulate(problem, tree, policy)
    N = problem.horizon
    n, d = problem.state_dim, problem.noise_dim

    coeffs = [
        stage_coefficients(problem, tree, j, traj.states[j], policy.controls[j])
        for j in range(N)
    ]
    # A at stage j lives on stage-(j+1) nodes: b_x(j) + sum_l sig_x^l(j) W_{j+1}^l
    A = []
    for j in range(N):
        S = tree.branching(j)
        w_next = tree.noise_at(j + 1)
        a = np.repeat(coeffs[j]["b_x"], S, axis=0).copy()
        for l in range(d):
            a += np.repeat(coeffs[j]["sig_x"][l], S, axis=0) * w_next[:, l][:, None, None]
        A.append(a)
    fx = [coeffs[j]["f_x"] for j in range(N)]          # f_x at stage j nodes
    phi_x = terminal_gradient(problem, traj.states[N])

    P = [None] * N
    Q = [None] * N
    for k in range(N):
        ck = tree.node_counts[k]
        accP = np.zeros((ck, n))
        accQ = np.zeros((ck, n, d))
        S0 = tree.branching(k)
        condprob = _stage_weight_rows(tree, selection, k).reshape(-1)
        wfirst = tree.noise_at(k + 1)                   # (count_{k+1}, d)
        G = np.broadcast_to(np.eye(n), (tree.node_counts[k + 1], n, n)).copy()
        for i in range(k + 1, N + 1):
            ci = tree.node_counts[i]
            f_i = phi_x if i == N else fx[i]
            term = np.einsum("cij,cj->ci", G, f_i)      # (prod A^T) f_x^T
            weighted = condprob[:, None] * term
            accP += weighted.reshape(ck, ci // ck, n).sum(axis=1)
            outer = weighted[:, :, None] * wfirst[:, None, :]
            accQ += outer.reshape(ck, ci // ck, n, d).sum(axis=1)
            if i < N:
                Si = tree.branching(i)
                G = np.einsum(
                    "cij,ckj->cik", np.repeat(G, Si, axis=0), A[i]
                )
                w_i = _stage_weight_rows(tree, selection, i)
                condprob = np.repeat(condprob, Si) * w_i.reshape(-1)
                wfirst = np.repeat(wfirst, Si, axis=0)
        P[k] = accP
        Q[k] = accQ
    return Adjoint(tuple(P), tuple(Q))


def adjoint_crosscheck_error(a, b):
    err = 0.0
    for pk, pk2 in zip(a.P, b.P):
        err = max(err, float(np.max(np.abs(pk - pk2))))
    for qk, qk2 in zip(a.Q, b.Q):
        err = max(err, float(np.max(np.abs(qk - qk2))))
    return err


def hamiltonian(problem, k, x, u, p, q, past_noise=None):
    """H(k, x, u, p, q) = p^T b + sum_l (q^l)^T sig^l + f at one point."""
    stage = problem.stages[k]
    env = Env(x=np.asarray(x, dtype=float), u=np.asarray(u, dtype=float),
              w={} if past_noise is None else past_noise)
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float).reshape(problem.state_dim, problem.noise_dim)
    b = eval_stage_vector(stage.drift, env)
    h = float(p @ b)
    for l in range(problem.noise_dim):
        sig = eval_stage_vector(stage.diffusion[l], env)
        h += float(q[:, l] @ sig)
    h += float(np.asarray(evaluate(stage.running_cost, env)))
    return h


def hamiltonian_u(problem, k, x, u, p, q, past_noise=None):
    """Control gradient of the Hamiltonian at one point, shape (m,)."""
    stage = problem.stages[k]
    env = Env(x=np.asarray(x, dtype=float), u=np.asarray(u, dtype=float),
              w={} if past_noise is None else past_noise)
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float).reshape(problem.state_dim, problem.noise_dim)
    wrt = _u_names(problem.control_dim)
    out = np.zeros(problem.control_dim)
    for i, e in enumerate(stage.drift):
        _, g = eval_with_partials(e, env, wrt)
        out += p[i] * np.asarray(g, dtype=float).reshape(-1)
    for l in range(problem.noise_dim):
        for i, e in enumerate(stage.diffusion[l]):
            _, g = eval_with_partials(e, env, wrt)
            out += q[i, l] * np.asarray(g, dtype=float).reshape(-1)
    _, g = eval_with_partials(stage.running_cost, env, wrt)
    out += np.asarray(g, dtype=float).reshape(-1)
    return out


def stationarity_residuals(problem, tree, policy, adjoint, trajectory=None):
    """Per-node projected first-order residuals, all stages (vectorized)."""
    traj = trajectory if trajectory is not None else simulate(problem, tree, policy)
    out = []
    for k in range(problem.horizon):
        co = stage_coefficients(problem, tree, k, traj.states[k], policy.controls[k])
        hu = np.einsum("ci,cim->cm", adjoint.P[k], co["b_u"]) + co["f_u"]
        for l in range(problem.noise_dim):
            hu += np.einsum("ci,cim->cm", adjoint.Q[k][:, :, l], co["sig_u"][l])
        cs = problem.stages[k].controls
        u = policy.controls[k]
        can_decrease = u > cs.lo + 1e-12
        can_increase = u < cs.hi - 1e-12
        viol = np.maximum(
            np.where(can_decrease, np.maximum(hu, 0.0), 0.0),
            np.where(can_increase, np.maximum(-hu, 0.0), 0.0),
        )
        out.append(viol.max(axis=1))
    return out


@dataclass(frozen=True, eq=False)
class StationarityCheck:
    passed: bool
    tol: float
    max_residual: float
    residuals: NodeField            # stages 0..N-1, per node
    positive_nodes: int
    skipped_zero_prob_nodes: int
    witnesses: tuple                # worst (stage, node, residual) triples


def check_stationarity(problem, tree, policy, selection, adjoint, tol=STATIONARITY_TOL):
    """Maximum-principle stationarity certificate at P*-positive nodes."""
    res = stationarity_residuals(problem, tree, policy, adjoint)
    probs = node_probabilities(tree, selection)
    max_res = 0.0
    positive = 0
    skipped = 0
    witnesses = []
    for k in range(problem.horizon):
        pos = probs.stage(k) > POSITIVE_PROB_TOL
        positive += int(pos.sum())
        skipped += int((~pos).sum())
        rk = np.where(pos, res[k], 0.0)
        stage_max = float(rk.max()) if rk.size else 0.0
        if stage_max > max_res:
            max_res = stage_max
        bad = np.argwhere(rk > tol).ravel()
        for node in bad[:5]:
            witnesses.append((k, int(node), float(rk[node])))
    witnesses.sort(key=lambda t: -t[2])
    return StationarityCheck(
        passed=max_res <= tol,
        tol=tol,
        max_residual=max_res,
        residuals=NodeField(0, tuple(res)),
        positive_nodes=positive,
        skipped_zero_prob_nodes=skipped,
        witnesses=tuple(witnesses[:10]),
    )


def perturbed_policy(problem, policy, eps, direction):
    dirs = direction_arrays(direction)
    return Policy(
        tuple(policy.controls[k] + eps * dirs[k] for k in range(problem.horizon))
    )


@dataclass(frozen=True, eq=False)
class DirectionalReport:
    eps: tuple
    g: tuple                        # difference quotients per eps
    sup_value: float                # sup over tied measures of E[Theta]
    errors: tuple                   # |g(eps) - S|
    order_estimate: Optional[float]
    family_min: Optional[float]     # Theorem-3.4 style minimum over a family
    family_min_after_tie_search: Optional[float]
    passed_nonnegativity: bool


def directional_derivative_check(
    problem, tree, policy, direction, eps_list, tol=1e-9, family=None
):
    """Difference quotients of J against the first-order worst-case value.

    Checks the limit identity g(eps) -> S = sup over tied measures of the
    expected first variation, and a variational-inequality style verdict over
    a direction family under the certified selection (falling back to the
    tie-set sup before declaring failure).
    """
    dirs = direction_arrays(direction)
    for eps in eps_list:
        for k in range(problem.horizon):
            u = policy.controls[k] + eps * dirs[k]
            cs = problem.stages[k].controls
            if not cs.contains(u):
                raise InadmissiblePerturbation(
                    f"u* + {eps}*v leaves the stage-{k} control set"
                )
    base = cost(problem, tree, policy)
    g = []
    for eps in eps_list:
        pol = perturbed_policy(problem, policy, eps, dirs)
        g.append((cost(problem, tree, pol).value - base.value) / eps)
    theta = gateaux_from(problem, tree, policy, dirs, base)
    S, _ = refine_sup_over_ties(tree, base.sub.argmax_sets, theta)
    errors = [abs(gi - S) for gi in g]
    order = None
    if len(eps_list) >= 2 and errors[0] > 0 and errors[1] > 0:
        order = math.log(errors[0] / errors[1]) / math.log(eps_list[0] / eps_list[1])

    family_min = None
    family_min_refined = None
    if family is None:
        family = coordinate_direction_family(problem, tree, policy)
    family = list(family) + [dirs]
    sel0, _ = selection_summary(tree, base.sub.argmax_sets)
    vals = []
    refined = []
    for fam_dir in family:
        th = gateaux_from(problem, tree, policy, fam_dir, base)
        val, _ = expect_under_selection(tree, sel0, th)
        vals.append(val)
        if val < -tol:
            sup_val, _ = refine_sup_over_ties(tree, base.sub.argmax_sets, th)
            refined.append(sup_val)
        else:
            refined.append(val)
    family_min = min(vals)
    family_min_refined = min(refined)
    return DirectionalReport(
        eps=tuple(eps_list),
        g=tuple(g),
        sup_value=S,
        errors=tuple(errors),
        order_estimate=order,
        family_min=family_min,
        family_min_after_tie_search=family_min_refined,
        passed_nonnegativity=family_min_refined >= -tol,
    )


def gateaux_from(problem, tree, policy, dirs, base_cost):
    from .model import gateaux_term

    return gateaux_term(problem, tree, policy, dirs, trajectory=base_cost.trajectory)


def coordinate_direction_family(problem, tree, policy):
    """Feasible +/- unit fields per stage and control component."""
    family = []
    for k in range(problem.horizon):
        cs = problem.stages[k].controls
        for c in range(problem.control_dim):
            for sign in (1.0, -1.0):
                dirs = [
                    np.zeros((tree.node_counts[j], problem.control_dim))
                    for j in range(problem.horizon)
                ]
                bump = policy.controls[k].copy()
                bump[:, c] += sign
                dirs[k] = cs.project(bump) - policy.controls[k]
                family.append(dirs)
    return family


@dataclass(frozen=True)
class ConvexityVerdict:
    satisfied: bool
    samples: int
    seed: int
    witness: Optional[dict]

    @property
    def label(self):
        return "Satisfied" if self.satisfied else "ViolatedAt"


def convexity_sample(problem, tree, policy, adjoint, samples=200, seed=0, tol=1e-9):
    """Midpoint-convexity sampling of the Hamiltonian and the terminal cost."""
    rng = np.random.default_rng(seed)
    traj = simulate(problem, tree, policy)
    n, m = problem.state_dim, problem.control_dim
    u_scale = 1.0 + 2.0 * max(
        float(np.max(np.abs(policy.controls[k]))) if policy.controls[k].size else 0.0
        for k in range(problem.horizon)
    )
    for _ in range(int(samples)):
        k = int(rng.integers(problem.horizon))
        node = int(rng.integers(tree.node_counts[k]))
        lo, hi = problem.stages[k].state_box
        cs = problem.stages[k].controls
        ref = policy.controls[k][node]
        ulo = np.maximum(cs.lo, ref - u_scale)
        uhi = np.minimum(cs.hi, ref + u_scale)
        past = {i: w[node] for i, w in tree.path_noise(k).items()}
        p = adjoint.P[k][node]
        q = adjoint.Q[k][node]

        def draw():
            x = lo + (np.asarray(hi) - lo) * rng.random(n)
            u = ulo + (uhi - ulo) * rng.random(m)
            return x, u

        x1, u1 = draw()
        x2, u2 = draw()
        h1 = hamiltonian(problem, k, x1, u1, p, q, past)
        h2 = hamiltonian(problem, k, x2, u2, p, q, past)
        hm = hamiltonian(problem, k, 0.5 * (x1 + x2), 0.5 * (u1 + u2), p, q, past)
        if hm > 0.5 * (h1 + h2) + tol:
            return ConvexityVerdict(
                False, samples, seed,
                {"kind": "hamiltonian", "stage": k, "node": node,
                 "z1": (x1.tolist(), u1.tolist()),
                 "z2": (x2.tolist(), u2.tolist()),
                 "gap": hm - 0.5 * (h1 + h2)},
            )
        # terminal cost on the last stage box
        tlo, thi = problem.stages[-1].state_box
        y1 = tlo + (np.asarray(thi) - tlo) * rng.random(n)
        y2 = tlo + (np.asarray(thi) - tlo) * rng.random(n)
        f1 = float(np.asarray(evaluate(problem.terminal, Env(x=y1))))
        f2 = float(np.asarray(evaluate(problem.terminal, Env(x=y2))))
        fm = float(np.asarray(evaluate(problem.terminal, Env(x=0.5 * (y1 + y2)))))
        if fm > 0.5 * (f1 + f2) + tol:
            return ConvexityVerdict(
                False, samples, seed,
                {"kind": "terminal", "z1": y1.tolist(), "z2": y2.tolist(),
                 "gap": fm - 0.5 * (f1 + f2)},
            )
    return ConvexityVerdict(True, samples, seed, None)


@dataclass(frozen=True, eq=False)
class Certificate:
    selection: Selection
    tie_report: TieReport
    adjoint: Adjoint
    stationarity: StationarityCheck
    adjoint_crosscheck: float
    adjoint_tol: float
    convexity: Optional[ConvexityVerdict]
    directional: tuple
    selection_attains_cost: float   # |E_P*[total] - J|, should be ~0
    passed: bool


def certify(
    problem,
    tree,
    policy,
    stationarity_tol=STATIONARITY_TOL,
    adjoint_tol=ADJOINT_CROSSCHECK_TOL,
    convexity_samples=200,
    seed=0,
    directional=(),
):
    """Assemble the full maximum-principle certificate at a policy."""
    res = cost(problem, tree, policy)
    selection, ties = selection_summary(tree, res.sub.argmax_sets)
    adj = adjoint_recursive(problem, tree, policy, selection, trajectory=res.trajectory)
    adj2 = adjoint_explicit(problem, tree, policy, selection, trajectory=res.trajectory)
    cross = adjoint_crosscheck_error(adj, adj2)
    stat = check_stationarity(
        problem, tree, policy, selection, adj, tol=stationarity_tol
    )
    attained, _ = expect_under_selection(tree, selection, res.leaf_payload)
    conv = (
        convexity_sample(problem, tree, policy, adj, samples=convexity_samples, seed=seed)
        if convexity_samples
        else None
    )
    return Certificate(
        selection=selection,
        tie_report=ties,
        adjoint=adj,
        stationarity=stat,
        adjoint_crosscheck=cross,
        adjoint_tol=adjoint_tol,
        convexity=conv,
        directional=tuple(directional),
        selection_attains_cost=abs(attained - res.value),
        passed=stat.passed and cross <= adjoint_tol,
    )
