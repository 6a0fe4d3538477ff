"""Per-stage ambiguity sets, scenario trees, and the sublinear expectation engine.

A stage holds a finite noise support in R^d together with a finite list of
candidate probability vectors over that support. The product of the stage
supports is a scenario tree; nodes at stage k are paths (j_1, ..., j_k) of
support indices in lexicographic order, so node arithmetic is pure integer
arithmetic (child of node i under branch j is i * S + j).

The worst-case (sublinear) expectation of a leaf payload is evaluated by the
backward recursion: condition on each node, average the children under every
candidate weight vector, and keep the maximum. Ties within a relative
tolerance are tracked, because the maximizing measure need not be unique and
the tie structure is part of every downstream certificate.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import (
    BudgetExceeded,
    DuplicateSupportPoint,
    EmptySupport,
    CapTooSmall,
    NegativeWeight,
    WeightSumNotOne,
)

WEIGHT_SUM_TOL = 1e-12
TIE_REL_TOL = 1e-9
TIE_ABS_TOL = 1e-12
DEFAULT_LEAF_BUDGET = 10 ** 7


def _freeze(arr):
    arr = np.ascontiguousarray(arr, dtype=float)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class StageAmbiguity:
    """One stage's noise support (S, d) and candidate weight vectors (K, S)."""

    support: np.ndarray
    weights: np.ndarray
    labels: tuple

    @property
    def n_points(self):
        return self.support.shape[0]

    @property
    def n_candidates(self):
        return self.weights.shape[0]

    @property
    def dim(self):
        return self.support.shape[1]

    def means(self):
        """Per-candidate mean vectors, shape (K, d)."""
        return self.weights @ self.support


def make_discrete_stage(support, weights, labels=None):
    """Validate and build a StageAmbiguity from raw support/weight data."""
    support = np.atleast_2d(np.asarray(support, dtype=float))
    if support.size == 0:
        raise EmptySupport("stage support is empty")
    if support.ndim != 2:
        raise ValueError("support must be a list of points (S, d)")
    weights = np.asarray(weights, dtype=float)
    if weights.size == 0:
        raise EmptySupport("stage has no candidate weight vectors")
    weights = np.atleast_2d(weights)
    if weights.shape[1] != support.shape[0]:
        raise ValueError(
            f"weight vectors have length {weights.shape[1]}, "
            f"support has {support.shape[0]} points"
        )
    if np.any(weights < 0):
        k, j = np.argwhere(weights < 0)[0]
        raise NegativeWeight(f"weights[{k}][{j}] = {weights[k, j]} is negative")
    sums = weights.sum(axis=1)
    bad = np.argwhere(np.abs(sums - 1.0) > WEIGHT_SUM_TOL)
    if bad.size:
        k = int(bad[0][0])
        raise WeightSumNotOne(f"weights[{k}] sums to {sums[k]!r}")
    seen = {}
    for idx, pt in enumerate(support):
        key = tuple(pt.tolist())
        if key in seen:
            raise DuplicateSupportPoint(
                f"support points {seen[key]} and {idx} are both {key}"
            )
        seen[key] = idx
    if labels is None:
        labels = tuple(f"theta[{k}]" for k in range(weights.shape[0]))
    else:
        labels = tuple(str(s) for s in labels)
        if len(labels) != weights.shape[0]:
            raise ValueError("labels and weights length mismatch")
    return StageAmbiguity(_freeze(support), _freeze(weights), labels)


def moment_matched_gaussian_stage(stds, cap, labels=None):
    """Three-point-per-axis discrete stage matching centered product Gaussians.

    Each candidate is a vector of per-axis standard deviations. The support is
    the tensor product of {-cap, 0, +cap} per axis; the per-axis weights
    (s^2/(2c^2), 1 - s^2/c^2, s^2/(2c^2)) reproduce mean 0 and variance s^2
    exactly, and axes are independent, so any payload that is quadratic in the
    noise has the same expectation as under the Gaussian.
    """
    stds = np.atleast_2d(np.asarray(stds, dtype=float))
    if stds.size == 0:
        raise EmptySupport("no candidate standard deviations")
    if np.any(stds <= 0):
        raise ValueError("standard deviations must be positive")
    c = float(cap)
    if c <= 0:
        raise CapTooSmall("cap must be positive")
    center = 1.0 - stds ** 2 / c ** 2
    if np.any(center < 0):
        k, l = np.argwhere(center < 0)[0]
        raise CapTooSmall(
            f"cap {c} too small for std {stds[k, l]} (center mass would be negative)"
        )
    d = stds.shape[1]
    axis_points = (-c, 0.0, c)
    support = np.array(list(itertools.product(axis_points, repeat=d)))
    weights = []
    for sig in stds:
        p_out = sig ** 2 / (2 * c ** 2)
        axis_w = np.stack([p_out, 1.0 - sig ** 2 / c ** 2, p_out], axis=1)  # (d, 3)
        joint = np.ones(1)
        for l in range(d):
            joint = (joint[:, None] * axis_w[l][None, :]).reshape(-1)
        weights.append(joint)
    weights = np.array(weights)
    # kill the tiny negative/non-unit roundoff from the products
    weights = np.clip(weights, 0.0, None)
    weights /= weights.sum(axis=1, keepdims=True)
    if labels is None:
        labels = tuple(
            "F_(" + ",".join(f"{s:.6g}" for s in sig) + ")" for sig in stds
        )
    return make_discrete_stage(support, weights, labels)


@dataclass(frozen=True, eq=False)
class ScenarioTree:
    """Product tree of per-stage supports; see module docstring for indexing."""

    stages: tuple
    node_counts: tuple  # counts for stages 0..N

    @property
    def n_stages(self):
        return len(self.stages)

    def branching(self, k):
        """Number of children of a stage-k node (support size of stage k)."""
        return self.stages[k].n_points

    def noise_at(self, k):
        """W_k value attached to each stage-k node, shape (count_k, d); k >= 1."""
        stage = self.stages[k - 1]
        idx = np.arange(self.node_counts[k]) % stage.n_points
        return stage.support[idx]

    def branch_index(self, k, i):
        """Stage-i branch indices (j_i) for all stage-k nodes, 1 <= i <= k."""
        trailing = 1
        for t in range(i, k):
            trailing *= self.stages[t].n_points
        return (np.arange(self.node_counts[k]) // trailing) % self.stages[i - 1].n_points

    def path_noise(self, k):
        """Dict {i: (count_k, d) array of W_i} for all noise stages i <= k."""
        out = {}
        for i in range(1, k + 1):
            out[i] = self.stages[i - 1].support[self.branch_index(k, i)]
        return out

    def parents(self, k):
        """Parent node index at stage k-1 for each stage-k node."""
        return np.arange(self.node_counts[k]) // self.stages[k - 1].n_points


def build_tree(stages, budget=DEFAULT_LEAF_BUDGET):
    """Assemble a ScenarioTree; refuses trees with more than ``budget`` leaves."""
    stages = tuple(stages)
    if len(stages) < 1:
        raise ValueError("a tree needs at least one stage")
    leaves = 1
    for s in stages:
        leaves *= s.n_points
    if leaves > budget:
        raise BudgetExceeded(
            f"tree would have {leaves} leaves, budget is {budget}", size=leaves
        )
    counts = [1]
    for s in stages:
        counts.append(counts[-1] * s.n_points)
    return ScenarioTree(stages, tuple(counts))


@dataclass(frozen=True, eq=False)
class NodeField:
    """Per-node values for a contiguous range of stages (first_stage onward)."""

    first_stage: int
    values: tuple  # one array per stage; leading axis is the node axis

    def stage(self, k):
        return self.values[k - self.first_stage]


@dataclass(frozen=True, eq=False)
class Selection:
    """Per-node weight-vector choices for stages 0..N-1: one P in the family."""

    indices: tuple  # indices[k]: int array (count_k,)

    def stage(self, k):
        return self.indices[k]


def validate_selection(tree, selection):
    if len(selection.indices) != tree.n_stages:
        raise ValueError("selection must cover stages 0..N-1")
    for k in range(tree.n_stages):
        idx = selection.indices[k]
        if idx.shape != (tree.node_counts[k],):
            raise ValueError(f"selection stage {k} has wrong node count")
        if np.any(idx < 0) or np.any(idx >= tree.stages[k].n_candidates):
            raise ValueError(f"selection stage {k} has out-of-range candidate index")


@dataclass(frozen=True, eq=False)
class SublinearResult:
    value: float
    conditionals: NodeField          # stages 0..N; stage N echoes the payload
    argmax_sets: tuple               # argmax_sets[k]: bool array (count_k, K_k)

    def canonical_selection(self):
        """Lowest tied candidate index at every node."""
        return Selection(tuple(np.argmax(m, axis=1) for m in self.argmax_sets))


def _candidate_averages(tree, k, child_values):
    """Child averages under every stage-k candidate: (count_k, K) array.

    Accepts child_values with optional leading batch axes; the node axis must
    be the last one. Summation runs in ascending support order.
    """
    stage = tree.stages[k]
    S = stage.n_points
    resh = child_values.reshape(child_values.shape[:-1] + (tree.node_counts[k], S))
    # (..., count, S) x (K, S) summed over S; explicit sum keeps the order fixed
    return np.einsum("...ns,ks->...nk", resh, stage.weights)


def _tie_mask(cands, rel_tol, abs_tol):
    best = cands.max(axis=-1, keepdims=True)
    slack = np.maximum(rel_tol * np.abs(best), abs_tol)
    return cands >= best - slack


def sublinear_backward(tree, leaf_values, rel_tol=TIE_REL_TOL, abs_tol=TIE_ABS_TOL):
    """Nested worst-case expectation of a leaf payload with maximizer tracking.

    Returns a SublinearResult whose conditionals[k] realize the stage-k
    conditional sublinear expectation and whose argmax_sets mark every
    candidate within tolerance of the nodewise maximum.
    """
    leaf_values = np.asarray(leaf_values, dtype=float)
    if leaf_values.shape != (tree.node_counts[-1],):
        raise ValueError(
            f"leaf payload has shape {leaf_values.shape}, "
            f"expected ({tree.node_counts[-1]},)"
        )
    conds = [None] * (tree.n_stages + 1)
    ties = [None] * tree.n_stages
    conds[tree.n_stages] = leaf_values
    current = leaf_values
    for k in range(tree.n_stages - 1, -1, -1):
        cands = _candidate_averages(tree, k, current)
        ties[k] = _tie_mask(cands, rel_tol, abs_tol)
        current = cands.max(axis=-1)
        conds[k] = current
    return SublinearResult(
        value=float(current[0]),
        conditionals=NodeField(0, tuple(conds)),
        argmax_sets=tuple(ties),
    )


def worst_case_value(tree, leaf_values):
    """Root sublinear expectation only; supports leading batch axes."""
    current = np.asarray(leaf_values, dtype=float)
    for k in range(tree.n_stages - 1, -1, -1):
        current = _candidate_averages(tree, k, current).max(axis=-1)
    return current[..., 0]


def expect_under_selection(tree, selection, leaf_values):
    """Classical conditional expectations under one selection P.

    Returns (value, NodeField of conditionals over stages 0..N). Supports leaf
    payloads with leading batch axes (node axis last).
    """
    validate_selection(tree, selection)
    leaf_values = np.asarray(leaf_values, dtype=float)
    conds = [None] * (tree.n_stages + 1)
    conds[tree.n_stages] = leaf_values
    current = leaf_values
    for k in range(tree.n_stages - 1, -1, -1):
        cands = _candidate_averages(tree, k, current)
        idx = selection.indices[k]
        current = np.take_along_axis(
            cands, np.broadcast_to(idx[:, None], cands.shape[:-1] + (1,)), axis=-1
        )[..., 0]
        conds[k] = current
    value = current[..., 0] if current.ndim else float(current)
    if np.ndim(value) == 0:
        value = float(value)
    return value, NodeField(0, tuple(conds))


def node_probabilities(tree, selection):
    """Path probability of every node under a selection; stage sums are 1."""
    validate_selection(tree, selection)
    probs = [np.ones(1)]
    for k in range(tree.n_stages):
        stage = tree.stages[k]
        w = stage.weights[selection.indices[k]]        # (count_k, S)
        probs.append((probs[-1][:, None] * w).reshape(-1))
    return NodeField(0, tuple(probs))


def refine_sup_over_ties(tree, argmax_sets, leaf_values2):
    """Maximize a secondary payload over the measures tied for the primary one.

    ``argmax_sets`` must come from sublinear_backward on the primary payload.
    At every node only the tied candidates are admissible; the recursion picks
    the one maximizing the secondary conditional expectation, which attains
    sup over all tied selections by rectangularity. Returns (value, Selection).
    """
    leaf_values2 = np.asarray(leaf_values2, dtype=float)
    current = leaf_values2
    chosen = [None] * tree.n_stages
    for k in range(tree.n_stages - 1, -1, -1):
        cands = _candidate_averages(tree, k, current)
        masked = np.where(argmax_sets[k], cands, -np.inf)
        chosen[k] = np.argmax(masked, axis=-1)
        current = masked.max(axis=-1)
    return float(current[0]), Selection(tuple(chosen))
