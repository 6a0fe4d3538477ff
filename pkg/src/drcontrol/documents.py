"""Problem/policy document schemas, canonical serialization, report assembly.

Documents are plain JSON. The canonical serializer fixes the key order and
formats numbers with repr (shortest round-trip decimal), so documents and
reports are byte-stable across runs; loading a canonically serialized
document reproduces it exactly.
"""

from __future__ import annotations

import json
from fractions import Fraction

import numpy as np

from .ambiguity import make_discrete_stage, moment_matched_gaussian_stage
from .errors import DocumentError, NodeCountMismatch
from .exprdsl import parse
from .model import ControlSet, Policy, Problem, Stage
from .solver import SolveOptions

_DOC_KEYS = ("horizon", "state_dim", "control_dim", "noise_dim", "x0",
             "terminal", "stages", "options")
_STAGE_KEYS = ("b", "sigma", "f", "control", "noise", "state_box")
_OPTION_KEYS = tuple(SolveOptions.__dataclass_fields__.keys())


def _need(doc, key, path, kind=None):
    if key not in doc:
        raise DocumentError(f"{path}.{key}" if path else key, "missing required field")
    val = doc[key]
    if kind is not None and not isinstance(val, kind):
        raise DocumentError(
            f"{path}.{key}" if path else key,
            f"expected {kind.__name__ if not isinstance(kind, tuple) else '/'.join(t.__name__ for t in kind)}",
        )
    return val


def _reject_unknown(doc, allowed, path):
    for key in doc:
        if key not in allowed:
            raise DocumentError(f"{path}.{key}" if path else key, "unknown field")


def _floats(val, path, length=None):
    try:
        arr = np.asarray(val, dtype=float)
    except (TypeError, ValueError):
        raise DocumentError(path, "expected a numeric array") from None
    if length is not None and arr.shape != (length,):
        raise DocumentError(path, f"expected {length} numbers, got shape {arr.shape}")
    return arr


def _control_set(doc, m, path):
    kind = _need(doc, "type", path, str)
    if kind == "unconstrained":
        _reject_unknown(doc, ("type",), path)
        return ControlSet.unconstrained(m)
    if kind == "box":
        _reject_unknown(doc, ("type", "lo", "hi"), path)
        lo = _floats(_need(doc, "lo", path), f"{path}.lo", m)
        hi = _floats(_need(doc, "hi", path), f"{path}.hi", m)
        if np.any(lo > hi):
            raise DocumentError(path, "box needs lo <= hi componentwise")
        return ControlSet(lo, hi)
    raise DocumentError(f"{path}.type", f"unknown control type {kind!r}")


def _noise(doc, d, path):
    kind = _need(doc, "type", path, str)
    labels = doc.get("labels")
    try:
        if kind == "discrete":
            _reject_unknown(doc, ("type", "points", "weights", "labels"), path)
            pts = np.atleast_2d(_floats(_need(doc, "points", path), f"{path}.points"))
            wts = np.atleast_2d(_floats(_need(doc, "weights", path), f"{path}.weights"))
            stage = make_discrete_stage(pts, wts, labels)
        elif kind == "gaussian_moment3":
            _reject_unknown(doc, ("type", "stds", "cap", "labels"), path)
            stds = np.atleast_2d(_floats(_need(doc, "stds", path), f"{path}.stds"))
            cap = float(_need(doc, "cap", path, (int, float)))
            stage = moment_matched_gaussian_stage(stds, cap, labels)
        else:
            raise DocumentError(f"{path}.type", f"unknown noise type {kind!r}")
    except DocumentError:
        raise
    except Exception as exc:  # validation errors from the ambiguity layer
        raise DocumentError(path, str(exc)) from exc
    if stage.dim != d:
        raise DocumentError(path, f"noise lives in R^{stage.dim}, document says R^{d}")
    return stage


def _parse_expr(text, dims, path):
    if not isinstance(text, str):
        raise DocumentError(path, "expected an expression string")
    try:
        return parse(text, dims)
    except Exception as exc:
        raise DocumentError(path, str(exc)) from exc


def problem_from_document(doc):
    """Build and validate a Problem from a parsed JSON document."""
    if not isinstance(doc, dict):
        raise DocumentError("", "document root must be an object")
    _reject_unknown(doc, _DOC_KEYS, "")
    N = _need(doc, "horizon", "", int)
    n = _need(doc, "state_dim", "", int)
    m = _need(doc, "control_dim", "", int)
    d = _need(doc, "noise_dim", "", int)
    if min(N, n, m, d) < 1:
        raise DocumentError("", "horizon and dimensions must be positive")
    x0 = _floats(_need(doc, "x0", ""), "x0", n)
    terminal = _parse_expr(_need(doc, "terminal", "", str), (n, 0, d, 0), "terminal")
    raw_stages = _need(doc, "stages", "", list)
    if len(raw_stages) != N:
        raise DocumentError("stages", f"expected {N} stages, got {len(raw_stages)}")
    stages = []
    for k, sdoc in enumerate(raw_stages):
        path = f"stages[{k}]"
        if not isinstance(sdoc, dict):
            raise DocumentError(path, "stage must be an object")
        _reject_unknown(sdoc, _STAGE_KEYS, path)
        dims = (n, m, d, k)
        b_raw = _need(sdoc, "b", path, list)
        if len(b_raw) != n:
            raise DocumentError(f"{path}.b", f"expected {n} expressions")
        drift = tuple(
            _parse_expr(t, dims, f"{path}.b[{i}]") for i, t in enumerate(b_raw)
        )
        s_raw = _need(sdoc, "sigma", path, list)
        if len(s_raw) != d:
            raise DocumentError(f"{path}.sigma", f"expected {d} channels")
        diffusion = []
        for l, chan in enumerate(s_raw):
            if not isinstance(chan, list) or len(chan) != n:
                raise DocumentError(
                    f"{path}.sigma[{l}]", f"expected {n} expressions"
                )
            diffusion.append(
                tuple(
                    _parse_expr(t, dims, f"{path}.sigma[{l}][{i}]")
                    for i, t in enumerate(chan)
                )
            )
        f_expr = _parse_expr(_need(sdoc, "f", path, str), dims, f"{path}.f")
        controls = _control_set(_need(sdoc, "control", path, dict), m, f"{path}.control")
        noise = _noise(_need(sdoc, "noise", path, dict), d, f"{path}.noise")
        box_raw = _need(sdoc, "state_box", path, list)
        if len(box_raw) != 2:
            raise DocumentError(f"{path}.state_box", "expected [lo, hi]")
        lo = _floats(box_raw[0], f"{path}.state_box[0]", n)
        hi = _floats(box_raw[1], f"{path}.state_box[1]", n)
        if np.any(lo >= hi):
            raise DocumentError(f"{path}.state_box", "needs lo < hi componentwise")
        stages.append(
            Stage(
                drift=drift,
                diffusion=tuple(diffusion),
                running_cost=f_expr,
                controls=controls,
                noise=noise,
                state_box=(lo, hi),
            )
        )
    if "options" in doc:
        _reject_unknown(doc["options"], _OPTION_KEYS, "options")
    return Problem(
        horizon=N,
        state_dim=n,
        control_dim=m,
        noise_dim=d,
        x0=x0,
        stages=tuple(stages),
        terminal=terminal,
    )


def options_from_document(doc, **overrides):
    """SolveOptions from the document's optional options block plus overrides."""
    fields = dict(doc.get("options", {}))
    fields.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return SolveOptions(**fields)
    except TypeError as exc:
        raise DocumentError("options", str(exc)) from exc


def load_problem_document(path):
    with open(path, "r", encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise DocumentError("", f"invalid JSON: {exc}") from exc
    return doc, problem_from_document(doc)


# --- canonical serialization ---------------------------------------------------


def _canon(value):
    if isinstance(value, dict):
        return {k: _canon(value[k]) for k in value}
    if isinstance(value, (list, tuple)):
        return [_canon(v) for v in value]
    if isinstance(value, (np.floating, float)):
        return float(value)
    if isinstance(value, (np.integer, int)):
        return int(value)
    return value


def canonical_document(doc):
    """Reorder a problem document into the canonical key order."""
    out = {}
    for key in _DOC_KEYS:
        if key not in doc:
            continue
        if key == "stages":
            out["stages"] = [
                {sk: _canon(s[sk]) for sk in _STAGE_KEYS if sk in s}
                for s in doc["stages"]
            ]
        else:
            out[key] = _canon(doc[key])
    return out


def dumps_document(doc):
    return json.dumps(canonical_document(doc), indent=2, ensure_ascii=False) + "\n"


# --- policy files -----------------------------------------------------------------


def policy_from_file(path, problem, tree):
    with open(path, "r", encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise DocumentError("", f"invalid JSON: {exc}") from exc
    return policy_from_lists(doc, problem, tree)


def policy_from_lists(doc, problem, tree):
    """Decode {"controls": [stage][node][component]} with shape checking.

    Node order is the build_tree contract: stage-major, lexicographic path
    order within a stage.
    """
    if not isinstance(doc, dict) or "controls" not in doc:
        raise DocumentError("controls", "missing required field")
    raw = doc["controls"]
    if not isinstance(raw, list) or len(raw) != problem.horizon:
        raise NodeCountMismatch(
            f"expected {problem.horizon} stages of controls, got "
            f"{len(raw) if isinstance(raw, list) else type(raw).__name__}"
        )
    arrays = []
    for k, stage_rows in enumerate(raw):
        arr = np.asarray(stage_rows, dtype=float)
        want = (tree.node_counts[k], problem.control_dim)
        if arr.shape != want:
            raise NodeCountMismatch(
                f"controls[{k}]: expected shape {want} "
                f"(stage-major, lexicographic path order), got {arr.shape}"
            )
        arrays.append(arr)
    return Policy(tuple(arrays))


def policy_to_lists(policy):
    return {"controls": [c.tolist() for c in policy.controls]}


def save_policy_file(path, policy):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(policy_to_lists(policy), fh, indent=2)
        fh.write("\n")


# --- reports -----------------------------------------------------------------------


def rational_string(x, max_den=10 ** 6, tol=1e-12):
    """Small-denominator rational within tol of x, or None."""
    if not np.isfinite(x):
        return None
    frac = Fraction(x).limit_denominator(max_den)
    if abs(x - float(frac)) <= tol * max(1.0, abs(x)):
        return f"{frac.numerator}/{frac.denominator}"
    return None


def selection_table(tie_report):
    return [
        {
            "noise_stage": s.noise_stage,
            "label": s.canonical_label,
            "canonical_index": s.canonical_index,
            "tie_multiplicity": s.max_multiplicity,
            "tied_nodes": s.tied_nodes,
            "node_count": s.node_count,
        }
        for s in tie_report.stages
    ]


def certificate_block(cert):
    block = {
        "passed": bool(cert.passed),
        "stationarity": {
            "tol": cert.stationarity.tol,
            "max_residual": cert.stationarity.max_residual,
            "positive_nodes": cert.stationarity.positive_nodes,
            "zero_probability_nodes": cert.stationarity.skipped_zero_prob_nodes,
            "witnesses": [
                {"stage": k, "node": i, "residual": r}
                for k, i, r in cert.stationarity.witnesses
            ],
        },
        "adjoint_crosscheck": {
            "max_error": cert.adjoint_crosscheck,
            "tol": cert.adjoint_tol,
        },
        "selection_attains_cost_error": cert.selection_attains_cost,
        "selection_table": selection_table(cert.tie_report),
    }
    if cert.convexity is not None:
        block["convexity"] = {
            "verdict": cert.convexity.label,
            "samples": cert.convexity.samples,
            "seed": cert.convexity.seed,
            "witness": cert.convexity.witness,
        }
    if cert.directional:
        block["directional"] = [directional_block(r) for r in cert.directional]
    return block


def directional_block(rep):
    return {
        "eps": list(rep.eps),
        "g": list(rep.g),
        "sup_value": rep.sup_value,
        "abs_errors": list(rep.errors),
        "order_estimate": rep.order_estimate,
        "family_min": rep.family_min,
        "family_min_after_tie_search": rep.family_min_after_tie_search,
        "nonnegative": bool(rep.passed_nonnegativity),
    }


def feedback_block(solution):
    out = []
    for k, fit in enumerate(solution.stage_fits):
        out.append(
            {
                "stage": k,
                "basis": {
                    "kind": "chebyshev",
                    "lo": fit.basis.lo.tolist(),
                    "hi": fit.basis.hi.tolist(),
                    "degree": fit.basis.degree,
                    "exponents": fit.basis.exponents.tolist(),
                },
                "nodes": [c.tolist() for c in fit.feedback_coefs],
                "fit_residual": fit.feedback_residual,
            }
        )
    return out


def solution_block(solution):
    return {
        "method": solution.method,
        "J": solution.value,
        "J_rational": rational_string(solution.value),
        "selection_table": selection_table(solution.tie_report),
        "policy": policy_to_lists(solution.policy)["controls"],
        "feedback": feedback_block(solution),
        "value_fit_residuals": [f.value_residual for f in solution.stage_fits],
        "certificate": certificate_block(solution.certificate),
        "diagnostics": _canon(solution.diagnostics),
    }


def options_block(options):
    return {k: getattr(options, k) for k in _OPTION_KEYS}


def dumps_report(report):
    return json.dumps(_canon(report), indent=2, ensure_ascii=False) + "\n"


def write_report(report, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dumps_report(report))
