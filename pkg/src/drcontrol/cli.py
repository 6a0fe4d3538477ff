"""Command line interface: solve | check | grad | eval.

Exit codes: 0 on success / certified result, 2 on certificate failure or
solver disagreement, 1 on input or numerical errors.
"""

from __future__ import annotations

import argparse
import os
import sys
import time


def _configure_threads():
    """DRCONTROL_THREADS caps the numerics thread pools; set before numpy loads."""
    v = os.environ.get("DRCONTROL_THREADS")
    if v:
        for var in (
            "OMP_NUM_THREADS",
            "OPENBLAS_NUM_THREADS",
            "MKL_NUM_THREADS",
            "NUMEXPR_NUM_THREADS",
        ):
            os.environ.setdefault(var, v)


_configure_threads()

import numpy as np

from . import __version__
from .documents import (
    certificate_block,
    directional_block,
    dumps_report,
    load_problem_document,
    options_block,
    options_from_document,
    policy_from_file,
    rational_string,
    selection_table,
    solution_block,
    write_report,
)
from .errors import DRControlError
from .maxprinciple import (
    adjoint_crosscheck_error,
    adjoint_explicit,
    adjoint_recursive,
    certify,
    directional_derivative_check,
    worst_case_selection,
)
from .model import cost, validate_problem
from .solver import solve_dp, solve_mp_backward

AGREEMENT_TOL = 1e-9


def _print_selection(table, out):
    out.write("worst-case selection (descending stage, as in the backward pass):\n")
    for row in reversed(table):
        tie = (
            f"  [tie x{row['tie_multiplicity']} at {row['tied_nodes']}/{row['node_count']} nodes]"
            if row["tie_multiplicity"] > 1
            else ""
        )
        out.write(f"  W_{row['noise_stage']}: {row['label']}{tie}\n")


def _print_value(J, out):
    rat = rational_string(J)
    out.write(f"J = {J!r}" + (f"  (= {rat})" if rat else "") + "\n")


def _report_header(command, args, options=None):
    report = {
        "tool": "drcontrol",
        "version": __version__,
        "command": command,
        "document": args.document,
    }
    if options is not None:
        report["options"] = options_block(options)
    return report


def _finish(report, args, t0, exit_code, out):
    report["timing"] = {"seconds": time.perf_counter() - t0}
    if args.out:
        write_report(report, args.out)
        out.write(f"report written to {args.out}\n")
    return exit_code


def cmd_solve(args, out):
    t0 = time.perf_counter()
    doc, problem = load_problem_document(args.document)
    validate_problem(problem)
    options = options_from_document(
        doc, degree=args.degree, seed=args.seed, leaf_budget=args.budget
    )
    tree = problem.tree(budget=options.leaf_budget)
    report = _report_header("solve", args, options)
    report["method"] = args.method
    stat_tol = args.tol if args.tol else 1e-8

    solutions = {}
    if args.method in ("dp", "both"):
        solutions["dp"] = solve_dp(problem, tree, options)
    if args.method in ("mp", "both"):
        solutions["mp"] = solve_mp_backward(problem, tree, options)
    primary = solutions.get("dp") or solutions["mp"]

    ok = True
    for name, sol in solutions.items():
        report[name] = solution_block(sol)
        cert_ok = (
            sol.certificate.stationarity.max_residual <= stat_tol
            and sol.certificate.adjoint_crosscheck <= sol.certificate.adjoint_tol
        )
        ok = ok and cert_ok
    if len(solutions) == 2:
        dp, mp = solutions["dp"], solutions["mp"]
        j_diff = abs(dp.value - mp.value)
        pol_diff = max(
            float(np.max(np.abs(a - b)))
            for a, b in zip(dp.policy.controls, mp.policy.controls)
        )
        agree = j_diff <= AGREEMENT_TOL
        report["agreement"] = {
            "J_abs_diff": j_diff,
            "policy_sup_diff": pol_diff,
            "tol": AGREEMENT_TOL,
            "ok": agree,
        }
        ok = ok and agree
        out.write(f"solver agreement: |J_dp - J_mp| = {j_diff:.3e}\n")

    _print_value(primary.value, out)
    _print_selection(selection_table(primary.tie_report), out)
    cert = primary.certificate
    out.write(
        f"certificate: stationarity max residual {cert.stationarity.max_residual:.3e} "
        f"(tol {stat_tol:g}), adjoint cross-check {cert.adjoint_crosscheck:.3e}\n"
    )
    return _finish(report, args, t0, 0 if ok else 2, out)


def cmd_check(args, out):
    t0 = time.perf_counter()
    doc, problem = load_problem_document(args.document)
    validate_problem(problem)
    options = options_from_document(doc)
    tree = problem.tree(budget=options.leaf_budget)
    policy = policy_from_file(args.policy, problem, tree)
    stat_tol = args.tol if args.tol else 1e-8
    cert = certify(
        problem, tree, policy, stationarity_tol=stat_tol, seed=options.seed
    )
    res = cost(problem, tree, policy)
    report = _report_header("check", args, options)
    report["policy_file"] = args.policy
    report["J"] = res.value
    report["J_rational"] = rational_string(res.value)
    report["certificate"] = certificate_block(cert)
    _print_value(res.value, out)
    _print_selection(selection_table(cert.tie_report), out)
    out.write(
        f"stationarity max residual {cert.stationarity.max_residual:.3e} "
        f"(tol {stat_tol:g}); adjoint cross-check {cert.adjoint_crosscheck:.3e}\n"
    )
    if not cert.passed:
        for k, node, r in cert.stationarity.witnesses:
            out.write(f"  witness: stage {k} node {node} residual {r:.3e}\n")
    out.write("certificate PASSED\n" if cert.passed else "certificate FAILED\n")
    return _finish(report, args, t0, 0 if cert.passed else 2, out)


def cmd_grad(args, out):
    t0 = time.perf_counter()
    doc, problem = load_problem_document(args.document)
    validate_problem(problem)
    options = options_from_document(doc)
    tree = problem.tree(budget=options.leaf_budget)
    policy = policy_from_file(args.policy, problem, tree)
    direction = policy_from_file(args.direction, problem, tree)
    eps_list = [float(tok) for tok in args.eps.split(",") if tok]
    rep = directional_derivative_check(
        problem, tree, policy, direction, eps_list, tol=args.tol or 1e-9
    )
    report = _report_header("grad", args, options)
    report["policy_file"] = args.policy
    report["direction_file"] = args.direction
    report["directional"] = directional_block(rep)
    out.write(f"S = sup over tied measures of E[first variation] = {rep.sup_value!r}\n")
    for eps, g, err in zip(rep.eps, rep.g, rep.errors):
        out.write(f"  eps={eps:g}: g(eps)={g!r}  |g-S|={err:.3e}\n")
    if rep.order_estimate is not None:
        out.write(f"convergence order estimate: {rep.order_estimate:.3f}\n")
    out.write(
        f"variational inequality: min over direction family = "
        f"{rep.family_min_after_tie_search!r} "
        f"({'PASS' if rep.passed_nonnegativity else 'FAIL'})\n"
    )
    return _finish(report, args, t0, 0 if rep.passed_nonnegativity else 2, out)


def cmd_eval(args, out):
    t0 = time.perf_counter()
    doc, problem = load_problem_document(args.document)
    validate_problem(problem)
    options = options_from_document(doc)
    tree = problem.tree(budget=options.leaf_budget)
    policy = policy_from_file(args.policy, problem, tree)
    res = cost(problem, tree, policy)
    selection, ties = worst_case_selection(problem, tree, policy)
    report = _report_header("eval", args, options)
    report["policy_file"] = args.policy
    report["J"] = res.value
    report["J_rational"] = rational_string(res.value)
    report["selection_table"] = selection_table(ties)
    _print_value(res.value, out)
    _print_selection(selection_table(ties), out)
    return _finish(report, args, t0, 0, out)


def build_parser():
    ap = argparse.ArgumentParser(
        prog="drcontrol",
        description="Distributionally robust optimal control: solve and certify.",
    )
    ap.add_argument("--version", action="version", version=f"drcontrol {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("solve", help="solve a problem document and certify the result")
    p.add_argument("document")
    p.add_argument("--method", choices=("dp", "mp", "both"), default="both")
    p.add_argument("--out", help="write the JSON report here")
    p.add_argument("--tol", type=float, help="stationarity tolerance (default 1e-8)")
    p.add_argument("--degree", type=int, help="collocation degree (default 4)")
    p.add_argument("--seed", type=int, help="sampler seed")
    p.add_argument("--budget", type=int, help="leaf budget (default 1e7)")
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("check", help="certify a given policy file")
    p.add_argument("document")
    p.add_argument("policy")
    p.add_argument("--out")
    p.add_argument("--tol", type=float, help="stationarity tolerance (default 1e-8)")
    p.set_defaults(func=cmd_check)

    p = sub.add_parser("grad", help="directional-derivative report along a direction")
    p.add_argument("document")
    p.add_argument("policy")
    p.add_argument("direction")
    p.add_argument("--eps", default="1e-2,1e-3,1e-4", help="comma-separated epsilons")
    p.add_argument("--out")
    p.add_argument("--tol", type=float, help="nonnegativity tolerance (default 1e-9)")
    p.set_defaults(func=cmd_grad)

    p = sub.add_parser("eval", help="evaluate J and the worst-case selection")
    p.add_argument("document")
    p.add_argument("policy")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)
    return ap


def main(argv=None, out=None):
    out = out or sys.stdout
    args = build_parser().parse_args(argv)
    try:
        return args.func(args, out)
    except DRControlError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
