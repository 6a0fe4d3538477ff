"""Distributionally robust discrete-time optimal control on scenario trees.

Solves min-over-controls of a worst-case (sublinear) expected cost over
rectangular ambiguity sets, by robust dynamic programming and by a backward
maximum-principle algorithm, and certifies solutions through adjoint
equations, Hamiltonian stationarity, and variational-derivative checks.

Submodules are imported lazily so that CLI startup can configure numerics
first; ``from drcontrol import solve_dp`` works as usual.
"""

__version__ = "0.1.0"

_EXPORTS = {
    # ambiguity
    "StageAmbiguity": "ambiguity",
    "ScenarioTree": "ambiguity",
    "NodeField": "ambiguity",
    "Selection": "ambiguity",
    "make_discrete_stage": "ambiguity",
    "moment_matched_gaussian_stage": "ambiguity",
    "build_tree": "ambiguity",
    "sublinear_backward": "ambiguity",
    "expect_under_selection": "ambiguity",
    "node_probabilities": "ambiguity",
    "refine_sup_over_ties": "ambiguity",
    "worst_case_value": "ambiguity",
    # expression DSL
    "Env": "exprdsl",
    "parse": "exprdsl",
    "print_expr": "exprdsl",
    "evaluate": "exprdsl",
    "eval_with_partials": "exprdsl",
    # model
    "Problem": "model",
    "Stage": "model",
    "ControlSet": "model",
    "Policy": "model",
    "Trajectory": "model",
    "validate_problem": "model",
    "simulate": "model",
    "cost": "model",
    "variational_state": "model",
    "gateaux_term": "model",
    "policy_from_arrays": "model",
    # maximum principle
    "Adjoint": "maxprinciple",
    "Certificate": "maxprinciple",
    "worst_case_selection": "maxprinciple",
    "adjoint_recursive": "maxprinciple",
    "adjoint_explicit": "maxprinciple",
    "hamiltonian": "maxprinciple",
    "hamiltonian_u": "maxprinciple",
    "check_stationarity": "maxprinciple",
    "directional_derivative_check": "maxprinciple",
    "convexity_sample": "maxprinciple",
    "certify": "maxprinciple",
    # solver
    "SolveOptions": "solver",
    "Solution": "solver",
    "solve_dp": "solver",
    "solve_mp_backward": "solver",
    "brute_force_oracle": "solver",
    # documents
    "problem_from_document": "documents",
    "load_problem_document": "documents",
    "policy_from_file": "documents",
    "save_policy_file": "documents",
}

__all__ = sorted(_EXPORTS) + ["__version__"]


def __getattr__(name):
    if name in _EXPORTS:
        import importlib

        module = importlib.import_module(f".{_EXPORTS[name]}", __name__)
        return getattr(module, name)
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")


def __dir__():
    return __all__
