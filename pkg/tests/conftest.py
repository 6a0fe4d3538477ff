import pathlib

import numpy as np
import pytest

from drcontrol.documents import load_problem_document
from drcontrol.model import rollout

PROBLEMS = pathlib.Path(__file__).resolve().parent.parent / "problems"


@pytest.fixture(scope="session")
def ex1():
    _, problem = load_problem_document(PROBLEMS / "ex1.json")
    return problem, problem.tree()


@pytest.fixture(scope="session")
def ex2():
    _, problem = load_problem_document(PROBLEMS / "ex2.json")
    return problem, problem.tree()


@pytest.fixture(scope="session")
def ex3():
    _, problem = load_problem_document(PROBLEMS / "ex3.json")
    return problem, problem.tree()


def ex1_star(problem, tree):
    """Paper-optimal feedback for the two-candidate Gaussian instance."""
    gains = {0: -0.25, 1: -0.1, 2: -0.1, 3: -0.25}
    return rollout(problem, tree, lambda k, x, t: gains[k] * x)


def ex2_star(problem, tree):
    gains = {0: -0.2, 1: -1.0 / 11.0, 2: -1.0 / 11.0, 3: -0.2}
    return rollout(problem, tree, lambda k, x, t: gains[k] * x)


def ex3_star(problem, tree):
    def fb(k, x, t):
        if k == 0:
            return np.ones_like(x)
        if k == 1:
            w1 = t.noise_at(1)[:, :1]
            return -0.6 * np.sin(0.5 * np.pi * w1) * x - 0.4 * x
        return np.zeros_like(x)

    return rollout(problem, tree, fb)
