"""Batched Chebyshev bases over state boxes, for per-node polynomial fits."""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np


def total_degree_exponents(n, degree):
    """Multi-indices with |alpha| <= degree in graded lexicographic order."""
    exps = [
        e
        for e in itertools.product(range(degree + 1), repeat=n)
        if sum(e) <= degree
    ]
    exps.sort(key=lambda e: (sum(e), e))
    return np.array(exps, dtype=int)


@dataclass(frozen=True, eq=False)
class ChebBasis:
    """Tensor Chebyshev basis of total degree <= degree over a box [lo, hi]."""

    lo: np.ndarray
    hi: np.ndarray
    degree: int
    exponents: np.ndarray

    @property
    def n_dims(self):
        return self.lo.shape[0]

    @property
    def size(self):
        return self.exponents.shape[0]

    def to_unit(self, X):
        return (2.0 * X - self.lo - self.hi) / (self.hi - self.lo)


def make_basis(lo, hi, degree):
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    return ChebBasis(lo, hi, int(degree), total_degree_exponents(lo.shape[0], degree))


def _cheb_T(xi, dmax):
    """First-kind values T_0..T_dmax, stacked on axis 0; valid for any xi."""
    T = np.empty((dmax + 1,) + xi.shape)
    T[0] = 1.0
    if dmax >= 1:
        T[1] = xi
    for k in range(2, dmax + 1):
        T[k] = 2.0 * xi * T[k - 1] - T[k - 2]
    return T


def _cheb_T_dT(xi, dmax):
    """T_k and the derivatives T'_k = k U_{k-1} via the second-kind recurrence."""
    T = _cheb_T(xi, dmax)
    U = np.empty((dmax + 1,) + xi.shape)
    U[0] = 1.0
    if dmax >= 1:
        U[1] = 2.0 * xi
    for k in range(2, dmax + 1):
        U[k] = 2.0 * xi * U[k - 1] - U[k - 2]
    dT = np.empty_like(T)
    dT[0] = 0.0
    for k in range(1, dmax + 1):
        dT[k] = k * U[k - 1]
    return T, dT


def design(basis, X):
    """Design matrix of basis values at X (..., n) -> (..., size)."""
    xi = basis.to_unit(np.asarray(X, dtype=float))
    axes_T = [_cheb_T(xi[..., a], basis.degree) for a in range(basis.n_dims)]
    cols = []
    for e in basis.exponents:
        col = axes_T[0][e[0]]
        for a in range(1, basis.n_dims):
            col = col * axes_T[a][e[a]]
        cols.append(col)
    return np.stack(cols, axis=-1)


def design_grad(basis, X):
    """Basis values and gradients at X: (..., size) and (..., size, n)."""
    X = np.asarray(X, dtype=float)
    xi = basis.to_unit(X)
    scale = 2.0 / (basis.hi - basis.lo)
    axes = [_cheb_T_dT(xi[..., a], basis.degree) for a in range(basis.n_dims)]
    vals, grads = [], []
    for e in basis.exponents:
        col = axes[0][0][e[0]]
        for a in range(1, basis.n_dims):
            col = col * axes[a][0][e[a]]
        g = []
        for a in range(basis.n_dims):
            ga = axes[a][1][e[a]] * scale[a]
            for b_ax in range(basis.n_dims):
                if b_ax != a:
                    ga = ga * axes[b_ax][0][e[b_ax]]
            g.append(ga)
        vals.append(col)
        grads.append(np.stack(g, axis=-1))
    return np.stack(vals, axis=-1), np.stack(grads, axis=-2)


def collocation_points(lo, hi, points_per_axis):
    """Chebyshev-distributed tensor grid over the box, shape (P^n, n)."""
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    P = int(points_per_axis)
    theta = (2.0 * np.arange(P) + 1.0) * np.pi / (2.0 * P)
    xi = np.sort(np.cos(theta))
    axes = [0.5 * (lo[a] + hi[a]) + 0.5 * (hi[a] - lo[a]) * xi for a in range(lo.shape[0])]
    pts = np.array(list(itertools.product(*axes)))
    return pts.reshape(-1, lo.shape[0])


def fit_many(basis, X, Y):
    """Least-squares fit of many functions sharing the sample points X.

    X is (P, n); Y is (..., P). Returns (coefs (..., size), max_abs_residual).
    """
    D = design(basis, X)                       # (P, B)
    flatY = np.asarray(Y, dtype=float).reshape(-1, X.shape[0])
    coefs, *_ = np.linalg.lstsq(D, flatY.T, rcond=None)
    resid = float(np.max(np.abs(D @ coefs - flatY.T))) if flatY.size else 0.0
    coefs = coefs.T.reshape(np.shape(Y)[:-1] + (basis.size,))
    return coefs, resid


def eval_fit(basis, coefs, X):
    """Evaluate per-row fits: coefs (..., size) against X (..., n)."""
    D = design(basis, X)
    return np.einsum("...b,...b->...", D, coefs)


def eval_fit_grad(basis, coefs, X):
    """Values and gradients of per-row fits at X: (...,) and (..., n)."""
    D, dD = design_grad(basis, X)
    v = np.einsum("...b,...b->...", D, coefs)
    g = np.einsum("...bn,...b->...n", dD, coefs)
    return v, g
