"""Closed-form theory targets for the known-answer experiments.

Early-stopping convention: gradient descent on ``(1/(2n)) ||y - X theta||^2``
from ``theta = 0`` with step ``eta``, i.e.
``theta <- theta - (eta / n) X^T (X theta - y)``. Its step-``t`` iterate is
the unique minimiser of ``(1/n) ||y - X theta||^2 + theta^T Lambda_t theta``
with ``Lambda_t = V S ((I - eta S)^-t - I)^-1 V^T`` where
``(1/n) X^T X = V S V^T``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numkernel


class StepSizeError(ValueError):
    pass


@dataclass(frozen=True)
class TheoryLambda:
    matrix: np.ndarray
    t: int
    eta: float

    @property
    def p(self) -> int:
        return self.matrix.shape[0]


def _xy(X, y):
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float).reshape(-1)
    if X.ndim != 2 or X.shape[0] != y.size:
        raise numkernel.DimensionError(f"X {X.shape} and y {y.shape} disagree")
    return X, y


def ridge_closed_form(X, y, lam: float) -> np.ndarray:
    """``(X^T X + lam I)^-1 X^T y``."""
    X, y = _xy(X, y)
    A = X.T @ X + lam * np.eye(X.shape[1])
    return numkernel.solve_spd(A, X.T @ y)


def gram(X) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    return X.T @ X / X.shape[0]


def ali_eigen_weights(s, eta: float, t: int) -> np.ndarray:
    """Eigenvalues of Lambda_t for Gram eigenvalues ``s`` (zero where s == 0)."""
    s = np.asarray(s, dtype=float)
    out = np.zeros_like(s)
    pos = s > 0
    q = 1.0 - eta * s[pos]
    # s / ((1 - eta s)^-t - 1) == s q^t / (1 - q^t), stable for large t
    qt = np.exp(t * np.log(q))
    out[pos] = s[pos] * qt / (-np.expm1(t * np.log(q)))
    return out


def ali_lambda(X, eta: float, t: int, zero_tol: float = 1e-12) -> TheoryLambda:
    if t < 1:
        raise ValueError("t must be at least 1")
    eig = numkernel.sym_eig(gram(X))
    s = np.where(eig.eigenvalues > zero_tol * max(eig.eigenvalues[-1], 0.0), eig.eigenvalues, 0.0)
    if eta * s[-1] >= 1.0:
        raise StepSizeError(f"eta * s_max = {eta * s[-1]:.4g} must be below 1")
    V = eig.eigenvectors
    M = (V * ali_eigen_weights(s, eta, t)) @ V.T
    return TheoryLambda(0.5 * (M + M.T), int(t), float(eta))


def ali_minimizer(X, y, lam: TheoryLambda | np.ndarray) -> np.ndarray:
    """Solve ``((1/n) X^T X + Lambda) theta = (1/n) X^T y``."""
    X, y = _xy(X, y)
    M = lam.matrix if isinstance(lam, TheoryLambda) else np.asarray(lam, dtype=float)
    return numkernel.solve_spd(gram(X) + M, X.T @ y / X.shape[0])


def barrett_lambda(eta: float, p: int) -> float:
    if eta < 0:
        raise ValueError("eta must be non-negative")
    return eta * p / 4.0


def scalarize_lambda(lam: TheoryLambda | np.ndarray) -> float:
    M = lam.matrix if isinstance(lam, TheoryLambda) else np.asarray(lam, dtype=float)
    return float(np.trace(M) / M.shape[0])
