"""Parametrised regulariser families R(theta, Lambda).

Conventions (each family states its own scaling):

=====================  ==================================  ========================
family                 value                               gradient in theta
=====================  ==================================  ========================
scalar-ridge           (lam / 2) ||theta||^2               lam * theta
diag-quadratic         theta^T diag(Lambda) theta          2 diag(Lambda) theta
sym-quadratic          theta^T Lambda theta                2 Lambda theta
smoothed-l1            lam * sum huber(theta_i)            lam * huber'(theta)
elastic-net-smoothed   l1 * sum huber(theta_i)             l1 * huber'(theta)
                       + l2 ||theta||^2                    + 2 l2 theta
grad-norm-penalty      (lam / p) ||grad L||^2              (2 lam / p) H grad L
=====================  ==================================  ========================

``huber(u) = u^2 / (2 beta)`` for ``|u| < beta`` and ``|u| - beta / 2``
otherwise. Every family is linear in Lambda, so the gradient equals
``feature_matrix(...) @ Lambda`` exactly.

sym-quadratic parameters are the upper triangle of the symmetric matrix in
row-major order, ``r = p (p + 1) / 2``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import models
from .synthdata import Dataset

FAMILIES = (
    "scalar-ridge",
    "diag-quadratic",
    "sym-quadratic",
    "smoothed-l1",
    "elastic-net-smoothed",
    "grad-norm-penalty",
)
DEFAULT_BETA = 1e-3


class RegularizerError(ValueError):
    pass


@dataclass(frozen=True)
class RegularizerSpec:
    family: str
    beta: float = DEFAULT_BETA

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise RegularizerError(f"unknown regulariser family {self.family!r}")
        if self.beta <= 0:
            raise RegularizerError("smoothing width beta must be positive")

    @property
    def needs_context(self) -> bool:
        return self.family == "grad-norm-penalty"

    @property
    def is_quadratic(self) -> bool:
        return self.family in ("diag-quadratic", "sym-quadratic")

    def n_params(self, p: int) -> int:
        return {"diag-quadratic": p, "sym-quadratic": p * (p + 1) // 2,
                "elastic-net-smoothed": 2}.get(self.family, 1)


@dataclass(frozen=True)
class LossContext:
    """Model and data whose loss the grad-norm penalty is built from."""
    spec: models.ModelSpec
    data: Dataset


def huber(u, beta: float) -> np.ndarray:
    a = np.abs(u)
    return np.where(a < beta, u * u / (2.0 * beta), a - 0.5 * beta)


def huber_grad(u, beta: float) -> np.ndarray:
    return np.where(np.abs(u) < beta, u / beta, np.sign(u))


def sym_from_upper(lam, p: int) -> np.ndarray:
    lam = np.asarray(lam, dtype=float)
    M = np.zeros((p, p))
    iu = np.triu_indices(p)
    M[iu] = lam
    M.T[iu] = lam
    return M


def upper_from_sym(M) -> np.ndarray:
    M = np.asarray(M, dtype=float)
    return M[np.triu_indices(M.shape[0])].copy()


def materialize(spec: RegularizerSpec, lam, p: int) -> np.ndarray | None:
    """The p x p matrix of a quadratic family (None for other families)."""
    lam = np.asarray(lam, dtype=float)
    if spec.family == "diag-quadratic":
        return np.diag(lam)
    if spec.family == "sym-quadratic":
        return sym_from_upper(lam, p)
    return None


def _check(spec, lam, theta, context):
    theta = np.asarray(theta, dtype=float).reshape(-1)
    lam = np.atleast_1d(np.asarray(lam, dtype=float)).reshape(-1)
    r = spec.n_params(theta.size)
    if lam.size != r:
        raise RegularizerError(f"{spec.family} needs {r} parameters for p={theta.size}, got {lam.size}")
    if spec.needs_context and context is None:
        raise RegularizerError("grad-norm-penalty needs a LossContext (model and data)")
    return lam, theta


def reg_value(spec: RegularizerSpec, lam, theta, context: LossContext | None = None) -> float:
    lam, theta = _check(spec, lam, theta, context)
    f = spec.family
    if f == "scalar-ridge":
        return float(0.5 * lam[0] * theta @ theta)
    if spec.is_quadratic:
        return float(theta @ materialize(spec, lam, theta.size) @ theta)
    if f == "smoothed-l1":
        return float(lam[0] * huber(theta, spec.beta).sum())
    if f == "elastic-net-smoothed":
        return float(lam[0] * huber(theta, spec.beta).sum() + lam[1] * theta @ theta)
    g = models.loss_grad(context.spec, theta, context.data)
    return float(lam[0] / theta.size * g @ g)


def feature_matrix(spec: RegularizerSpec, theta, context: LossContext | None = None) -> np.ndarray:
    """p x r matrix Phi with ``reg_grad(spec, lam, theta) == Phi @ lam``."""
    theta = np.asarray(theta, dtype=float).reshape(-1)
    p = theta.size
    f = spec.family
    if f == "scalar-ridge":
        return theta[:, None].copy()
    if f == "diag-quadratic":
        return np.diag(2.0 * theta)
    if f == "sym-quadratic":
        rows, cols = np.triu_indices(p)
        Phi = np.zeros((p, rows.size))
        k = np.arange(rows.size)
        diag = rows == cols
        Phi[rows[diag], k[diag]] = 2.0 * theta[rows[diag]]
        off = ~diag
        Phi[rows[off], k[off]] = 2.0 * theta[cols[off]]
        Phi[cols[off], k[off]] = 2.0 * theta[rows[off]]
        return Phi
    if f == "smoothed-l1":
        return huber_grad(theta, spec.beta)[:, None]
    if f == "elastic-net-smoothed":
        return np.column_stack([huber_grad(theta, spec.beta), 2.0 * theta])
    if context is None:
        raise RegularizerError("grad-norm-penalty needs a LossContext (model and data)")
    g = models.loss_grad(context.spec, theta, context.data)
    Hg = models.loss_hvp(context.spec, theta, context.data, g)
    return (2.0 / p * Hg)[:, None]


def reg_grad(spec: RegularizerSpec, lam, theta, context: LossContext | None = None) -> np.ndarray:
    lam, theta = _check(spec, lam, theta, context)
    f = spec.family
    # closed forms, not Phi @ lam, to keep sym-quadratic O(p^2)
    if f == "scalar-ridge":
        return lam[0] * theta
    if spec.is_quadratic:
        return 2.0 * materialize(spec, lam, theta.size) @ theta
    return feature_matrix(spec, theta, context) @ lam
