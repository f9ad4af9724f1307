"""Gradient matching: targets, stacked systems and regulariser fits.

At an endpoint ``theta_hat`` the regularised stationarity condition
``grad L + grad R = 0`` becomes the linear system ``Phi @ Lambda ~ b`` with
``b = -grad L(theta_hat)`` and ``Phi`` the regulariser feature matrix.
Along a trajectory the target is instead the part of each observed update
that the unregularised reference step does not explain.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import flowref, models, numkernel, regfam, training
from .synthdata import Dataset

#: cond(column-normalised Phi) above which a fit is flagged as weakly identified
COND_LIMIT = 1e3
#: relative residual ||Phi Lambda - b|| / ||b|| above which a fit is flagged
RESIDUAL_LIMIT = 1e-2
#: standard error of a coefficient relative to its magnitude above which it is flagged
COEF_SE_LIMIT = 1e-2


class EstimationError(ValueError):
    pass


class DegenerateSystemError(EstimationError):
    pass


@dataclass
class EstimationSystem:
    """Stacked gradient-matching regression ``phi @ lam ~ b``.

    ``weights`` is an optional per-row weight vector (weighted least squares);
    no weighting scheme is applied by default.
    """
    b: np.ndarray
    phi: np.ndarray
    tags: list = field(default_factory=list)
    blocks: list = field(default_factory=list)
    weights: np.ndarray | None = None

    def __post_init__(self):
        self.b = np.asarray(self.b, dtype=float).reshape(-1)
        self.phi = np.asarray(self.phi, dtype=float)
        if self.phi.ndim != 2 or self.phi.shape[0] != self.b.size:
            raise EstimationError(f"phi {self.phi.shape} and b {self.b.shape} disagree")
        if not self.blocks:
            self.blocks = [self.b.size]
        if not self.tags:
            self.tags = ["block0"] * len(self.blocks)

    @property
    def rows(self) -> int:
        return self.b.size

    @property
    def r(self) -> int:
        return self.phi.shape[1]


@dataclass
class EstimateResult:
    lam: np.ndarray
    residual_mse: float
    diagnostics: dict

    def summary(self, family: str) -> dict:
        d = self.diagnostics
        return {
            "family": family,
            "lambda": [float(x) for x in self.lam],
            "residual_mse": float(self.residual_mse),
            "cond": float(d["cond"]),
            "rank": int(d["rank"]),
            "min_eig": None if d.get("min_eig") is None else float(d["min_eig"]),
            "low_identifiability": bool(d["low_identifiability"]),
        }


def endpoint_target(spec: models.ModelSpec, data: Dataset, theta_hat) -> np.ndarray:
    """``b = -grad L(theta_hat)`` on the full, dropout-free loss."""
    return -models.loss_grad(spec, theta_hat, data)


def endpoint_system(spec: models.ModelSpec, data: Dataset, theta_hat, reg_spec: regfam.RegularizerSpec,
                    tag: str = "endpoint") -> EstimationSystem:
    context = regfam.LossContext(spec, data) if reg_spec.needs_context else None
    return EstimationSystem(endpoint_target(spec, data, theta_hat),
                            regfam.feature_matrix(reg_spec, theta_hat, context), [tag])


def trajectory_targets(spec: models.ModelSpec, data: Dataset, traj: training.Trajectory,
                       reference: str = "euler", k: int = 10):
    """Per-point targets along a trajectory, as ``[(theta_t, b_t), ...]``.

    ``euler``: ``b_t = -(theta_{t+1} - theta_t) / eta - grad L(theta_t)`` for
    consecutive recorded steps. ``flow``: ``b_t`` is the discrepancy between
    one full-batch GD step from ``theta_t`` and the RK4 gradient flow.
    """
    if reference not in ("euler", "flow"):
        raise EstimationError(f"unknown reference {reference!r}")
    out = []
    if reference == "flow":
        for theta in traj.thetas:
            out.append((theta, flowref.gd_flow_discrepancy(spec, theta, data, traj.eta, k)))
        return out
    if len(traj) < 2:
        raise EstimationError("euler targets need at least two trajectory points")
    for (s0, th0), (s1, th1) in zip(zip(traj.steps, traj.thetas), zip(traj.steps[1:], traj.thetas[1:])):
        if s1 != s0 + 1:
            continue
        out.append((th0, -(th1 - th0) / traj.eta - models.loss_grad(spec, th0, data)))
    if not out:
        raise EstimationError("trajectory has no consecutive steps")
    return out


def trajectory_system(targets, reg_spec: regfam.RegularizerSpec, context=None) -> EstimationSystem:
    return stack([EstimationSystem(b, regfam.feature_matrix(reg_spec, theta, context), [f"point{i}"])
                  for i, (theta, b) in enumerate(targets)])


def stack(systems) -> EstimationSystem:
    """Row-wise concatenation of systems sharing the same ``r``."""
    systems = list(systems)
    if not systems:
        raise EstimationError("nothing to stack")
    r = systems[0].r
    if any(s.r != r for s in systems):
        raise EstimationError("systems have different numbers of regulariser parameters")
    weights = None
    if any(s.weights is not None for s in systems):
        weights = np.concatenate([np.ones(s.rows) if s.weights is None else s.weights for s in systems])
    return EstimationSystem(
        np.concatenate([s.b for s in systems]),
        np.vstack([s.phi for s in systems]),
        [t for s in systems for t in s.tags],
        [n for s in systems for n in s.blocks],
        weights,
    )


def _diagnostics(phi, b, lam, rank, reg_spec, p):
    norms = np.linalg.norm(phi, axis=0)
    nz = norms > 0
    cond = numkernel.cond_number(phi) if phi.size else numkernel.COND_SENTINEL
    cond_normalized = (numkernel.cond_number(phi[:, nz] / norms[nz])
                       if nz.any() else numkernel.COND_SENTINEL)
    resid = phi @ lam - b
    b_norm = np.linalg.norm(b)
    rel_resid = float(np.linalg.norm(resid) / b_norm) if b_norm > 0 else 0.0
    flags = []
    if not nz.all():
        flags.append("zero-norm-column")
    if cond_normalized > COND_LIMIT:
        flags.append("collinear-features")
    if rel_resid > RESIDUAL_LIMIT:
        flags.append("poor-fit")
    rel_se = _relative_standard_errors(phi, resid, lam, rank)
    if np.any(rel_se > COEF_SE_LIMIT):
        flags.append("uncertain-coefficient")
    min_eig = None
    if reg_spec is not None and reg_spec.is_quadratic and p is not None:
        min_eig = float(np.linalg.eigvalsh(regfam.materialize(reg_spec, lam, p))[0])
    return {
        "cond": cond,
        "cond_normalized": cond_normalized,
        "column_norms": norms,
        "rank": rank,
        "relative_residual": rel_resid,
        "relative_se": rel_se,
        "min_eig": min_eig,
        "flags": flags,
        "low_identifiability": bool({"collinear-features", "poor-fit", "uncertain-coefficient"} & set(flags))
        or rank < phi.shape[1],
    }


def _relative_standard_errors(phi, resid, lam, rank):
    """Ordinary least-squares standard errors divided by ``|lam|``.

    A small overall residual can still hide a badly determined small
    coefficient; this catches that case. Needs more rows than unknowns and
    full column rank, otherwise zeros are returned (rank is flagged
    separately).
    """
    rows, r = phi.shape
    out = np.zeros(r)
    if rows <= r or rank < r:
        return out
    sigma2 = float(resid @ resid) / (rows - r)
    try:
        cov_diag = np.diag(numkernel.solve_spd(phi.T @ phi, np.eye(r))) * sigma2
    except numkernel.DefinitenessError:
        return out
    se = np.sqrt(np.maximum(cov_diag, 0.0))
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(np.abs(lam) > 0, se / np.abs(lam), np.where(se > 0, np.inf, 0.0))
    return out


def fit_linear(system: EstimationSystem, normalize: bool = False,
               reg_spec: regfam.RegularizerSpec | None = None, p: int | None = None) -> EstimateResult:
    """Minimum-norm least squares for ``phi @ lam ~ b``.

    With ``normalize`` each column is scaled to unit Euclidean norm before
    solving and the coefficients are mapped back; zero columns get 0.
    ``reg_spec``/``p`` only feed the quadratic-family eigenvalue diagnostic.
    """
    if system.rows == 0:
        raise EstimationError("empty system")
    phi, b = system.phi, system.b
    if system.weights is not None:
        w = np.sqrt(np.asarray(system.weights, dtype=float))
        phi, b = phi * w[:, None], b * w
    norms = np.linalg.norm(phi, axis=0)
    if normalize:
        nz = norms > 0
        lam = np.zeros(system.r)
        sol, rank, _ = numkernel.lstsq_min_norm(phi[:, nz] / norms[nz], b)
        lam[nz] = sol / norms[nz]
    else:
        lam, rank, _ = numkernel.lstsq_min_norm(phi, b)
    resid = system.phi @ lam - system.b
    diagnostics = _diagnostics(system.phi, system.b, lam, rank, reg_spec, p)
    return EstimateResult(lam, float(resid @ resid / system.rows), diagnostics)


@dataclass(frozen=True)
class AdamConfig:
    """Adaptive-moment descent on the gradient-matching objective.

    Moment constants are the usual ``beta1=0.9, beta2=0.999, eps=1e-8``.
    """
    step: float = 1e-2
    max_epochs: int = 20000
    patience: int = 50
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def fit_iterative(system: EstimationSystem, opt: AdamConfig = AdamConfig(), lam0=None,
                  reg_spec: regfam.RegularizerSpec | None = None, p: int | None = None) -> EstimateResult:
    """Fit ``lam`` by Adam on ``(1/rows) ||phi @ lam - b||^2``.

    Stops after ``opt.patience`` epochs without improving the objective and
    returns the best iterate.
    """
    if system.rows == 0:
        raise EstimationError("empty system")
    phi, b = system.phi, system.b
    rows = system.rows
    lam = np.zeros(system.r) if lam0 is None else np.array(lam0, dtype=float)
    m = np.zeros_like(lam)
    v = np.zeros_like(lam)
    best, best_lam, wait = np.inf, lam.copy(), 0
    for epoch in range(1, opt.max_epochs + 1):
        resid = phi @ lam - b
        obj = resid @ resid / rows
        if not np.isfinite(obj):
            raise training.DivergenceError(epoch, "non-finite gradient-matching objective")
        if obj < best:
            best, best_lam, wait = obj, lam.copy(), 0
        else:
            wait += 1
            if wait >= opt.patience:
                break
        grad = 2.0 * phi.T @ resid / rows
        m = opt.beta1 * m + (1 - opt.beta1) * grad
        v = opt.beta2 * v + (1 - opt.beta2) * grad * grad
        m_hat = m / (1 - opt.beta1 ** epoch)
        v_hat = v / (1 - opt.beta2 ** epoch)
        lam = lam - opt.step * m_hat / (np.sqrt(v_hat) + opt.eps)
    rank = int(np.linalg.matrix_rank(phi)) if phi.size else 0
    diagnostics = _diagnostics(phi, b, best_lam, rank, reg_spec, p)
    diagnostics["epochs"] = epoch
    return EstimateResult(best_lam, float(best), diagnostics)


def igr_fit(samples, p: int) -> float:
    """Closed-form implicit-gradient-regularisation coefficient.

    ``samples`` holds ``(Hg, T)`` pairs. Returns
    ``p * 0.5 * sum <Hg, T> / sum ||Hg||^2``.
    """
    num = den = 0.0
    for hg, disc in samples:
        hg = np.asarray(hg, dtype=float)
        num += float(hg @ np.asarray(disc, dtype=float))
        den += float(hg @ hg)
    if den == 0.0:
        raise DegenerateSystemError("every Hessian-gradient product is zero")
    return p * 0.5 * num / den


def retrain_validate(spec: models.ModelSpec, data: Dataset, reg_spec: regfam.RegularizerSpec, lam,
                     cfg: training.TrainConfig, theta_orig, theta0=None) -> dict:
    """Retrain on ``L + R(., lam)`` and compare with the original weights.

    Returns the retrained weights, ``||theta_R - theta_orig|| / ||theta_orig||``
    and the loss gap ``L(theta_R) - L(theta_orig)``.
    """
    theta_orig = np.asarray(theta_orig, dtype=float)
    record, _ = training.train(spec, data, cfg, explicit_reg=(reg_spec, lam), theta0=theta0)
    theta = record.theta
    denom = np.linalg.norm(theta_orig)
    rel = float(np.linalg.norm(theta - theta_orig) / denom) if denom > 0 else float(np.linalg.norm(theta))
    gap = models.loss_value(spec, theta, data) - models.loss_value(spec, theta_orig, data)
    return {"theta": theta, "rel_distance": rel, "loss_gap": float(gap), "steps": record.halted_at}


def loglog_slope(ms, errors) -> float:
    """Least-squares slope of ``log(error)`` against ``log(m)``.

    An empirical stand-in for the stacking rate: iid-noise targets give
    roughly -0.5 once the stacked system is overdetermined.
    """
    ms = np.asarray(ms, dtype=float)
    errors = np.asarray(errors, dtype=float)
    if ms.size < 2 or ms.size != errors.size or np.any(ms <= 0) or np.any(errors <= 0):
        raise EstimationError("need at least two positive (m, error) pairs")
    return float(np.polyfit(np.log(ms), np.log(errors), 1)[0])
