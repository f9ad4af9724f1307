"""Gradient-flow reference paths and the GD-vs-flow discrepancy."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import models
from .training import DivergenceError


@dataclass(frozen=True)
class FlowConfig:
    eta: float
    substeps: int = 10

    def __post_init__(self):
        if not self.eta > 0:
            raise ValueError("elapsed time eta must be positive")
        if self.substeps < 1:
            raise ValueError("need at least one substep")


def rk4_flow(gradfn, theta0, cfg: FlowConfig) -> np.ndarray:
    """Integrate ``d theta / ds = -gradfn(theta)`` over time ``cfg.eta``.

    Classical fourth-order Runge-Kutta with ``cfg.substeps`` equal steps.
    """
    h = cfg.eta / cfg.substeps
    theta = np.array(theta0, dtype=float, copy=True)
    for i in range(cfg.substeps):
        k1 = -gradfn(theta)
        k2 = -gradfn(theta + 0.5 * h * k1)
        k3 = -gradfn(theta + 0.5 * h * k2)
        k4 = -gradfn(theta + h * k3)
        theta = theta + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if not np.all(np.isfinite(theta)):
            raise DivergenceError(i + 1, "non-finite state in RK4 flow")
    return theta


def euler_flow(gradfn, theta0, cfg: FlowConfig) -> np.ndarray:
    """Sub-stepped explicit Euler over the same interval (comparison only)."""
    h = cfg.eta / cfg.substeps
    theta = np.array(theta0, dtype=float, copy=True)
    for _ in range(cfg.substeps):
        theta = theta - h * gradfn(theta)
    return theta


def flow_discrepancy(gradfn, theta, eta: float, substeps: int = 10, integrator=rk4_flow) -> np.ndarray:
    """``(flow displacement - GD displacement) / eta`` at ``theta``."""
    theta = np.asarray(theta, dtype=float)
    g = gradfn(theta)
    flow = integrator(gradfn, theta, FlowConfig(eta, substeps))
    return (flow - theta + eta * g) / eta


def gd_flow_discrepancy(spec: models.ModelSpec, theta, data, eta: float, k: int = 10) -> np.ndarray:
    """Per-unit-time gap between one GD step and the RK4 gradient flow.

    The loss is always the clean full-batch loss on ``data``; the same rows
    are used at every substep.
    """
    if spec.kind == "mlp" and spec.activation == "relu":
        raise models.SmoothnessError("the flow discrepancy estimator needs a twice differentiable loss")
    return flow_discrepancy(lambda th: models.loss_grad(spec, th, data), theta, eta, k)
