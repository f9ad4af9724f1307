"""Full-batch GD and minibatch SGD with momentum, early stopping and trajectories."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import models, regfam
from .synthdata import Dataset, derive_seed, stream


class TrainingError(ValueError):
    pass


class DivergenceError(ArithmeticError):
    def __init__(self, step: int, message: str = "non-finite loss"):
        super().__init__(f"{message} at step {step}")
        self.step = step


@dataclass(frozen=True)
class TrainConfig:
    """Optimiser and stopping settings.

    ``min_delta=0`` counts any decrease as an improvement. ``patience`` is
    the number of consecutive non-improving epochs tolerated before stopping.
    ``checkpoint_steps="all"`` records every step in the trajectory.
    """
    eta: float
    max_epochs: int
    optimizer: str = "gd"
    momentum: float = 0.0
    batch_size: int | None = None
    patience: int | None = None
    min_delta: float = 0.0
    checkpoint_steps: tuple | str = ()
    seed: int = 0
    dropout_per_example: bool = True
    checkpoint_dir: str | None = None

    def __post_init__(self):
        if self.optimizer not in ("gd", "sgd"):
            raise TrainingError(f"unknown optimizer {self.optimizer!r}")
        if not self.eta > 0:
            raise TrainingError("step size eta must be positive")
        if self.max_epochs < 0:
            raise TrainingError("max_epochs must be non-negative")
        if self.patience is not None and not 1 <= self.patience <= max(self.max_epochs, 1):
            raise TrainingError("patience must lie in [1, max_epochs]")
        if self.min_delta < 0:
            raise TrainingError("min_delta must be non-negative")
        if self.checkpoint_steps != "all":
            object.__setattr__(self, "checkpoint_steps", tuple(int(s) for s in self.checkpoint_steps))

    def records(self, step: int) -> bool:
        return self.checkpoint_steps == "all" or step in self.checkpoint_steps


@dataclass
class EndpointRecord:
    """Result of a training run.

    ``stop_step`` is the step of the returned (best-loss) iterate;
    ``halted_at`` is the step at which the loop ended.
    """
    theta: np.ndarray
    stop_step: int
    halted_at: int
    final_loss: float
    dataset_id: str
    spec_id: str


@dataclass
class Trajectory:
    steps: list = field(default_factory=list)
    thetas: list = field(default_factory=list)
    eta: float = 0.0
    rule: str = "gd"

    def append(self, step: int, theta) -> None:
        if self.steps and step <= self.steps[-1]:
            raise TrainingError("trajectory steps must be strictly increasing")
        self.steps.append(int(step))
        self.thetas.append(np.array(theta, dtype=float, copy=True))

    def at(self, step: int) -> np.ndarray:
        try:
            return self.thetas[self.steps.index(step)]
        except ValueError:
            raise KeyError(f"step {step} was not recorded") from None

    def __len__(self):
        return len(self.steps)


def _reg_parts(spec, data, explicit_reg):
    if explicit_reg is None:
        return None
    reg_spec, lam = explicit_reg
    context = regfam.LossContext(spec, data) if reg_spec.needs_context else None
    return reg_spec, np.atleast_1d(np.asarray(lam, dtype=float)), context


def _objective_and_grad(spec, theta, data, reg, mask=None):
    loss, g = models.loss_and_grad(spec, theta, data, mask)
    if reg is not None:
        reg_spec, lam, context = reg
        loss += regfam.reg_value(reg_spec, lam, theta, context)
        g = g + regfam.reg_grad(reg_spec, lam, theta, context)
    return loss, g


def _objective(spec, theta, data, reg):
    loss = models.loss_value(spec, theta, data)
    if reg is not None:
        reg_spec, lam, context = reg
        loss += regfam.reg_value(reg_spec, lam, theta, context)
    return loss


def gd_step(spec: models.ModelSpec, theta, data: Dataset, eta: float, explicit_reg=None) -> np.ndarray:
    """One full-batch step ``theta - eta * (grad L + grad R)``."""
    _, g = _objective_and_grad(spec, theta, data, _reg_parts(spec, data, explicit_reg))
    return np.asarray(theta, dtype=float) - eta * g


@dataclass
class SGDState:
    velocity: np.ndarray
    epoch: int = 0


def sgd_epoch(spec: models.ModelSpec, theta, data: Dataset, cfg: TrainConfig,
              state: SGDState | None = None, explicit_reg=None):
    """One pass of heavy-ball SGD over a seeded shuffle of the rows.

    Each batch uses ``v <- momentum * v + g`` then ``theta <- theta - eta * v``;
    rows inside a batch keep their original order, so ``batch_size = n``
    with zero momentum reproduces :func:`gd_step` exactly.
    """
    theta = np.array(theta, dtype=float, copy=True)
    if state is None:
        state = SGDState(np.zeros_like(theta))
    batch = cfg.batch_size or data.n
    if not 1 <= batch <= data.n:
        raise TrainingError(f"batch_size {batch} must lie in [1, n={data.n}]")
    reg = _reg_parts(spec, data, explicit_reg)
    epoch = state.epoch + 1
    perm = stream(cfg.seed, "sgd-shuffle", epoch).permutation(data.n)
    v = state.velocity.copy()
    for b, start in enumerate(range(0, data.n, batch)):
        rows = np.sort(perm[start:start + batch])
        part = data.take(rows)
        mask = None
        if spec.dropout_rate > 0:
            mask = models.sample_dropout_mask(
                spec, derive_seed(cfg.seed, "mask", epoch, b),
                rows=rows.size if cfg.dropout_per_example else None)
        loss, g = _objective_and_grad(spec, theta, part, reg, mask)
        if not np.isfinite(loss) or not np.all(np.isfinite(g)):
            raise DivergenceError(epoch, f"non-finite minibatch loss in batch {b}")
        v = cfg.momentum * v + g
        theta -= cfg.eta * v
    return theta, SGDState(v, epoch)


def train(spec: models.ModelSpec, data: Dataset, cfg: TrainConfig, explicit_reg=None,
          val_data: Dataset | None = None, theta0=None):
    """Train and return ``(EndpointRecord, Trajectory)``.

    The monitored quantity is the clean (dropout-free) objective on ``data``,
    or the loss on ``val_data`` when given. Training halts after
    ``max_epochs`` or after ``patience`` consecutive epochs without an
    improvement larger than ``min_delta``; the best monitored iterate is
    returned. Steps are GD updates for ``gd`` and epochs for ``sgd``.
    """
    reg = _reg_parts(spec, data, explicit_reg)
    theta = init_theta = (models.init_params(spec, cfg.seed) if theta0 is None
                          else np.array(theta0, dtype=float, copy=True))
    traj = Trajectory(eta=cfg.eta, rule=cfg.optimizer)
    traj.append(0, theta)
    patience = cfg.patience or max(cfg.max_epochs, 1)

    def monitored(th, train_obj=None):
        if val_data is not None:
            return models.loss_value(spec, th, val_data)
        return _objective(spec, th, data, reg) if train_obj is None else train_obj

    if cfg.optimizer == "gd":
        obj, g = _objective_and_grad(spec, theta, data, reg)
    else:
        obj, state = _objective(spec, theta, data, reg), None
    best, best_theta, best_step = monitored(theta, obj), init_theta, 0
    if not np.isfinite(best):
        raise DivergenceError(0)
    wait, step = 0, 0
    for step in range(1, cfg.max_epochs + 1):
        if cfg.optimizer == "gd":
            theta = theta - cfg.eta * g
            obj, g = _objective_and_grad(spec, theta, data, reg)
        else:
            theta, state = sgd_epoch(spec, theta, data, cfg, state, explicit_reg)
            obj = None
        current = monitored(theta, obj)
        if not np.isfinite(current):
            raise DivergenceError(step)
        if cfg.records(step):
            traj.append(step, theta)
            if cfg.checkpoint_dir:
                models.save_checkpoint(Path(cfg.checkpoint_dir) / f"step{step:06d}.ckpt", spec, theta, step)
        if current < best - cfg.min_delta:
            best, best_theta, best_step, wait = current, theta, step, 0
        else:
            wait += 1
            if wait >= patience:
                break
    if traj.steps[-1] != step:
        traj.append(step, theta)
    record = EndpointRecord(np.array(best_theta, copy=True), best_step, step, float(best),
                            data.id, spec.tag())
    return record, traj
