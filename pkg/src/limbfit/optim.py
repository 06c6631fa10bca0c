"""Adam and the direct keypoint fitter."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from limbfit.errors import NonFiniteLoss, ValidationError
from limbfit.geometry import PointCloud, SkeletonTopology
from limbfit.gradients import objective_gradient
from limbfit.losses import TERMS, LossConfig, combine, sequence_terms


@dataclass(frozen=True)
class OptimConfig:
    learning_rate: float = 1e-3
    iterations: int = 100
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValidationError("learning_rate must be positive")
        if self.iterations < 1:
            raise ValidationError("iterations must be >= 1")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValidationError("betas must lie in [0, 1)")


class Adam:
    """Adam with bias correction: ``x -= lr * m_hat / (sqrt(v_hat) + eps)``."""

    def __init__(self, config: OptimConfig):
        self.lr = config.learning_rate
        self.beta1 = config.beta1
        self.beta2 = config.beta2
        self.eps = config.eps
        self.m = None
        self.v = None
        self.t = 0

    def step(self, params: np.ndarray, grad: np.ndarray) -> np.ndarray:
        grad = np.asarray(grad, dtype=np.float64)
        if self.m is None:
            self.m = np.zeros_like(grad)
            self.v = np.zeros_like(grad)
        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad * grad
        m_hat = self.m / (1.0 - self.beta1**self.t)
        v_hat = self.v / (1.0 - self.beta2**self.t)
        return params - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def adam_step(state: Optional[Adam], params, grad, config: OptimConfig):
    """Functional wrapper: returns (new params, state)."""
    state = state if state is not None else Adam(config)
    return state.step(np.asarray(params, dtype=np.float64), grad), state


@dataclass
class FitResult:
    poses: np.ndarray  # best poses found, (T, J, 3)
    final_poses: np.ndarray  # poses after the last step
    trace: list[float]  # objective before each step, then the final objective
    term_trace: list[dict] = field(default_factory=list)
    best_iteration: int = 0

    @property
    def initial_loss(self) -> float:
        return self.trace[0]

    @property
    def best_loss(self) -> float:
        return self.trace[self.best_iteration]


def _evaluate(clouds, poses, Ws, topo, loss_config, iteration):
    terms = sequence_terms(clouds, poses, Ws, topo, loss_config, skip_zero_weight=True)
    terms = {k: float(v) for k, v in terms.items()}
    for k in TERMS:
        if not np.isfinite(terms[k]):
            raise NonFiniteLoss(iteration, k, terms[k])
    total = float(combine(terms, loss_config))
    if not np.isfinite(total):
        raise NonFiniteLoss(iteration, "total", total)
    return total, terms


def fit_sequence(clouds: Sequence[PointCloud], initial_poses, Ws, topo: SkeletonTopology,
                 loss_config: LossConfig, optim_config: OptimConfig) -> FitResult:
    """Minimize the weighted objective over all frame poses jointly with Adam.

    Assignments stay fixed. The trace has ``iterations + 1`` entries (the
    objective at every visited iterate) and the returned poses are the best
    iterate, so the reported loss never exceeds the initial one.
    """
    poses = np.array(initial_poses, dtype=np.float64, copy=True)
    if poses.ndim != 3 or poses.shape[0] != len(clouds):
        raise ValidationError("initial poses must be (T, J, 3) with one pose per cloud")
    opt = Adam(optim_config)
    trace, term_trace = [], []
    best, best_it = poses.copy(), 0
    for it in range(optim_config.iterations + 1):
        total, terms = _evaluate(clouds, poses, Ws, topo, loss_config, it)
        trace.append(total)
        term_trace.append(terms)
        if total < trace[best_it]:
            best, best_it = poses.copy(), it
        if it == optim_config.iterations:
            break
        grad = objective_gradient(clouds, poses, Ws, topo, loss_config)
        if not np.all(np.isfinite(grad)):
            raise NonFiniteLoss(it, "gradient", float("nan"))
        poses = opt.step(poses, grad)
    return FitResult(best, poses, trace, term_trace, best_it)
