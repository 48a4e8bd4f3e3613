"""Gradient-based optimization loop with deterministic seeding."""

from __future__ import annotations

import csv
import time
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from .grad import NumericFailure
from .objectives import Objective, ObjectiveConfig
from .posteriors import GaussianPrior, Posterior


@dataclass
class OptimizerConfig:
    algorithm: str = "adam"
    lr: float = 0.01
    steps: int = 2000
    beta1: float = 0.9
    beta2: float = 0.999
    eps_opt: float = 1e-8
    batch_size: int | None = None
    mc_pairs: int = 1
    seed: int = 0
    snapshot_every: int = 0  # 0 keeps only the final snapshot

    def __post_init__(self):
        if self.algorithm not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.algorithm!r}")
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")
        if self.steps < 1:
            raise ValueError("need at least one step")

    def to_dict(self):
        return asdict(self)


class Adam:
    def __init__(self, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = self.v = None
        self.t = 0

    def step(self, params, grad):
        if self.m is None:
            self.m = np.zeros_like(params)
            self.v = np.zeros_like(params)
        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad * grad
        m_hat = self.m / (1.0 - self.beta1 ** self.t)
        v_hat = self.v / (1.0 - self.beta2 ** self.t)
        return params - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


class SGD:
    def __init__(self, lr):
        self.lr = lr

    def step(self, params, grad):
        return params - self.lr * grad


def make_optimizer(cfg: OptimizerConfig):
    if cfg.algorithm == "adam":
        return Adam(cfg.lr, cfg.beta1, cfg.beta2, cfg.eps_opt)
    return SGD(cfg.lr)


@dataclass
class TrainTrace:
    objective: list[float] = field(default_factory=list)
    snapshots: dict[int, np.ndarray] = field(default_factory=dict)
    seconds_per_100: list[float] = field(default_factory=list)

    def __len__(self):
        return len(self.objective)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "objective"])
            for i, v in enumerate(self.objective):
                w.writerow([i, repr(float(v))])


class TrainingError(RuntimeError):
    """Non-finite objective or gradient mid-run."""

    def __init__(self, step, last_params, cause):
        super().__init__(f"numeric failure at step {step}: {cause}")
        self.step = step
        self.last_params = last_params
        self.cause = cause


def minimize(value_and_grad: Callable, x0, cfg: OptimizerConfig, rng=None):
    """Run ``cfg.steps`` optimizer steps on ``value_and_grad(params, rng)``.

    The objective trace records the value at the parameters *before* each
    update.  Returns (final params, TrainTrace).
    """
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    opt = make_optimizer(cfg)
    params = np.array(x0, dtype=float)
    trace = TrainTrace()
    tick = time.perf_counter()
    for step in range(cfg.steps):
        try:
            val, grad = value_and_grad(params, rng)
            if not (np.isfinite(val) and np.all(np.isfinite(grad))):
                raise NumericFailure("objective")
        except (NumericFailure, FloatingPointError) as exc:
            raise TrainingError(step, params.copy(), exc) from exc
        trace.objective.append(val)
        params = opt.step(params, grad)
        if cfg.snapshot_every and (step + 1) % cfg.snapshot_every == 0:
            trace.snapshots[step + 1] = params.copy()
        if (step + 1) % 100 == 0:
            now = time.perf_counter()
            trace.seconds_per_100.append(now - tick)
            tick = now
    trace.snapshots[cfg.steps] = params.copy()
    return params, trace


def train(objective_config: ObjectiveConfig, model, initial: Posterior, x, y,
          optimizer_config: OptimizerConfig, prior: GaussianPrior | None = None):
    """Fit ``initial`` under the configured objective.

    Returns (trained posterior, TrainTrace).
    """
    if optimizer_config.batch_size is not None:
        objective_config.batch_size = optimizer_config.batch_size
    if optimizer_config.mc_pairs != 1:
        objective_config.mc_pairs = optimizer_config.mc_pairs
    obj = Objective(objective_config, initial, model, prior or GaussianPrior(), x, y)
    params, trace = minimize(obj.value_and_grad, obj.initial, optimizer_config)
    return obj.posterior_at(params), trace


def moving_average_objective(trace, window: int) -> np.ndarray:
    """Trailing mean; the first window-1 entries average what is available."""
    if window < 1:
        raise ValueError("window must be >= 1")
    series = np.asarray(getattr(trace, "objective", trace), dtype=float)
    csum = np.concatenate([[0.0], np.cumsum(series)])
    idx = np.arange(1, series.size + 1)
    lo = np.maximum(idx - window, 0)
    return (csum[idx] - csum[lo]) / (idx - lo)
