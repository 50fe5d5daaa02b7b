"""Rectified-flow pieces: straight-line noise/data trajectories, the velocity
matching loss, a plain Euler sampler, and a synthetic Gaussian-mixture dataset
of token sequences. Data sits at t=0, noise at t=1."""

from __future__ import annotations

import numpy as np
from dataclasses import dataclass
from typing import Callable, List

from .tensor import Tensor, DomainError, ShapeError, mean_all, sub, mul


@dataclass(frozen=True)
class SynthConfig:
    """Gaussian mixture over token sequences; the seed fixes the mode patterns."""
    tokens: int = 16
    dim: int = 32
    modes: int = 4
    seed: int = 1234
    scale: float = 0.1

    def __post_init__(self):
        if self.tokens < 1:
            raise ValueError(f"tokens must be >= 1, got {self.tokens}")
        if self.dim < 2:
            raise ValueError(f"dim must be >= 2, got {self.dim}")
        if self.modes < 1:
            raise ValueError(f"modes must be >= 1, got {self.modes}")
        if self.scale < 0:
            raise ValueError(f"data_scale must be >= 0, got {self.scale}")


@dataclass
class FlowSample:
    """One training triple: clean x0, noise x1, and a trajectory time t."""
    x0: np.ndarray
    x1: np.ndarray
    t: float


def mode_patterns(cfg: SynthConfig) -> np.ndarray:
    """The mixture's per-mode mean patterns, [modes, tokens, dim]."""
    rng = np.random.default_rng(cfg.seed)
    return rng.standard_normal((cfg.modes, cfg.tokens, cfg.dim))


def gen_batch(cfg: SynthConfig, batch: int, rng: np.random.Generator) -> List[FlowSample]:
    """Draw `batch` samples: x0 from the mixture, x1 ~ N(0, I), t ~ U(0, 1)."""
    if batch < 1:
        raise DomainError(f"batch must be >= 1, got {batch}")
    patterns = mode_patterns(cfg)
    out = []
    for _ in range(batch):
        k = int(rng.integers(cfg.modes))
        x0 = patterns[k] + cfg.scale * rng.standard_normal((cfg.tokens, cfg.dim))
        x1 = rng.standard_normal((cfg.tokens, cfg.dim))
        t = float(rng.uniform())
        out.append(FlowSample(x0=x0, x1=x1, t=t))
    return out


def trajectory_point(x0: np.ndarray, x1: np.ndarray, t: float) -> np.ndarray:
    """Point on the straight path from data to noise: (1 - t) * x0 + t * x1.

    This form recovers both endpoints bitwise at t = 0 and t = 1."""
    if not (0.0 <= t <= 1.0):
        raise DomainError(f"t must be in [0, 1], got {t}")
    x0 = np.asarray(x0, dtype=np.float64)
    x1 = np.asarray(x1, dtype=np.float64)
    if x0.shape != x1.shape:
        raise ShapeError(f"trajectory_point: shapes {x0.shape} and {x1.shape} differ")
    return (1.0 - t) * x0 + t * x1


def fm_loss(velocity_pred: Tensor, x0: np.ndarray, x1: np.ndarray) -> Tensor:
    """Mean squared error between the predicted velocity and x1 - x0."""
    target = np.asarray(x1, dtype=np.float64) - np.asarray(x0, dtype=np.float64)
    if velocity_pred.shape != target.shape:
        raise ShapeError(f"fm_loss: prediction {velocity_pred.shape} vs target {target.shape}")
    diff = sub(velocity_pred, Tensor(target))
    return mean_all(mul(diff, diff))


def euler_sample(velocity_fn: Callable[[np.ndarray, float], np.ndarray], steps: int,
                 seed: int, shape: tuple) -> np.ndarray:
    """Integrate dx = -v dt from t=1 down to t=0 in `steps` uniform Euler steps.

    velocity_fn(x, t) takes and returns plain float64 arrays; x starts as
    standard normal noise drawn from `seed`.
    """
    if steps < 1:
        raise DomainError(f"steps must be >= 1, got {steps}")
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(shape)
    for s in range(steps, 0, -1):
        x = x - (1.0 / steps) * velocity_fn(x, s / steps)
    return x
