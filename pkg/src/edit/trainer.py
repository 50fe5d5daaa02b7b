"""Two-phase training: a dense warm-up that never touches the routers, then
joint optimization of the velocity loss plus the weighted efficiency losses.
Adam with global-norm clipping; every run is bit-reproducible from its seed."""

from __future__ import annotations

import json
import math
import numpy as np
from dataclasses import dataclass, field
from typing import List, Tuple

from .tensor import Tensor, NumericError, backward
from .flow import FlowSample, SynthConfig, fm_loss, gen_batch, trajectory_point
from .model import DiTConfig, model_forward_dense
from .elastic import (ElasticConfig, ElasticModel, build_model,
                      elastic_forward_train, gating_loss, total_loss, width_loss)
from .metrics import FlopModel, energy_distance, flop_reduction, trace_summary
from .infer_cache import InferenceConfig, denoise_full


@dataclass(frozen=True)
class TrainConfig:
    dit: DiTConfig = field(default_factory=DiTConfig)
    elastic: ElasticConfig = field(default_factory=ElasticConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    steps: int = 4300
    batch_size: int = 32
    warmup_frac: float = 0.3
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    grad_clip: float = 1.0
    eval_every: int = 100
    seed: int = 0
    router_init: str = "full_capacity"

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError(f"train_steps must be >= 1, got {self.steps}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if not (0.0 <= self.warmup_frac <= 1.0):
            raise ValueError(f"warmup_frac must be in [0, 1], got {self.warmup_frac}")
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if not (0.0 <= self.beta1 < 1.0) or not (0.0 <= self.beta2 < 1.0):
            raise ValueError("adam betas must be in [0, 1)")
        if self.adam_eps <= 0:
            raise ValueError(f"adam_eps must be > 0, got {self.adam_eps}")
        if self.grad_clip <= 0:
            raise ValueError(f"grad_clip must be > 0, got {self.grad_clip}")
        if self.eval_every < 1:
            raise ValueError(f"eval_every must be >= 1, got {self.eval_every}")
        if self.router_init not in ("full_capacity", "random"):
            raise ValueError(f"router_init must be 'full_capacity' or 'random', got {self.router_init!r}")

    @property
    def warmup_steps(self) -> int:
        return int(round(self.steps * self.warmup_frac))


@dataclass
class TrainSnapshot:
    """Loss terms and routing statistics logged every eval_every steps."""
    step: int
    perf: float
    gating: float
    width: float
    p_bar: float
    r_bar: float
    flop_ratio: float

    def as_dict(self) -> dict:
        return {"step": self.step, "perf": self.perf, "gating": self.gating,
                "width": self.width, "p_bar": self.p_bar, "r_bar": self.r_bar,
                "flop_ratio": self.flop_ratio}


@dataclass
class TrainResult:
    model: ElasticModel
    snapshots: List[TrainSnapshot]


class Adam:
    """Plain Adam with bias correction; updates parameter values in place."""

    def __init__(self, params: List[Tensor], lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p.values) for p in self.params]
        self.v = [np.zeros_like(p.values) for p in self.params]
        self.t = 0

    def step(self, grads: List[np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m[...] = self.beta1 * m + (1.0 - self.beta1) * g
            v[...] = self.beta2 * v + (1.0 - self.beta2) * g * g
            p.values = p.values - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def clip_global_norm(grads: List[np.ndarray], max_norm: float) -> Tuple[List[np.ndarray], float]:
    total = math.sqrt(sum(float((g * g).sum()) for g in grads))
    if total > max_norm > 0.0:
        scale = max_norm / total
        grads = [g * scale for g in grads]
    return grads, total


def _stack_batch(samples: List[FlowSample]):
    x0 = np.stack([s.x0 for s in samples])
    x1 = np.stack([s.x1 for s in samples])
    xt = np.stack([trajectory_point(s.x0, s.x1, s.t) for s in samples])
    t = np.array([s.t for s in samples])
    return xt, x0, x1, t


def _finite(value: Tensor, term: str, step: int) -> Tensor:
    if not math.isfinite(value.item()):
        raise NumericError(f"{term} loss is not finite at step {step}")
    return value


def batch_routing_stats(ros, tau: float) -> Tuple[float, float]:
    """(p_bar, r_bar) over a batch: block means per sample, then batch mean.

    r_bar averages soft widths over active blocks; samples with no active block
    are left out (falls back to 1.0 if nothing is active at all)."""
    probs = np.stack([ro.gate_prob.values for ro in ros])
    soft = np.stack([ro.soft_width.values for ro in ros])
    p_bar = float(probs.mean())
    act = (probs >= tau).astype(np.float64)
    den = act.sum(axis=0)
    num = (act * soft).sum(axis=0)
    mask = den > 0
    r_bar = float((num[mask] / den[mask]).mean()) if mask.any() else 1.0
    return p_bar, r_bar


def batch_flop_ratio(ros, fm: FlopModel, tau: float) -> float:
    """Dense FLOPs over routed FLOPs implied by a batch of routing decisions
    (no caching is modeled during training)."""
    n_blocks = len(ros)
    batch = int(np.prod(ros[0].gate_prob.values.shape[:-2])) if ros[0].gate_prob.values.ndim > 2 else 1
    dense = n_blocks * batch * fm.dense_block()
    actual = 0
    for ro in ros:
        act = (ro.gate_prob.values >= tau).reshape(-1)
        ratios = np.broadcast_to(np.atleast_1d(ro.width_ratio), act.shape)
        for a, r in zip(act, ratios):
            actual += fm.router() + (fm.attn() + fm.mlp(float(r)) if a else 0)
    return dense / actual


def train(cfg: TrainConfig) -> TrainResult:
    """Run warm-up then joint training; returns the model and snapshot log.

    Weight init and the batch stream draw from separate seed-derived rng
    streams, so two runs differing only in router_init train on identical
    batches (the init comparison is then paired, not confounded by data)."""
    init_rng = np.random.default_rng((cfg.seed, 0))
    data_rng = np.random.default_rng((cfg.seed, 1))
    model = build_model(cfg.dit, cfg.elastic, init_rng, cfg.router_init)
    fm = FlopModel.from_config(cfg.dit)
    ecfg = cfg.elastic
    snapshots: List[TrainSnapshot] = []
    init_p_bar = float(np.mean([1.0 / (1.0 + np.exp(-rw.gate_bias.item()))
                                for rw in model.routers]))

    backbone = model.params.tensors()
    opt = Adam(backbone, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps)
    warmup = cfg.warmup_steps
    for step in range(1, warmup + 1):
        xt, x0, x1, t = _stack_batch(gen_batch(cfg.synth, cfg.batch_size, data_rng))
        try:
            pred = model_forward_dense(xt, t, model.params, cfg.dit)
            perf = _finite(fm_loss(pred, x0, x1), "perf", step)
        except NumericError as e:
            raise NumericError(f"aborting at step {step}: {e}") from None
        grads = backward(perf, wrt=backbone)
        grads, _ = clip_global_norm(grads, cfg.grad_clip)
        opt.step(grads)
        if step % cfg.eval_every == 0 or step == cfg.steps:
            # routers are frozen fully open during warm-up, so the routing
            # stats are their initial values by definition
            snapshots.append(TrainSnapshot(step=step, perf=perf.item(), gating=0.0,
                                           width=0.0, p_bar=init_p_bar, r_bar=1.0,
                                           flop_ratio=1.0))

    everything = model.parameters()
    opt = Adam(everything, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps)
    for step in range(warmup + 1, cfg.steps + 1):
        xt, x0, x1, t = _stack_batch(gen_batch(cfg.synth, cfg.batch_size, data_rng))
        try:
            pred, ros = elastic_forward_train(model, xt, t)
            perf = _finite(fm_loss(pred, x0, x1), "perf", step)
        except NumericError as e:
            raise NumericError(f"aborting at step {step}: {e}") from None
        try:
            gating = _finite(gating_loss([ro.gate_prob for ro in ros], ecfg.rho_g), "gating", step)
        except NumericError as e:
            raise NumericError(f"aborting at step {step}: {e}") from None
        try:
            width = _finite(width_loss(ros, ecfg.tau, ecfg.rho_w), "width", step)
        except NumericError as e:
            raise NumericError(f"aborting at step {step}: {e}") from None
        loss = total_loss(perf, gating, width, ecfg.lambda_eff)
        grads = backward(loss, wrt=everything)
        grads, _ = clip_global_norm(grads, cfg.grad_clip)
        opt.step(grads)
        if step % cfg.eval_every == 0 or step == cfg.steps:
            p_bar, r_bar = batch_routing_stats(ros, ecfg.tau)
            snapshots.append(TrainSnapshot(
                step=step, perf=perf.item(), gating=gating.item(), width=width.item(),
                p_bar=p_bar, r_bar=r_bar,
                flop_ratio=batch_flop_ratio(ros, fm, ecfg.tau)))
    return TrainResult(model=model, snapshots=snapshots)


# ---------------------------------------------------------------------------
# evaluation

@dataclass
class EvalReport:
    """Read-only measurements of a trained model under one inference config."""
    energy_distance: float
    flop_ratio: float
    p_bar: float
    r_bar: float
    summaries: list
    samples: np.ndarray     # [n_traj, tokens * dim]
    trace: list


def evaluate(model: ElasticModel, synth: SynthConfig, icfg: InferenceConfig,
             n_traj: int, n_data: int, seed: int) -> EvalReport:
    """Sample n_traj trajectories with the caching engine and score them
    against fresh synthetic data; aggregates the traces. Mutates nothing."""
    samples, trace = [], []
    for k in range(n_traj):
        x, records = denoise_full(model, icfg, seed + k)
        samples.append(x.reshape(-1))
        trace.extend(records)
    samples = np.stack(samples)
    data_rng = np.random.default_rng(seed + 1_000_003)
    data = np.stack([s.x0.reshape(-1) for s in gen_batch(synth, n_data, data_rng)])
    fm = FlopModel.from_config(model.cfg)
    widths = [r.width for r in trace if r.action == "compute"]
    return EvalReport(
        energy_distance=energy_distance(samples, data),
        flop_ratio=flop_reduction(trace, fm),
        p_bar=float(np.mean([r.p for r in trace])),
        r_bar=float(np.mean(widths)) if widths else 1.0,
        summaries=trace_summary(trace),
        samples=samples,
        trace=trace)


def routing_stats(model: ElasticModel, samples: List[FlowSample]) -> Tuple[float, float]:
    """Training-style (p_bar, r_bar) on held-out flow samples (no caching)."""
    from .tensor import no_grad
    xt, _, _, t = _stack_batch(samples)
    with no_grad():
        _, ros = elastic_forward_train(model, xt, t)
    return batch_routing_stats(ros, model.elastic.tau)


def write_snapshots(path, snapshots: List[TrainSnapshot]) -> None:
    with open(path, "w") as fh:
        for s in snapshots:
            fh.write(json.dumps(s.as_dict(), sort_keys=True) + "\n")
