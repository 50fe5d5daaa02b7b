"""Block-wise caching inference: every block's router always runs, then the
block is skipped, recomputed at a reduced width, or patched with its cached
residual delta. The delta bank lives across denoising steps."""

from __future__ import annotations

import csv
import numpy as np
from dataclasses import dataclass
from typing import List, Optional, Tuple

from .tensor import Tensor, DomainError, no_grad, layer_norm, matmul
from .model import BlockWeights, block_forward, timestep_embed
from .elastic import ElasticModel, RouterOutput, WidthMenu, mlp_sliced, router_forward
from .metrics import FlopModel, flops_action


@dataclass(frozen=True)
class InferenceConfig:
    """Engine knobs: gate threshold, borderline margin, reuse budget, steps."""
    tau: float = 0.5
    delta_margin: float = 0.1
    max_reuse: int = 5
    steps: int = 32
    dense_override: bool = False
    force_full_width: bool = False

    def __post_init__(self):
        if not (0.0 < self.tau < 1.0):
            raise ValueError(f"tau must be in (0, 1), got {self.tau}")
        if self.delta_margin < 0.0:
            raise ValueError(f"delta_margin must be >= 0, got {self.delta_margin}")
        if self.max_reuse < 0:
            raise ValueError(f"max_reuse must be >= 0, got {self.max_reuse}")
        if self.steps < 1:
            raise ValueError(f"sample_steps must be >= 1, got {self.steps}")


@dataclass
class CacheEntry:
    """Cached residual delta of one block plus its consecutive-reuse count."""
    delta: Optional[np.ndarray]
    reuse_count: int = 0


@dataclass(frozen=True)
class BlockAction:
    kind: str                    # "skip" | "reuse" | "compute"
    width: Optional[float] = None

    def __post_init__(self):
        if self.kind not in ("skip", "reuse", "compute"):
            raise ValueError(f"unknown action kind {self.kind!r}")
        if self.kind == "compute" and self.width is None:
            raise ValueError("compute actions must carry a width ratio")


SKIP = BlockAction("skip")
REUSE = BlockAction("reuse")


@dataclass(frozen=True)
class TraceRecord:
    """One (denoising step, block) event."""
    step: int
    block: int
    p: float
    action: str
    width: Optional[float]
    flops: int


def decide_action(p: float, entry: Optional[CacheEntry], cfg: InferenceConfig,
                  s_hat: float = 1.0) -> BlockAction:
    """Skip below tau; reuse in the borderline band while budget and cache
    allow; otherwise compute at the router's width."""
    if cfg.dense_override:
        return BlockAction("compute", 1.0)
    if cfg.force_full_width:
        s_hat = 1.0
    if p < cfg.tau:
        return SKIP
    if p <= cfg.tau + cfg.delta_margin and entry is not None and entry.reuse_count < cfg.max_reuse:
        return REUSE
    return BlockAction("compute", s_hat)


def apply_action(action: BlockAction, bank: List[Optional[CacheEntry]], i: int,
                 delta: Optional[np.ndarray] = None) -> None:
    """Advance the cache state: reuses burn budget, computes refill the bank."""
    if action.kind == "reuse":
        bank[i].reuse_count += 1
    elif action.kind == "compute":
        bank[i] = CacheEntry(delta=delta, reuse_count=0)


def block_forward_sliced(x: Tensor, t_emb: Tensor, w: BlockWeights, s_hat: float,
                         n_heads: int, menu: WidthMenu) -> Tensor:
    return block_forward(x, t_emb, w, n_heads,
                         lambda z: mlp_sliced(z, s_hat, w.w1, w.w2, menu))


def block_step(x: Tensor, t_emb: Tensor, w: BlockWeights, bank: List[Optional[CacheEntry]],
               i: int, cfg: InferenceConfig, fm: FlopModel, step: int, n_heads: int,
               menu: WidthMenu, router_out: RouterOutput) -> Tuple[Tensor, TraceRecord]:
    """Apply one block under the caching policy; returns the next features."""
    p = router_out.gate_prob.item()
    s_hat = float(router_out.width_ratio)
    action = decide_action(p, bank[i], cfg, s_hat)
    delta = None
    if action.kind == "skip":
        x_next = x
    elif action.kind == "reuse":
        x_next = Tensor(x.values + bank[i].delta)
    else:
        x_next = block_forward_sliced(x, t_emb, w, action.width, n_heads, menu)
        delta = x_next.values - x.values
    apply_action(action, bank, i, delta)
    rec = TraceRecord(step=step, block=i, p=p, action=action.kind,
                      width=action.width, flops=flops_action(action, fm))
    return x_next, rec


def denoise_full(model: ElasticModel, cfg: InferenceConfig,
                 seed: int) -> Tuple[np.ndarray, List[TraceRecord]]:
    """Run the full cached sampler from seeded noise down to a sample.

    The delta bank is created once and persists across all denoising steps;
    step indices count down from cfg.steps to 1 with continuous time step/steps.
    """
    dit = model.cfg
    fm = FlopModel.from_config(dit)
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((dit.tokens, dit.dim))
    bank: List[Optional[CacheEntry]] = [None] * dit.n_blocks
    trace: List[TraceRecord] = []
    with no_grad():
        for step in range(cfg.steps, 0, -1):
            t = step / cfg.steps
            t_emb = timestep_embed(t, model.params.embed_w, dit)
            z = matmul(Tensor(x), model.params.input_w)
            for i, (w, rw) in enumerate(zip(model.params.blocks, model.routers)):
                ro = router_forward(z, t_emb, rw, model.elastic.menu, w.ln_eps)
                z, rec = block_step(z, t_emb, w, bank, i, cfg, fm, step,
                                    dit.n_heads, model.elastic.menu, ro)
                trace.append(rec)
            v = matmul(layer_norm(z), model.params.head_w)
            x = x - (1.0 / cfg.steps) * v.values
    return x, trace


def oracle_schedule(p_grid: np.ndarray, cfg: InferenceConfig) -> List[List[str]]:
    """Scalar re-derivation of the caching policy from a [steps, blocks] grid of
    gate probabilities. Kept deliberately independent of decide_action so the
    engine can be checked against it."""
    p_grid = np.asarray(p_grid, dtype=np.float64)
    if p_grid.ndim != 2:
        raise DomainError(f"oracle_schedule: expected a 2-D grid, got {p_grid.shape}")
    steps, blocks = p_grid.shape
    has_cache = [False] * blocks
    reuses = [0] * blocks
    actions: List[List[str]] = []
    for s in range(steps):
        row = []
        for b in range(blocks):
            p = p_grid[s, b]
            if cfg.dense_override:
                kind = "compute"
            elif p < cfg.tau:
                kind = "skip"
            elif p <= cfg.tau + cfg.delta_margin and has_cache[b] and reuses[b] < cfg.max_reuse:
                kind = "reuse"
            else:
                kind = "compute"
            if kind == "reuse":
                reuses[b] += 1
            elif kind == "compute":
                has_cache[b] = True
                reuses[b] = 0
            row.append(kind)
        actions.append(row)
    return actions


def write_trace_csv(path, records) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "block", "p", "action", "width_ratio", "flops"])
        for r in records:
            w.writerow([r.step, r.block, repr(r.p), r.action,
                        "" if r.width is None else repr(r.width), r.flops])
