"""Analytic FLOP accounting for the caching engine, the energy-distance
sample-quality proxy, and per-block trace summaries with CSV export.

FLOPs count multiply-adds as 2 each for matmuls only; activations, norms, and
the tiny timestep projections are ignored by design."""

from __future__ import annotations

import csv
import numpy as np
from dataclasses import dataclass
from typing import Iterable, List, Optional, Sequence

from scipy.spatial.distance import cdist

from .tensor import ContractError, DomainError, ShapeError


@dataclass(frozen=True)
class FlopModel:
    """Per-block costs for one token sequence of shape [tokens, dim]."""
    tokens: int
    dim: int
    hidden: int
    router_hidden: int
    menu_size: int = 4

    def __post_init__(self):
        for name in ("tokens", "dim", "hidden", "router_hidden", "menu_size"):
            if getattr(self, name) < 1:
                raise DomainError(f"{name} must be >= 1, got {getattr(self, name)}")

    @classmethod
    def from_config(cls, cfg) -> "FlopModel":
        return cls(tokens=cfg.tokens, dim=cfg.dim, hidden=cfg.hidden,
                   router_hidden=cfg.router_hidden)

    def attn(self) -> int:
        # qkv + output projections: 4 * (2 L D^2); scores + mix: 2 * (2 L^2 D)
        return 8 * self.tokens * self.dim ** 2 + 4 * self.tokens ** 2 * self.dim

    def mlp(self, width_ratio: float) -> int:
        cols = width_ratio * self.hidden
        if abs(cols - round(cols)) > 1e-9:
            raise DomainError(f"width ratio {width_ratio} gives fractional channels")
        return 4 * self.tokens * self.dim * int(round(cols))

    def router(self) -> int:
        # hidden projection plus the gate head and the width head (1 + menu outputs)
        return 2 * self.tokens * self.dim * self.router_hidden \
            + 2 * self.tokens * self.router_hidden * (1 + self.menu_size)

    def add(self) -> int:
        return self.tokens * self.dim

    def dense_block(self) -> int:
        return self.router() + self.attn() + self.mlp(1.0)


def flops_action(action, fm: FlopModel) -> int:
    """Cost of one block at one step; the router always runs."""
    if action.kind == "skip":
        return fm.router()
    if action.kind == "reuse":
        return fm.router() + fm.add()
    if action.kind == "compute":
        return fm.router() + fm.attn() + fm.mlp(action.width)
    raise ContractError(f"unknown action kind {action.kind!r}")


def flop_reduction(records: Sequence, fm: FlopModel) -> float:
    """Dense-equivalent FLOPs of the same (step, block) grid over measured FLOPs."""
    records = list(records)
    if not records:
        raise ContractError("flop_reduction: empty trace")
    dense = len(records) * fm.dense_block()
    actual = sum(r.flops for r in records)
    return dense / actual


# ---------------------------------------------------------------------------
# sample quality

def energy_distance(a: np.ndarray, b: np.ndarray) -> float:
    """2 E||a-b|| - E||a-a'|| - E||b-b'|| over all pairs (exact, no sampling)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"energy_distance: expected 2-D sample arrays, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[1]:
        raise ShapeError(f"energy_distance: feature dims differ, {a.shape[1]} vs {b.shape[1]}")
    if a.shape[0] < 1 or b.shape[0] < 1:
        raise ContractError("energy_distance: need at least one sample per side")
    return float(2.0 * cdist(a, b).mean() - cdist(a, a).mean() - cdist(b, b).mean())


# ---------------------------------------------------------------------------
# trace summaries

@dataclass(frozen=True)
class BlockSummary:
    """Routing statistics of one block aggregated over trace records."""
    block: int
    mean_p: float
    skip_rate: float
    reuse_rate: float
    mean_width: Optional[float]  # None when the block never computed


def trace_summary(records: Sequence) -> List[BlockSummary]:
    records = list(records)
    if not records:
        raise ContractError("trace_summary: empty trace")
    out = []
    for block in sorted({r.block for r in records}):
        rows = [r for r in records if r.block == block]
        n = len(rows)
        widths = [r.width for r in rows if r.action == "compute"]
        out.append(BlockSummary(
            block=block,
            mean_p=sum(r.p for r in rows) / n,
            skip_rate=sum(r.action == "skip" for r in rows) / n,
            reuse_rate=sum(r.action == "reuse" for r in rows) / n,
            mean_width=sum(widths) / len(widths) if widths else None))
    return out


# ---------------------------------------------------------------------------
# CSV export

def write_summary_csv(path, summaries: Iterable[BlockSummary]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["block", "mean_p", "skip_rate", "reuse_rate", "mean_width"])
        for s in summaries:
            w.writerow([s.block, repr(s.mean_p), repr(s.skip_rate), repr(s.reuse_rate),
                        "" if s.mean_width is None else repr(s.mean_width)])


def write_grid_csv(path, records: Sequence) -> None:
    """The step-by-block gate-probability grid of one trajectory."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "block", "p"])
        for r in records:
            w.writerow([r.step, r.block, repr(r.p)])


def write_bench_csv(path, rows: Sequence) -> None:
    """rows: (config label, flop_ratio, energy_distance) triples."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["config", "flop_ratio", "energy_distance"])
        for label, ratio, ed in rows:
            w.writerow([label, repr(float(ratio)), repr(float(ed))])
