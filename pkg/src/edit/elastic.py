"""Elastic capacity: per-block routers that decide block skipping and MLP
width, the straight-through gate, masked/sliced reduced-width MLPs, and the
efficiency losses that pull the routing statistics toward their targets."""

from __future__ import annotations

import numpy as np
from dataclasses import dataclass, field
from typing import List, Tuple, Union

from .tensor import (Tensor, ContractError, DomainError, add, col_slice, gelu,
                     layer_norm, mask_mul, matmul, mean_all, mean_axis, mul,
                     row_slice, sigmoid, softmax_last, stop_gradient, sub, sum_last)
from .model import (BlockWeights, CheckpointError, DiTConfig, DiTParams,
                    block_forward, init_params, load_checkpoint, modulate,
                    save_checkpoint, timestep_embed)


@dataclass(frozen=True)
class WidthMenu:
    """Discrete MLP width ratios the router can choose from."""
    ratios: Tuple[float, ...] = (0.25, 0.5, 0.75, 1.0)

    def __post_init__(self):
        if not self.ratios or self.ratios[-1] != 1.0:
            raise ValueError(f"width menu must end at ratio 1.0, got {self.ratios}")
        if any(not (0.0 < r <= 1.0) for r in self.ratios):
            raise ValueError(f"width ratios must lie in (0, 1], got {self.ratios}")
        if any(a >= b for a, b in zip(self.ratios, self.ratios[1:])):
            raise ValueError(f"width ratios must be strictly increasing, got {self.ratios}")

    def channels(self, hidden: int, ratio: float) -> int:
        """Hidden-channel count for a ratio; the ratio must be on the menu."""
        if ratio not in self.ratios:
            raise DomainError(f"width ratio {ratio} not in menu {self.ratios}")
        cols = ratio * hidden
        if abs(cols - round(cols)) > 1e-9:
            raise DomainError(f"ratio {ratio} of hidden {hidden} is not an integer channel count")
        return int(round(cols))


@dataclass(frozen=True)
class ElasticConfig:
    """Gating threshold, routing targets, and the efficiency-loss weight."""
    tau: float = 0.5
    rho_g: float = 0.6
    rho_w: float = 0.65
    lambda_eff: float = 1.0
    menu: WidthMenu = field(default_factory=WidthMenu)

    def __post_init__(self):
        if not (0.0 < self.tau < 1.0):
            raise ValueError(f"tau must be in (0, 1), got {self.tau}")
        if not (0.0 < self.rho_g < 1.0):
            raise ValueError(f"rho_g must be in (0, 1), got {self.rho_g}")
        if not (0.0 < self.rho_w <= 1.0):
            raise ValueError(f"rho_w must be in (0, 1], got {self.rho_w}")
        if self.lambda_eff < 0.0:
            raise ValueError(f"lambda_eff must be >= 0, got {self.lambda_eff}")


@dataclass
class RouterWeights:
    """Per-block router: timestep modulation, a small hidden projection, and
    gate/width heads with biases (the biases carry the full-capacity init)."""
    mod: Tensor
    w: Tensor
    w_g: Tensor
    w_w: Tensor
    gate_bias: Tensor
    width_bias: Tensor

    def named(self, prefix: str) -> List[Tuple[str, Tensor]]:
        return [(f"{prefix}.mod", self.mod), (f"{prefix}.w", self.w),
                (f"{prefix}.w_g", self.w_g), (f"{prefix}.w_w", self.w_w),
                (f"{prefix}.gate_bias", self.gate_bias), (f"{prefix}.width_bias", self.width_bias)]


@dataclass
class RouterOutput:
    """Everything one router emits for one block input."""
    gate_logit: Tensor          # [..., 1, 1]
    gate_prob: Tensor           # sigmoid(gate_logit)
    width_logits: Tensor        # [..., 1, menu]
    width_probs: Tensor         # softmax of width_logits
    soft_width: Tensor          # sum_j q_j * ratio_j, [..., 1, 1]
    width_index: Union[int, np.ndarray]
    width_ratio: Union[float, np.ndarray]

    @property
    def p_value(self) -> float:
        return self.gate_prob.item()


FULL_CAPACITY_GATE_BIAS = float(np.log(19.0))  # logit(0.95)


def init_routers_full_capacity(cfg: DiTConfig, rng: np.random.Generator,
                               menu: WidthMenu = WidthMenu()) -> List[RouterWeights]:
    """Routers that start with every block on (p ~ 0.95) at full width."""
    routers = []
    for _ in range(cfg.n_blocks):
        wb = np.zeros((1, len(menu.ratios)))
        wb[0, -1] = 4.0
        routers.append(RouterWeights(
            mod=Tensor(0.02 * rng.standard_normal((cfg.dim, 2 * cfg.dim)), requires_grad=True),
            w=Tensor(0.02 * rng.standard_normal((cfg.dim, cfg.router_hidden)), requires_grad=True),
            w_g=Tensor(0.02 * rng.standard_normal((cfg.router_hidden, 1)), requires_grad=True),
            w_w=Tensor(0.02 * rng.standard_normal((cfg.router_hidden, len(menu.ratios))), requires_grad=True),
            gate_bias=Tensor(FULL_CAPACITY_GATE_BIAS, requires_grad=True),
            width_bias=Tensor(wb, requires_grad=True)))
    return routers


def init_routers_random(cfg: DiTConfig, rng: np.random.Generator,
                        menu: WidthMenu = WidthMenu()) -> List[RouterWeights]:
    """Ablation baseline: blocks start randomly gated.

    Gate logits are stratified over [-4, 4] (one per equal stratum, jittered,
    then shuffled across blocks) rather than drawn iid: with only a handful of
    blocks, iid draws leave every gate open on a non-trivial fraction of seeds,
    which silently turns the baseline into a near-full-capacity init."""
    n = cfg.n_blocks
    strata = np.linspace(-4.0, 4.0, n + 1)[:-1]
    logits = rng.permutation(strata + rng.uniform(size=n) * (8.0 / n))
    routers = []
    for i in range(cfg.n_blocks):
        routers.append(RouterWeights(
            mod=Tensor(0.02 * rng.standard_normal((cfg.dim, 2 * cfg.dim)), requires_grad=True),
            w=Tensor(0.02 * rng.standard_normal((cfg.dim, cfg.router_hidden)), requires_grad=True),
            w_g=Tensor(0.02 * rng.standard_normal((cfg.router_hidden, 1)), requires_grad=True),
            w_w=Tensor(0.02 * rng.standard_normal((cfg.router_hidden, len(menu.ratios))), requires_grad=True),
            gate_bias=Tensor(np.asarray(logits[i]), requires_grad=True),
            width_bias=Tensor(2.0 * rng.standard_normal((1, len(menu.ratios))), requires_grad=True)))
    return routers


# ---------------------------------------------------------------------------
# router forward

def select_width(width_probs: np.ndarray, menu: WidthMenu) -> Tuple[Union[int, np.ndarray],
                                                                    Union[float, np.ndarray]]:
    """Argmax over the menu with ties broken toward the largest index."""
    q = np.asarray(width_probs, dtype=np.float64)
    if q.shape[-1] != len(menu.ratios):
        raise DomainError(f"width probs last axis {q.shape[-1]} != menu size {len(menu.ratios)}")
    last = len(menu.ratios) - 1
    idx = last - np.argmax(q[..., ::-1], axis=-1)
    if q.ndim <= 2:
        i = int(idx.reshape(()))
        return i, menu.ratios[i]
    idx = idx[..., 0]  # drop the singleton token axis -> one index per sample
    ratios = np.asarray(menu.ratios)[idx]
    return idx, ratios


def router_forward(x: Tensor, t_emb: Tensor, rw: RouterWeights,
                   menu: WidthMenu = WidthMenu(), ln_eps: float = 1e-6) -> RouterOutput:
    """Run one router on a block input; x is [..., L, D], t_emb [..., 1, D]."""
    d = x.shape[-1]
    m = matmul(t_emb, rw.mod)
    gamma, shift = col_slice(m, 0, d), col_slice(m, d, 2 * d)
    h = gelu(matmul(modulate(x, gamma, shift, ln_eps), rw.w))
    gate_logit = add(mean_axis(matmul(h, rw.w_g)), rw.gate_bias)
    width_logits = add(mean_axis(matmul(h, rw.w_w)), rw.width_bias)
    gate_prob = sigmoid(gate_logit)
    width_probs = softmax_last(width_logits)
    soft_width = sum_last(mask_mul(width_probs, np.asarray(menu.ratios)))
    idx, ratio = select_width(width_probs.values, menu)
    return RouterOutput(gate_logit=gate_logit, gate_prob=gate_prob,
                        width_logits=width_logits, width_probs=width_probs,
                        soft_width=soft_width, width_index=idx, width_ratio=ratio)


def ste_gate(p: Tensor, tau: float, surrogate: bool = True) -> Tensor:
    """Hard gate 1[p >= tau] whose reverse pass pretends dg/dp = 1.

    Composed as indicator + (p - stop_gradient(p)): the residual term is exactly
    zero in the forward pass, so the value is the indicator bitwise, while the
    surviving p keeps the gradient path open. With surrogate=False the gate is
    a plain constant (used by finite-difference checks).
    """
    hard = Tensor((p.values >= tau).astype(np.float64))
    if not surrogate:
        return hard
    return add(hard, sub(p, stop_gradient(p)))


# ---------------------------------------------------------------------------
# reduced-width MLPs

def width_mask(s_hat: float, hidden: int, menu: WidthMenu = WidthMenu()) -> np.ndarray:
    """0/1 mask over hidden channels keeping the first s_hat * hidden of them."""
    cols = menu.channels(hidden, float(s_hat))
    m = np.zeros(hidden)
    m[:cols] = 1.0
    return m


def mlp_masked(z: Tensor, s_hat: float, w1: Tensor, w2: Tensor,
               menu: WidthMenu = WidthMenu()) -> Tensor:
    """(gelu(z @ w1) * mask) @ w2; the mask is constant for the reverse pass."""
    mask = width_mask(s_hat, w1.shape[-1], menu)
    return matmul(mask_mul(gelu(matmul(z, w1)), mask), w2)


def mlp_sliced(z: Tensor, s_hat: float, w1: Tensor, w2: Tensor,
               menu: WidthMenu = WidthMenu()) -> Tensor:
    """Inference form: actually drop the pruned channels instead of masking."""
    cols = menu.channels(w1.shape[-1], float(s_hat))
    return matmul(gelu(matmul(z, col_slice(w1, 0, cols))), row_slice(w2, 0, cols))


def _mlp_batch_masked(z: Tensor, mask: np.ndarray, w1: Tensor, w2: Tensor) -> Tensor:
    # mask may carry per-sample rows, e.g. [B, 1, hidden]
    return matmul(mask_mul(gelu(matmul(z, w1)), mask), w2)


def batch_width_masks(width_index: Union[int, np.ndarray], hidden: int,
                      menu: WidthMenu = WidthMenu()) -> np.ndarray:
    """Stack per-sample channel masks; [1, H] for a scalar index, [B, 1, H] else."""
    if np.isscalar(width_index) or np.ndim(width_index) == 0:
        return width_mask(menu.ratios[int(width_index)], hidden, menu).reshape(1, hidden)
    idx = np.asarray(width_index)
    masks = np.zeros((idx.size, 1, hidden))
    for b, i in enumerate(idx.reshape(-1)):
        masks[b, 0, :menu.channels(hidden, menu.ratios[int(i)])] = 1.0
    return masks


# ---------------------------------------------------------------------------
# gated block and losses

def gated_block_train(x: Tensor, t_emb: Tensor, w: BlockWeights, rw: RouterWeights,
                      ecfg: ElasticConfig, n_heads: int,
                      surrogate: bool = True) -> Tuple[Tensor, RouterOutput]:
    """Training-time block: x + g * (B(x) - x) with B at the router's width."""
    ro = router_forward(x, t_emb, rw, ecfg.menu, w.ln_eps)
    g = ste_gate(ro.gate_prob, ecfg.tau, surrogate)
    masks = batch_width_masks(ro.width_index, w.w1.shape[-1], ecfg.menu)
    bx = block_forward(x, t_emb, w, n_heads,
                       lambda z: _mlp_batch_masked(z, masks, w.w1, w.w2))
    return add(x, mul(g, sub(bx, x))), ro


def gating_loss(gate_probs: List[Tensor], rho_g: float) -> Tensor:
    """(mean block gate probability - rho_g)^2, averaged over the batch."""
    if not gate_probs:
        raise ContractError("gating_loss: need at least one gate probability")
    acc = gate_probs[0]
    for p in gate_probs[1:]:
        acc = add(acc, p)
    d = sub(mul(acc, 1.0 / len(gate_probs)), rho_g)
    return mean_all(mul(d, d))


def width_loss(routers: List[RouterOutput], tau: float, rho_w: float) -> Tensor:
    """(active-blocks mean soft width - rho_w)^2, averaged over the batch.

    A sample with no active block (all p < tau) contributes exactly zero.
    """
    if not routers:
        raise ContractError("width_loss: need at least one router output")
    active = [(ro.gate_prob.values >= tau).astype(np.float64) for ro in routers]
    num = mask_mul(routers[0].soft_width, active[0])
    for ro, a in zip(routers[1:], active[1:]):
        num = add(num, mask_mul(ro.soft_width, a))
    den = np.sum(active, axis=0)
    has_active = (den > 0).astype(np.float64)
    rbar = mask_mul(num, 1.0 / np.where(den > 0, den, 1.0))
    d = sub(rbar, rho_w)
    return mean_all(mask_mul(mul(d, d), has_active))


def total_loss(perf: Tensor, gating: Tensor, width: Tensor, lambda_eff: float) -> Tensor:
    """perf + lambda * (gating + width)."""
    return add(perf, mul(add(gating, width), lambda_eff))


# ---------------------------------------------------------------------------
# whole elastic model

@dataclass
class ElasticModel:
    """Backbone plus one router per block."""
    cfg: DiTConfig
    elastic: ElasticConfig
    params: DiTParams
    routers: List[RouterWeights]

    def named_parameters(self) -> List[Tuple[str, Tensor]]:
        out = self.params.named()
        for i, rw in enumerate(self.routers):
            out.extend(rw.named(f"router{i}"))
        return out

    def parameters(self) -> List[Tensor]:
        return [t for _, t in self.named_parameters()]

    def router_parameters(self) -> List[Tensor]:
        return [t for rw in self.routers for _, t in rw.named("r")]

    def state_arrays(self) -> List[Tuple[str, np.ndarray]]:
        return [(name, t.values) for name, t in self.named_parameters()]


def build_model(cfg: DiTConfig, ecfg: ElasticConfig, rng: np.random.Generator,
                router_init: str = "full_capacity") -> ElasticModel:
    params = init_params(cfg, rng)
    if router_init == "full_capacity":
        routers = init_routers_full_capacity(cfg, rng, ecfg.menu)
    elif router_init == "random":
        routers = init_routers_random(cfg, rng, ecfg.menu)
    else:
        raise ValueError(f"router_init must be 'full_capacity' or 'random', got {router_init!r}")
    return ElasticModel(cfg=cfg, elastic=ecfg, params=params, routers=routers)


def save_model(model: ElasticModel, path) -> None:
    save_checkpoint(model.state_arrays(), path)


def load_model(path, cfg: DiTConfig, ecfg: ElasticConfig) -> ElasticModel:
    arrays = load_checkpoint(path)
    model = build_model(cfg, ecfg, np.random.default_rng(0))
    named = dict(model.named_parameters())
    if set(arrays) != set(named):
        missing = sorted(set(named) - set(arrays))
        extra = sorted(set(arrays) - set(named))
        raise CheckpointError(f"parameter names do not match config (missing {missing}, extra {extra})")
    for name, arr in arrays.items():
        if named[name].values.shape != arr.shape:
            raise CheckpointError(
                f"shape mismatch for {name!r}: checkpoint {arr.shape} vs config {named[name].values.shape}")
        named[name].values = arr
    return model


def elastic_forward_train(model: ElasticModel, x: Union[Tensor, np.ndarray],
                          t, surrogate: bool = True) -> Tuple[Tensor, List[RouterOutput]]:
    """Velocity prediction through gated blocks; returns all router outputs."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    z = matmul(x, model.params.input_w)
    t_emb = timestep_embed(t, model.params.embed_w, model.cfg)
    ros = []
    for w, rw in zip(model.params.blocks, model.routers):
        z, ro = gated_block_train(z, t_emb, w, rw, model.elastic, model.cfg.n_heads, surrogate)
        ros.append(ro)
    v = matmul(layer_norm(z), model.params.head_w)
    return v, ros


def decision_signature(routers: List[RouterOutput], tau: float) -> tuple:
    """Hashable record of every discrete routing decision (gates and widths)."""
    sig = []
    for ro in routers:
        gates = tuple(bool(v) for v in (ro.gate_prob.values >= tau).reshape(-1))
        widths = tuple(int(i) for i in np.atleast_1d(ro.width_index).reshape(-1))
        sig.append((gates, widths))
    return tuple(sig)
