"""Toy denoising transformer: pre-norm residual blocks with multi-head
self-attention and a 4x MLP, conditioned on a sinusoidal timestep embedding
through per-block scale/shift/gate modulation. Also owns the fixed binary
checkpoint format shared with the CLI."""

from __future__ import annotations

import json
import numpy as np
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Tuple, Union

from .tensor import (Tensor, DomainError, ShapeError, add, col_slice, concat_last,
                     gelu, layer_norm, matmul, mul, softmax_last, transpose_last)


@dataclass(frozen=True)
class DiTConfig:
    """Backbone dimensions; hidden width is width_factor * dim."""
    n_blocks: int = 8
    dim: int = 32
    width_factor: int = 4
    router_hidden: int = 8
    n_heads: int = 4
    tokens: int = 16
    embed_period: float = 1000.0

    def __post_init__(self):
        if self.n_blocks < 1:
            raise ValueError(f"n_blocks must be >= 1, got {self.n_blocks}")
        if self.dim < 2 or self.dim % 2 != 0:
            raise ValueError(f"dim must be an even integer >= 2, got {self.dim}")
        if self.width_factor < 1:
            raise ValueError(f"width_factor must be >= 1, got {self.width_factor}")
        if self.n_heads < 1 or self.dim % self.n_heads != 0:
            raise ValueError(f"n_heads must divide dim, got n_heads={self.n_heads} dim={self.dim}")
        if not (1 <= self.router_hidden < self.dim):
            raise ValueError(f"router_hidden must be in [1, dim), got {self.router_hidden}")
        if self.tokens < 1:
            raise ValueError(f"tokens must be >= 1, got {self.tokens}")
        if self.embed_period <= 0:
            raise ValueError(f"embed_period must be > 0, got {self.embed_period}")
        if self.hidden % 4 != 0:
            raise ValueError(f"hidden width must be divisible by 4, got {self.hidden}")

    @property
    def hidden(self) -> int:
        return self.width_factor * self.dim

    @property
    def head_dim(self) -> int:
        return self.dim // self.n_heads


@dataclass
class BlockWeights:
    """One transformer block: attention projections, MLP, and the modulation
    projection mapping the timestep embedding to scale/shift/gate vectors."""
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    w1: Tensor
    w2: Tensor
    mod: Tensor
    ln_eps: float = 1e-6

    def named(self, prefix: str) -> List[Tuple[str, Tensor]]:
        return [(f"{prefix}.wq", self.wq), (f"{prefix}.wk", self.wk),
                (f"{prefix}.wv", self.wv), (f"{prefix}.wo", self.wo),
                (f"{prefix}.w1", self.w1), (f"{prefix}.w2", self.w2),
                (f"{prefix}.mod", self.mod)]


@dataclass
class DiTParams:
    """All backbone parameters, checkpoint order = named() order."""
    embed_w: Tensor
    input_w: Tensor
    blocks: List[BlockWeights]
    head_w: Tensor

    def named(self) -> List[Tuple[str, Tensor]]:
        out = [("embed.w", self.embed_w), ("input.w", self.input_w)]
        for i, b in enumerate(self.blocks):
            out.extend(b.named(f"block{i}"))
        out.append(("head.w", self.head_w))
        return out

    def tensors(self) -> List[Tensor]:
        return [t for _, t in self.named()]


def _param(rng, shape, std) -> Tensor:
    if std == 0.0:
        return Tensor(np.zeros(shape), requires_grad=True)
    return Tensor(std * rng.standard_normal(shape), requires_grad=True)


def init_params(cfg: DiTConfig, rng: np.random.Generator) -> DiTParams:
    """Training init: 1/sqrt(fan_in) projections, zero modulation, zero head.

    Zero modulation makes every block start as an exact identity and the zero
    head makes the initial velocity field zero; both stabilize early steps.
    """
    d, h = cfg.dim, cfg.hidden
    ps = d ** -0.5
    blocks = []
    for _ in range(cfg.n_blocks):
        blocks.append(BlockWeights(
            wq=_param(rng, (d, d), ps), wk=_param(rng, (d, d), ps),
            wv=_param(rng, (d, d), ps), wo=_param(rng, (d, d), ps),
            w1=_param(rng, (d, h), ps), w2=_param(rng, (h, d), h ** -0.5),
            mod=_param(rng, (d, 6 * d), 0.0)))
    return DiTParams(embed_w=_param(rng, (d, d), ps),
                     input_w=_param(rng, (d, d), ps),
                     blocks=blocks,
                     head_w=_param(rng, (d, d), 0.0))


def random_params(cfg: DiTConfig, rng: np.random.Generator, scale: float = 0.05) -> DiTParams:
    """Every weight ~ N(0, scale^2); used for gradient checks and tests where a
    degenerate zero head/modulation would hide bugs."""
    d, h = cfg.dim, cfg.hidden
    blocks = []
    for _ in range(cfg.n_blocks):
        blocks.append(BlockWeights(
            wq=_param(rng, (d, d), scale), wk=_param(rng, (d, d), scale),
            wv=_param(rng, (d, d), scale), wo=_param(rng, (d, d), scale),
            w1=_param(rng, (d, h), scale), w2=_param(rng, (h, d), scale),
            mod=_param(rng, (d, 6 * d), scale)))
    return DiTParams(embed_w=_param(rng, (d, d), scale),
                     input_w=_param(rng, (d, d), scale),
                     blocks=blocks,
                     head_w=_param(rng, (d, d), scale))


# ---------------------------------------------------------------------------
# forward pieces

def timestep_features(t: Union[float, np.ndarray], cfg: DiTConfig) -> np.ndarray:
    """Sinusoidal features of t at dim/2 frequencies spanning [1, embed_period].

    Scalar t gives a [1, dim] row; a [B] vector gives [B, 1, dim].
    """
    arr = np.asarray(t, dtype=np.float64)
    if np.any(arr < 0.0) or np.any(arr > 1.0):
        raise DomainError(f"t must be in [0, 1], got {t}")
    half = cfg.dim // 2
    if half == 1:
        freqs = np.ones(1)
    else:
        freqs = cfg.embed_period ** (np.arange(half) / (half - 1))
    ang = arr.reshape(arr.shape + (1, 1)) * freqs  # [..., 1, half]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)


def timestep_embed(t: Union[float, np.ndarray], embed_w: Tensor, cfg: DiTConfig) -> Tensor:
    """E(t): sinusoidal features through one learned linear layer with GELU."""
    return gelu(matmul(Tensor(timestep_features(t, cfg)), embed_w))


def modulate(x: Tensor, scale: Tensor, shift: Tensor, eps: float = 1e-6) -> Tensor:
    """(1 + scale) * LN(x) + shift, with scale/shift row vectors over tokens."""
    return add(mul(add(scale, 1.0), layer_norm(x, eps)), shift)


def mhsa(x: Tensor, w: BlockWeights, n_heads: int) -> Tensor:
    """Bidirectional multi-head self-attention (no mask, no biases)."""
    d = x.shape[-1]
    if d % n_heads != 0:
        raise ShapeError(f"mhsa: n_heads={n_heads} must divide dim={d}")
    dh = d // n_heads
    q, k, v = matmul(x, w.wq), matmul(x, w.wk), matmul(x, w.wv)
    heads = []
    for i in range(n_heads):
        qh = col_slice(q, i * dh, (i + 1) * dh)
        kh = col_slice(k, i * dh, (i + 1) * dh)
        vh = col_slice(v, i * dh, (i + 1) * dh)
        scores = mul(matmul(qh, transpose_last(kh)), dh ** -0.5)
        heads.append(matmul(softmax_last(scores), vh))
    return matmul(concat_last(heads), w.wo)


def mlp_dense(z: Tensor, w1: Tensor, w2: Tensor) -> Tensor:
    """Full-width block MLP: gelu(z @ w1) @ w2."""
    return matmul(gelu(matmul(z, w1)), w2)


def block_forward(x: Tensor, t_emb: Tensor, w: BlockWeights, n_heads: int,
                  mlp_fn: Callable[[Tensor], Tensor]) -> Tensor:
    """Shared block skeleton; `mlp_fn` picks dense / masked / sliced MLPs so
    all variants run the identical modulation and attention arithmetic."""
    d = x.shape[-1]
    m = matmul(t_emb, w.mod)
    sa, ha, ga = col_slice(m, 0, d), col_slice(m, d, 2 * d), col_slice(m, 2 * d, 3 * d)
    sm, hm, gm = col_slice(m, 3 * d, 4 * d), col_slice(m, 4 * d, 5 * d), col_slice(m, 5 * d, 6 * d)
    x = add(x, mul(ga, mhsa(modulate(x, sa, ha, w.ln_eps), w, n_heads)))
    x = add(x, mul(gm, mlp_fn(modulate(x, sm, hm, w.ln_eps))))
    return x


def block_forward_dense(x: Tensor, t_emb: Tensor, w: BlockWeights, n_heads: int) -> Tensor:
    return block_forward(x, t_emb, w, n_heads, lambda z: mlp_dense(z, w.w1, w.w2))


def model_forward_dense(x: Union[Tensor, np.ndarray], t: Union[float, np.ndarray],
                        params: DiTParams, cfg: DiTConfig) -> Tensor:
    """Velocity prediction with every block at full capacity."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    if x.shape[-2:] != (cfg.tokens, cfg.dim):
        raise ShapeError(f"model_forward_dense: expected [..., {cfg.tokens}, {cfg.dim}], got {x.shape}")
    z = matmul(x, params.input_w)
    t_emb = timestep_embed(t, params.embed_w, cfg)
    for w in params.blocks:
        z = block_forward_dense(z, t_emb, w, cfg.n_heads)
    return matmul(layer_norm(z), params.head_w)


# ---------------------------------------------------------------------------
# checkpoint format: 8-byte magic, one-line UTF-8 JSON header, then raw
# little-endian float32 arrays back to back in header order.

CHECKPOINT_MAGIC = b"EDITCKPT"


class CheckpointError(Exception):
    """Checkpoint file is malformed or inconsistent."""


def save_checkpoint(arrays: Union[Dict[str, np.ndarray], List[Tuple[str, np.ndarray]]],
                    path) -> None:
    items = list(arrays.items()) if isinstance(arrays, dict) else list(arrays)
    entries, blobs, offset = [], [], 0
    for name, arr in items:
        arr = np.asarray(arr)
        blob = arr.astype("<f4").tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps({"dtype": "f32", "params": entries},
                        separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(header)
        fh.write(b"\n")
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path) -> Dict[str, np.ndarray]:
    """Read a checkpoint back as float64 arrays (f32 precision on the wire)."""
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"bad magic in {path}")
    end = buf.find(b"\n", 8)
    if end < 0:
        raise CheckpointError(f"missing header terminator in {path}")
    try:
        header = json.loads(buf[8:end].decode("utf-8"))
        entries = header["params"]
        dtype = header["dtype"]
    except (ValueError, KeyError, UnicodeDecodeError) as e:
        raise CheckpointError(f"malformed header in {path}: {e}") from None
    if dtype != "f32":
        raise CheckpointError(f"unsupported dtype {dtype!r} in {path}")
    data = buf[end + 1:]
    out = {}
    for entry in entries:
        try:
            name, shape, offset = entry["name"], tuple(entry["shape"]), int(entry["offset"])
        except (KeyError, TypeError) as e:
            raise CheckpointError(f"malformed entry in {path}: {e}") from None
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        stop = offset + 4 * count
        if stop > len(data):
            raise CheckpointError(f"truncated data for {name!r} in {path}")
        arr = np.frombuffer(data[offset:stop], dtype="<f4").reshape(shape)
        out[name] = arr.astype(np.float64)
    return out
