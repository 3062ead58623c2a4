"""Location-invariant feature encoder built from linear dual-attention blocks."""

from __future__ import annotations

import contextlib
from collections import Counter
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from ._validation import ShapeError, check_finite
from .stcg import rope_time

_counters: list[Counter] = []


@contextlib.contextmanager
def count_ops():
    """Collect multiply-add counts of every linear attention call in the block."""
    c = Counter()
    _counters.append(c)
    try:
        yield c
    finally:
        _counters.remove(c)


def _tally(n: int, d_k: int, d_v: int, batch: int) -> None:
    if _counters:
        # K^T V, phi(Q)(K^T V), K^T 1, phi(Q)(K^T 1), elementwise divide
        macs = batch * (2 * n * d_k * d_v + 2 * n * d_k + n * d_v)
        for c in _counters:
            c["linear_attention_macs"] += macs
            c["calls"] += 1


@dataclass
class EncoderConfig:
    L: int = 8
    D: int = 6
    d_model: int = 32
    n_blocks: int = 2
    eps: float = 1e-6
    ffn_hidden: int | None = None  # default 2 * d_model

    def __post_init__(self):
        if min(self.L, self.D, self.d_model) < 1 or self.n_blocks < 0:
            raise ValueError(f"encoder sizes must be positive: {self}")
        if not 0 < self.eps <= 1e-3:
            raise ValueError(f"eps must lie in (0, 1e-3], got {self.eps}")
        if self.d_model % 2:
            raise ValueError("d_model must be even for the rotary position encoding")
        if self.ffn_hidden is None:
            self.ffn_hidden = 2 * self.d_model


def phi(x: torch.Tensor) -> torch.Tensor:
    """ELU(x) + 1 evaluated as x + 1 or exp(x); stays positive where exp(x) - 1 would round to -1."""
    return torch.where(x > 0, x + 1.0, torch.exp(torch.clamp(x, max=0.0)))


def linear_attention_core(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor, eps: float) -> torch.Tensor:
    """``phi(q) (phi(k)^T v) / (phi(q) phi(k)^T 1 + eps)`` over the second-to-last axis.

    Never forms the N x N score matrix; cost is O(N d^2).
    """
    fq, fk = phi(q), phi(k)
    kv = fk.transpose(-2, -1) @ v
    z = fk.sum(dim=-2, keepdim=True).transpose(-2, -1)
    out = (fq @ kv) / (fq @ z + eps)
    _tally(q.shape[-2], q.shape[-1], v.shape[-1], q[..., 0, 0].numel())
    return check_finite(out, "linear attention output")


def quadratic_attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor, eps: float) -> torch.Tensor:
    """Reference kernel attention that materialises the N x N similarity matrix."""
    sim = phi(q) @ phi(k).transpose(-2, -1)
    return (sim @ v) / (sim.sum(dim=-1, keepdim=True) + eps)


def linear_attention(x: torch.Tensor, w_q, w_k, w_v, axis: str = "temporal", eps: float = 1e-6) -> torch.Tensor:
    """Self-attention of ``x`` (..., L, d_model) along time or along channels.

    The projection matrices act on the channel axis in both cases; the
    feature pass then treats each channel (a length-L column) as a token.
    """
    q, k, v = x @ w_q, x @ w_k, x @ w_v
    if axis == "temporal":
        return linear_attention_core(q, k, v, eps)
    if axis == "feature":
        out = linear_attention_core(q.transpose(-2, -1), k.transpose(-2, -1), v.transpose(-2, -1), eps)
        return out.transpose(-2, -1)
    raise ValueError(f"axis must be 'temporal' or 'feature', got {axis!r}")


def _init(rows: int, cols: int, generator=None) -> nn.Parameter:
    return nn.Parameter(torch.randn(rows, cols, generator=generator, dtype=torch.float64) / rows ** 0.5)


class DualAttentionBlock(nn.Module):
    def __init__(self, d_model: int, ffn_hidden: int, eps: float = 1e-6, generator=None):
        super().__init__()
        self.eps = eps
        self.wq_t, self.wk_t, self.wv_t = (_init(d_model, d_model, generator) for _ in range(3))
        self.wq_f, self.wk_f, self.wv_f = (_init(d_model, d_model, generator) for _ in range(3))
        self.w1 = _init(d_model, ffn_hidden, generator)
        self.b1 = nn.Parameter(torch.zeros(ffn_hidden, dtype=torch.float64))
        self.w2 = _init(ffn_hidden, d_model, generator)
        self.b2 = nn.Parameter(torch.zeros(d_model, dtype=torch.float64))

    def ffn(self, x: torch.Tensor) -> torch.Tensor:
        return F.elu(x @ self.w1 + self.b1) @ self.w2 + self.b2

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x_temp = x + linear_attention(x, self.wq_t, self.wk_t, self.wv_t, "temporal", self.eps)
        x_feat = x_temp + linear_attention(x_temp, self.wq_f, self.wk_f, self.wv_f, "feature", self.eps)
        return x_feat + self.ffn(x_feat)


class Encoder(nn.Module):
    """Linear embedding, rotary time encoding, then ``n_blocks`` dual-attention blocks."""

    def __init__(self, config: EncoderConfig, generator=None):
        super().__init__()
        self.config = config
        self.w_embed = _init(config.D, config.d_model, generator)
        self.blocks = nn.ModuleList(
            DualAttentionBlock(config.d_model, config.ffn_hidden, config.eps, generator)
            for _ in range(config.n_blocks)
        )

    def embed_input(self, features: torch.Tensor) -> torch.Tensor:
        cfg = self.config
        if features.shape[-2:] != (cfg.L, cfg.D):
            raise ShapeError(f"expected windows of shape (..., {cfg.L}, {cfg.D}), got {tuple(features.shape)}")
        tokens = features @ self.w_embed
        steps = torch.arange(cfg.L).numpy()
        return rope_time(tokens, steps.reshape((1,) * (tokens.dim() - 2) + (cfg.L,)))

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        x = self.embed_input(features)
        for block in self.blocks:
            x = block(x)
        return x
