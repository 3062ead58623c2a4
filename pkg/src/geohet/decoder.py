"""Dual-branch conditional decoder and the joint loss."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from ._validation import check_finite
from .encoder import _init


@dataclass
class DecoderConfig:
    intercept: bool = False
    loss_weights: tuple[float, float] = (1.0, 1.0)  # (dependent, interpretable)
    d_k: int | None = None  # default d_model
    ffn_hidden: int | None = None  # default 2 * d_model


def cross_attention(tokens: torch.Tensor, memory: torch.Tensor, w_q, w_k, w_g, b_g, w_v,
                    return_weights: bool = False):
    """``softmax(Q K^T / sqrt(d_k)) V`` with queries/keys from tokens, values from memory.

    ``K_i = (token_i W_K) * sigmoid(mean(memory) W_G + b_G)`` and every value
    row is ``mean(memory) W_V``, broadcast over the L token positions.
    """
    pooled = memory.mean(dim=-2)  # (B, d_cond)
    q = tokens @ w_q
    k = (tokens @ w_k) * torch.sigmoid(pooled @ w_g + b_g).unsqueeze(-2)
    v = (pooled @ w_v).unsqueeze(-2).expand(*tokens.shape[:-1], w_v.shape[1])
    logits = check_finite(q @ k.transpose(-2, -1) / math.sqrt(q.shape[-1]), "cross-attention logits")
    attn = torch.softmax(logits, dim=-1)
    out = attn @ v
    return (out, attn) if return_weights else out


class DecoderBranch(nn.Module):
    def __init__(self, d_model: int, d_cond: int, out_dim: int, d_k: int | None = None,
                 ffn_hidden: int | None = None, generator=None):
        super().__init__()
        d_k = d_k or d_model
        hidden = ffn_hidden or 2 * d_model
        self.w_q = _init(d_model, d_k, generator)
        self.w_k = _init(d_model, d_k, generator)
        self.w_g = _init(d_cond, d_k, generator)
        self.b_g = nn.Parameter(torch.zeros(d_k, dtype=torch.float64))
        self.w_v = _init(d_cond, d_model, generator)
        self.w1 = _init(d_model, hidden, generator)
        self.b1 = nn.Parameter(torch.zeros(hidden, dtype=torch.float64))
        self.w2 = _init(hidden, d_model, generator)
        self.b2 = nn.Parameter(torch.zeros(d_model, dtype=torch.float64))
        self.w_out = _init(d_model, out_dim, generator)
        self.b_out = nn.Parameter(torch.zeros(out_dim, dtype=torch.float64))

    def forward(self, tokens: torch.Tensor, memory: torch.Tensor) -> torch.Tensor:
        x = tokens + cross_attention(tokens, memory, self.w_q, self.w_k, self.w_g, self.b_g, self.w_v)
        x = x + F.elu(x @ self.w1 + self.b1) @ self.w2 + self.b2
        return x.mean(dim=-2) @ self.w_out + self.b_out


class DualDecoder(nn.Module):
    """Target branch (scalar) and importance branch (one weight per input channel)."""

    def __init__(self, d_model: int, d_cond: int, n_features: int, config: DecoderConfig | None = None,
                 generator=None):
        super().__init__()
        self.config = config or DecoderConfig()
        self.n_features = n_features
        self.target = DecoderBranch(d_model, d_cond, 1, self.config.d_k, self.config.ffn_hidden, generator)
        self.importance = DecoderBranch(d_model, d_cond, n_features + int(self.config.intercept),
                                        self.config.d_k, self.config.ffn_hidden, generator)

    def forward(self, tokens, memory, window_mean):
        y_hat = self.target(tokens, memory).squeeze(-1)
        raw = self.importance(tokens, memory)
        weights = raw[..., :self.n_features]
        y_interp = interpretable_readout(weights, window_mean)
        if self.config.intercept:
            y_interp = y_interp + raw[..., -1]
        return y_hat, raw, y_interp


def interpretable_readout(weights, window_mean):
    """Weighted linear combination ``sum_j w_j x_j`` (no intercept)."""
    return (weights * window_mean).sum(dim=-1)


def loss(y, y_hat, y_interp, loss_weights=(1.0, 1.0)):
    """Returns ``(L_dep, L_interp, L_total)`` with MSE terms."""
    l_dep = ((y - y_hat) ** 2).mean()
    l_interp = ((y - y_interp) ** 2).mean()
    return l_dep, l_interp, loss_weights[0] * l_dep + loss_weights[1] * l_interp


@dataclass(frozen=True)
class Prediction:
    y_hat: float
    weights: np.ndarray
    y_hat_interp: float
    intercept: float = 0.0
