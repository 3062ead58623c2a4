"""Spatiotemporal conditional encoding: temporal conv, weighted GCN, per-node LSTM."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from ._validation import ShapeError, check_finite
from .stcg import ConditionGraph


class KernelTooLong(ValueError):
    pass


class ZeroDegreeNode(ValueError):
    pass


class TimeIndexError(IndexError):
    pass


ACTIVATIONS = {
    "relu": torch.relu,
    "tanh": torch.tanh,
    "elu": F.elu,
    "identity": lambda x: x,
}


@dataclass
class CondEncConfig:
    k_t: int = 1
    activation: str = "relu"
    gcn_layers: int = 1

    def __post_init__(self):
        if self.k_t < 0:
            raise ValueError("k_t must be >= 0")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {sorted(ACTIVATIONS)}")
        if self.gcn_layers < 1:
            raise ValueError("gcn_layers must be >= 1")


def temporal_conv(v: torch.Tensor, kernel: torch.Tensor) -> torch.Tensor:
    """``out[t] = sum_tau kernel[tau] * v[t + tau]`` with zero padding, per channel.

    ``v`` is (nodes, T, d); ``kernel`` is (2k+1,) shared by every channel or
    (d, 2k+1) per channel, ordered tau = -k..k.
    """
    n, T, d = v.shape
    if kernel.dim() == 1:
        kernel = kernel.expand(d, -1)
    width = kernel.shape[-1]
    if width % 2 == 0:
        raise ValueError("temporal kernel length must be odd")
    if width > 2 * T - 1:
        raise KernelTooLong(f"kernel of length {width} exceeds 2T-1 = {2 * T - 1}")
    # conv1d is a cross-correlation, which is exactly the tau-indexed sum above
    out = F.conv1d(v.transpose(1, 2), kernel.unsqueeze(1), padding=width // 2, groups=d)
    return out.transpose(1, 2)


def normalized_adjacency(adjacency, weights, degrees=None) -> np.ndarray:
    """``D^-1/2 (A * W) D^-1/2`` with D the unweighted out-degree."""
    adjacency = np.asarray(adjacency, dtype=np.float64)
    deg = adjacency.sum(axis=1) if degrees is None else np.asarray(degrees, dtype=np.float64)
    if np.any(deg <= 0):
        raise ZeroDegreeNode(f"nodes with zero degree: {np.flatnonzero(deg <= 0).tolist()}")
    inv = 1.0 / np.sqrt(deg)
    return inv[:, None] * (adjacency * np.asarray(weights, dtype=np.float64)) * inv[None, :]


def gcn_layer(v_temp: torch.Tensor, a_hat: torch.Tensor, h: torch.Tensor, activation="relu") -> torch.Tensor:
    """``act(A_hat V_t H)`` for every time slice of ``v_temp`` (nodes, T, d)."""
    if a_hat.shape[0] != v_temp.shape[0]:
        raise ShapeError(f"graph has {a_hat.shape[0]} nodes, tensor has {v_temp.shape[0]}")
    act = ACTIVATIONS[activation] if isinstance(activation, str) else activation
    return act(torch.einsum("ij,jtd,de->ite", a_hat, v_temp, h))


def lstm_aggregate(v_spatial: torch.Tensor, lstm: nn.LSTM) -> torch.Tensor:
    """Run each node's sequence through ``lstm`` from zero state; returns every h_t."""
    out, _ = lstm(v_spatial)
    return out


def condition_for(node: torch.Tensor, t_index: torch.Tensor, v_final: torch.Tensor,
                  neighbor_table: torch.Tensor) -> torch.Tensor:
    """Condition rows of the assigned node followed by its KNN neighbours at ``t_index``.

    Returns (batch, 1 + k_nn, d_cond).
    """
    T = v_final.shape[1]
    if bool(((t_index < 0) | (t_index >= T)).any()):
        raise TimeIndexError(f"t_index outside [0, {T})")
    rows = torch.cat([node[:, None], neighbor_table[node]], dim=1)  # (B, 1+k)
    return v_final[rows, t_index[:, None]]


class ConditionEncoder(nn.Module):
    """Learnable condition vectors on the graph, aggregated into ``V_final``."""

    def __init__(self, graph: ConditionGraph, config: CondEncConfig | None = None, generator=None):
        super().__init__()
        self.config = config or CondEncConfig()
        d = graph.d_cond
        width = 2 * self.config.k_t + 1
        self.node_embed = nn.Parameter(torch.tensor(graph.node_embed, dtype=torch.float64))
        kernel = torch.zeros(d, width, dtype=torch.float64)
        kernel[:, self.config.k_t] = 1.0
        kernel += 0.1 * torch.randn(d, width, generator=generator, dtype=torch.float64)
        self.w_time = nn.Parameter(kernel)
        self.h = nn.ParameterList(
            nn.Parameter(torch.eye(d, dtype=torch.float64)
                         + torch.randn(d, d, generator=generator, dtype=torch.float64) / d)
            for _ in range(self.config.gcn_layers)
        )
        self.lstm = nn.LSTM(d, d, batch_first=True, dtype=torch.float64)
        with torch.no_grad():
            for p in self.lstm.parameters():
                p.copy_((torch.rand(p.shape, generator=generator, dtype=torch.float64) * 2 - 1) / d ** 0.5)
        self.register_buffer("a_hat", torch.tensor(
            normalized_adjacency(graph.adjacency, graph.weights, graph.degrees)
            if graph.k_nn else np.zeros((graph.n_nodes, graph.n_nodes))))
        self.register_buffer("neighbor_table", torch.as_tensor(graph.neighbor_table(), dtype=torch.int64))

    def stages(self) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        v_temp = temporal_conv(self.node_embed, self.w_time)
        v_spatial = v_temp
        for h in self.h:
            v_spatial = gcn_layer(v_spatial, self.a_hat, h, self.config.activation)
        v_final = lstm_aggregate(v_spatial, self.lstm)
        return v_temp, v_spatial, check_finite(v_final, "condition encoder output")

    def forward(self) -> torch.Tensor:
        return self.stages()[2]

    def memory(self, node: torch.Tensor, t_index: torch.Tensor, v_final: torch.Tensor | None = None):
        if v_final is None:
            v_final = self()
        return condition_for(node, t_index, v_final, self.neighbor_table)
