"""The assembled network: encoder + condition encoder + dual decoder."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn

from .condenc import CondEncConfig, ConditionEncoder
from .decoder import DecoderConfig, DualDecoder, Prediction, interpretable_readout
from .encoder import Encoder, EncoderConfig
from .geodata import SpatioTemporalSample
from .stcg import ConditionGraph

PARAM_GROUPS = ("stcg.node_embed", "encoder", "condenc", "decoder.target", "decoder.importance")


@dataclass
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    condenc: CondEncConfig = field(default_factory=CondEncConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)


class GeoHetNet(nn.Module):
    def __init__(self, graph: ConditionGraph, config: ModelConfig, seed: int = 0):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        self.config = config
        self.graph = graph
        self.encoder = Encoder(config.encoder, gen)
        self.condenc = ConditionEncoder(graph, config.condenc, gen)
        self.decoder = DualDecoder(config.encoder.d_model, graph.d_cond, config.encoder.D,
                                   config.decoder, gen)

    def assign(self, lon, lat) -> np.ndarray:
        return self.graph.assign(lon, lat)

    def forward(self, features: torch.Tensor, node: torch.Tensor, t_index: torch.Tensor):
        """Returns ``(y_hat, raw_weights, y_interp)`` for a batch of normalised windows."""
        tokens = self.encoder(features)
        memory = self.condenc.memory(node, t_index)
        return self.decoder(tokens, memory, features.mean(dim=-2))

    def predict_sample(self, sample: SpatioTemporalSample) -> Prediction:
        node = torch.as_tensor(self.assign(sample.lon, sample.lat))
        x = torch.as_tensor(sample.features, dtype=torch.float64)[None]
        with torch.no_grad():
            y_hat, raw, y_interp = self(x, node, torch.tensor([sample.t_index]))
        m = self.config.encoder.D
        return Prediction(float(y_hat[0]), raw[0, :m].numpy().copy(), float(y_interp[0]),
                          float(raw[0, m]) if self.config.decoder.intercept else 0.0)


def recompute_interp(prediction: Prediction, features) -> float:
    """Re-evaluate the linear readout from a prediction's weights and the (L, D) window."""
    w = torch.as_tensor(prediction.weights, dtype=torch.float64)[None]
    x = torch.as_tensor(np.asarray(features), dtype=torch.float64)[None].mean(dim=-2)
    return float(interpretable_readout(w, x)[0]) + prediction.intercept


def group_of(name: str) -> str:
    if name.startswith("condenc.node_embed"):
        return "stcg.node_embed"
    if name.startswith("encoder."):
        return "encoder"
    if name.startswith("condenc."):
        return "condenc"
    if name.startswith("decoder.target."):
        return "decoder.target"
    if name.startswith("decoder.importance."):
        return "decoder.importance"
    raise KeyError(name)
