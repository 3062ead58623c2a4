import numpy as np
import pytest
import torch

from geohet.geodata import generate_synthetic, zscore_normalize
from geohet.model import GeoHetNet, ModelConfig
from geohet.encoder import EncoderConfig
from geohet.stcg import build_graph
from geohet.training import Batchable


def toy_model(L=4, D=3, d_model=8, n_locations=30, n_times=5, k_clusters=6, k_nn=2, d_cond=6,
              seed=0, **model_kw):
    ds, field = generate_synthetic(n_locations=n_locations, n_times=n_times, L=L, D=D, seed=seed)
    ds = zscore_normalize(ds)
    graph = build_graph(ds.lon, ds.lat, n_times, k_clusters=k_clusters, k_nn=k_nn, d_cond=d_cond,
                        seed=seed, walks_per_node=4, walk_length=8)
    cfg = ModelConfig(encoder=EncoderConfig(L=L, D=D, d_model=d_model, n_blocks=1), **model_kw)
    model = GeoHetNet(graph, cfg, seed=seed)
    return model, ds, field


@pytest.fixture
def toy():
    return toy_model()


@pytest.fixture
def toy_batch(toy):
    model, ds, _ = toy
    data = Batchable.from_dataset(ds, model)
    return model, data.take(np.arange(4))


@pytest.fixture(autouse=True)
def _seed_torch():
    torch.manual_seed(0)


@pytest.fixture(scope="session")
def const_run():
    """Noiseless constant-coefficient fixture trained for 20 epochs (about 30 s)."""
    from geohet.training import TrainConfig, train

    ds, field = generate_synthetic(n_locations=200, n_times=16, L=4, D=3, noise_std=0.0, field_order=0,
                                   seasonal_amplitude=0.0, test_every=0)
    ds = zscore_normalize(ds)
    graph = build_graph(ds.lon, ds.lat, 16, k_clusters=16, k_nn=4, d_cond=16)
    model = GeoHetNet(graph, ModelConfig(encoder=EncoderConfig(L=4, D=3, d_model=16, n_blocks=1)), seed=0)
    result = train(ds, model, TrainConfig(batch=32, epochs=20, deterministic=True))
    return result, ds, field
