import csv
import hashlib
import json

import jsonschema
import pytest
import torch

from geohet.cli import main
from geohet.training import read_metric_log

SMALL = {
    "data": {"n_locations": 40, "n_times": 8, "L": 4, "D": 3, "seed": 5},
    "graph": {"k_clusters": 8, "k_nn": 3, "d_cond": 8, "walks_per_node": 4, "walk_length": 8},
    "encoder": {"d_model": 8, "n_blocks": 1},
    "train": {"epochs": 2, "batch": 32, "lr_decay_epoch": 1},
}

POINT_COLLECTION = {
    "type": "object",
    "required": ["type", "features"],
    "properties": {
        "type": {"const": "FeatureCollection"},
        "features": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["type", "geometry", "properties"],
                "properties": {
                    "type": {"const": "Feature"},
                    "geometry": {
                        "type": "object",
                        "required": ["type", "coordinates"],
                        "properties": {
                            "type": {"const": "Point"},
                            "coordinates": {"type": "array", "items": {"type": "number"},
                                            "minItems": 2, "maxItems": 3},
                        },
                    },
                    "properties": {"type": "object"},
                },
            },
        },
    },
}


def sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "cfg.json").write_text(json.dumps(SMALL))
    assert run("gen", "--config", root / "cfg.json", "--out", root / "data") == 0
    assert run("--deterministic", "train", "--config", root / "cfg.json", "--data", root / "data",
               "--out", root / "run") == 0
    return root


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# -- gen

def test_gen_outputs(workdir):
    data = workdir / "data"
    for name in ("data.csv", "manifest.json", "coefficients.csv", "config.json"):
        assert (data / name).exists()
    manifest = json.loads((data / "manifest.json").read_text())
    rows = read_rows(data / "data.csv")
    assert manifest["counts"]["rows"] == len(rows) == 40 * 8 * 4
    assert manifest["counts"]["samples"] == 40 * 8
    assert manifest["counts"]["train"] + manifest["counts"]["test"] == 320


def test_gen_same_seed_same_bytes(workdir, tmp_path):
    assert run("gen", "--config", workdir / "cfg.json", "--out", tmp_path / "again") == 0
    for name in ("data.csv", "manifest.json", "coefficients.csv"):
        assert sha(tmp_path / "again" / name) == sha(workdir / "data" / name)
    assert run("gen", "--config", workdir / "cfg.json", "--set", "data.seed=6", "--out", tmp_path / "other") == 0
    assert sha(tmp_path / "other" / "data.csv") != sha(workdir / "data" / "data.csv")


def test_gen_zero_locations(tmp_path, capsys):
    assert run("gen", "--set", "data.n_locations=0", "--out", tmp_path) == 2
    assert "n_locations" in capsys.readouterr().err


def test_unknown_config_key(tmp_path, capsys):
    assert run("gen", "--set", "data.n_places=3", "--out", tmp_path) == 2
    assert "data.n_places" in capsys.readouterr().err


def test_digest_printed(workdir, tmp_path, capsys):
    run("gen", "--config", workdir / "cfg.json", "--out", tmp_path)
    first = [l for l in capsys.readouterr().out.splitlines() if l.startswith("config digest: ")]
    run("gen", "--config", workdir / "cfg.json", "--out", tmp_path)
    second = [l for l in capsys.readouterr().out.splitlines() if l.startswith("config digest: ")]
    assert len(first) == 1 and first == second
    assert len(first[0].split()[-1]) == 64


# -- graph and train

def test_graph_command(workdir, tmp_path):
    assert run("graph", "--config", workdir / "cfg.json", "--data", workdir / "data", "--out",
               tmp_path / "g.json") == 0
    doc = json.loads((tmp_path / "g.json").read_text())
    assert doc["k_nn"] == 3


def test_train_outputs(workdir):
    run_dir = workdir / "run"
    for name in ("best.ckpt", "last.ckpt", "metrics.csv", "config.json"):
        assert (run_dir / name).exists()
    assert [r.epoch for r in read_metric_log(run_dir / "metrics.csv")] == [0, 1]


def test_deterministic_train_bitwise(workdir, tmp_path):
    assert run("--deterministic", "train", "--config", workdir / "cfg.json", "--data", workdir / "data",
               "--out", tmp_path) == 0
    for name in ("metrics.csv", "best.ckpt", "last.ckpt"):
        assert sha(tmp_path / name) == sha(workdir / "run" / name)


def test_resume_continues_epochs(workdir, tmp_path):
    assert run("--deterministic", "train", "--config", workdir / "cfg.json", "--set", "train.epochs=1",
               "--data", workdir / "data", "--out", tmp_path / "a") == 0
    assert run("--deterministic", "train", "--resume", tmp_path / "a" / "last.ckpt", "--epochs", 2,
               "--data", workdir / "data", "--out", tmp_path / "b") == 0
    resumed = read_metric_log(tmp_path / "b" / "metrics.csv")
    assert [r.epoch for r in resumed] == [0, 1]
    # same log schema and same numbers as an uninterrupted run
    assert (tmp_path / "b" / "metrics.csv").read_text().splitlines()[0] == \
        (workdir / "run" / "metrics.csv").read_text().splitlines()[0]
    assert resumed == read_metric_log(workdir / "run" / "metrics.csv")


# -- eval and export

def test_export_rows_and_geojson(workdir, tmp_path):
    assert run("export-weights", "--checkpoint", workdir / "run" / "best.ckpt", "--data", workdir / "data",
               "--out", tmp_path / "w.csv", "--geojson", tmp_path / "w.geojson") == 0
    rows = read_rows(tmp_path / "w.csv")
    assert len(rows) == 320
    assert list(rows[0]) == ["lon", "lat", "t_index", "w_1", "w_2", "w_3", "y_hat", "y_hat_interp"]
    doc = json.loads((tmp_path / "w.geojson").read_text())
    jsonschema.validate(doc, POINT_COLLECTION)
    assert len(doc["features"]) == 320
    keys = {(r["lon"], r["lat"], r["t_index"]) for r in read_rows(workdir / "data" / "data.csv")}
    assert {(r["lon"], r["lat"], r["t_index"]) for r in rows} == keys
    first = doc["features"][0]
    assert first["geometry"]["coordinates"] == [float(rows[0]["lon"]), float(rows[0]["lat"])]
    assert first["properties"]["w_2"] == float(rows[0]["w_2"])


def test_eval_perfect_fit(workdir, tmp_path, capsys):
    ckpt = workdir / "run" / "best.ckpt"
    run("export-weights", "--checkpoint", ckpt, "--data", workdir / "data", "--out", tmp_path / "w.csv")
    pred = {(r["lon"], r["lat"], r["t_index"]): r["y_hat"] for r in read_rows(tmp_path / "w.csv")}
    fixture = tmp_path / "perfect"
    fixture.mkdir()
    (fixture / "manifest.json").write_bytes((workdir / "data" / "manifest.json").read_bytes())
    rows = read_rows(workdir / "data" / "data.csv")
    with open(fixture / "data.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({**r, "target": pred[(r["lon"], r["lat"], r["t_index"])]})
    capsys.readouterr()
    assert run("eval", "--checkpoint", ckpt, "--data", fixture, "--part", "all") == 0
    out = capsys.readouterr().out
    doc = json.loads(out[out.index("{"):])
    assert doc["target_branch"]["rmse"] <= 1e-12
    assert doc["target_branch"]["r2"] == pytest.approx(1.0, abs=1e-12)


def test_eval_default_is_test_part(workdir, capsys):
    assert run("eval", "--checkpoint", workdir / "run" / "best.ckpt", "--data", workdir / "data") == 0
    out = capsys.readouterr().out
    doc = json.loads(out[out.index("{"):])
    assert doc["part"] == "test"
    assert set(doc["interpretable_branch"]) >= {"rmse", "r2"}


# -- baseline

def test_baseline_ols_constant(tmp_path):
    assert run("gen", "--set", "data.n_locations=30", "--set", "data.n_times=6", "--set", "data.noise_std=0.0",
               "--set", "data.field_order=0", "--set", "data.seasonal_amplitude=0.0", "--out", tmp_path / "d") == 0
    assert run("baseline", "--data", tmp_path / "d", "--method", "ols", "--out", tmp_path / "b") == 0
    doc = json.loads((tmp_path / "b" / "metrics.json").read_text())
    assert doc["test"]["r2"] >= 0.999 and doc["train"]["r2"] >= 0.999
    assert len(read_rows(tmp_path / "b" / "coefficients.csv")) == 180


def test_baseline_gwr_auto(workdir, tmp_path):
    assert run("baseline", "--data", workdir / "data", "--method", "gwr", "--time-average",
               "--out", tmp_path) == 0
    doc = json.loads((tmp_path / "metrics.json").read_text())
    assert 0.02 <= doc["bandwidth"] <= 2.0
    assert set(doc) >= {"fit", "train", "test"}


# -- exit codes and threads

def test_missing_data_exit_3(tmp_path, capsys):
    assert run("train", "--data", tmp_path / "nowhere", "--out", tmp_path / "o") == 3
    assert "data error" in capsys.readouterr().err


def test_bad_checkpoint_exit_3(workdir, tmp_path):
    (tmp_path / "bad.ckpt").write_bytes(b"garbage")
    assert run("eval", "--checkpoint", tmp_path / "bad.ckpt", "--data", workdir / "data") == 3


def test_gradcheck_passes_and_fails(tmp_path, capsys):
    assert run("gradcheck", "--probes", 30, "--out", tmp_path / "r.json") == 0
    assert json.loads((tmp_path / "r.json").read_text())["passed"] is True
    assert "FAIL" not in capsys.readouterr().out
    assert run("gradcheck", "--probes", 30, "--tolerance", 1e-30) == 4


def test_threads_env(monkeypatch, tmp_path):
    before = torch.get_num_threads()
    try:
        monkeypatch.setenv("GEOHET_THREADS", "1")
        assert run("gen", "--set", "data.n_locations=5", "--set", "data.n_times=4", "--out", tmp_path) == 0
        assert torch.get_num_threads() == 1
        monkeypatch.setenv("GEOHET_THREADS", "many")
        assert run("gen", "--out", tmp_path) == 2
    finally:
        torch.set_num_threads(before)


def test_threads_flag_written_to_config(tmp_path):
    assert run("--threads", "1", "gen", "--set", "data.n_locations=5", "--set", "data.n_times=4",
               "--out", tmp_path) == 0
    assert json.loads((tmp_path / "config.json").read_text())["train"]["threads"] == 1
