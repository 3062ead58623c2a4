"""Command line: ``geohet <gen|graph|train|eval|export-weights|gradcheck|baseline>``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from ._validation import NumericError
from .baselines import fit_gwr_model, ols_fit, select_bandwidth_cv, time_average
from .config import ConfigError, RunConfig, canonical_json
from .geodata import (TEST, TRAIN, DataError, Dataset, apply_manifest, compute_metrics,
                      generate_synthetic, load_csv, manifest_norm_stats, read_manifest,
                      write_csv, write_manifest, zscore_normalize)
from .model import GeoHetNet
from .stcg import ConditionGraph, GraphError, build_graph
from .training import (Batchable, CheckpointError, EpochRecord, NonFiniteGradient, TrainingDiverged,
                       gradcheck, load_checkpoint, numeric_mode, predict_arrays, restore_model,
                       restore_optimizer, save_checkpoint, train, write_metric_log)

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
DATA_CSV, MANIFEST, COEF_CSV = "data.csv", "manifest.json", "coefficients.csv"


# ------------------------------------------------------------------- helpers


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def resolve_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()
    overrides = {}
    for item in getattr(args, "set", None) or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects section.key=value, got {item!r}")
        overrides[key] = _parse_value(value)
    if args.deterministic:
        overrides["train.deterministic"] = True
    if args.threads:
        overrides["train.threads"] = args.threads
    return cfg.with_overrides(overrides) if overrides else cfg


def announce(cfg_doc: dict, digest: str | None = None) -> None:
    import hashlib

    digest = digest or hashlib.sha256(canonical_json(cfg_doc).encode()).hexdigest()
    print(f"config digest: {digest}", flush=True)


def echo_config(out_dir: Path, cfg: RunConfig) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.json").write_text(json.dumps(cfg.to_dict(), indent=1, sort_keys=True) + "\n")


def load_data_dir(data_dir, norm_stats=None, normalize: bool = True) -> Dataset:
    """Load ``data.csv`` + ``manifest.json`` and z-score with the given or manifest stats."""
    data_dir = Path(data_dir)
    if not (data_dir / DATA_CSV).exists():
        raise DataError(f"{data_dir / DATA_CSV} not found")
    ds = load_csv(data_dir / DATA_CSV)
    if (data_dir / MANIFEST).exists():
        manifest = read_manifest(data_dir / MANIFEST)
        ds = apply_manifest(ds, manifest)
        norm_stats = norm_stats or manifest_norm_stats(manifest)
    else:
        ds = ds.with_split(np.full(len(ds), TRAIN))
    return zscore_normalize(ds, norm_stats) if normalize else ds


def select_part(ds: Dataset, part: str) -> Dataset:
    return ds if part == "all" else ds.part(part)


def _stats_doc(stats):
    return [{"mean": s.mean, "std": s.std, "degenerate": s.degenerate} for s in stats]


def _stats_from_doc(doc):
    from .geodata import NormStat

    return [NormStat(s["mean"], s["std"], s["degenerate"]) for s in doc]


def _load_model(path):
    ckpt = load_checkpoint(path)
    cfg = RunConfig.from_dict(ckpt.config)
    shape = ckpt.header["data_shape"]
    model = restore_model(ckpt, cfg.model_config(shape[0], shape[1]))
    return ckpt, cfg, model


def write_weight_rows(path, ds: Dataset, weights: np.ndarray, y_hat, y_interp) -> int:
    m = weights.shape[1]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["lon", "lat", "t_index", *[f"w_{j + 1}" for j in range(m)], "y_hat", "y_hat_interp"])
        for i in range(len(ds)):
            w.writerow([repr(float(ds.lon[i])), repr(float(ds.lat[i])), int(ds.t_index[i]),
                        *[repr(float(v)) for v in weights[i]], repr(float(y_hat[i])), repr(float(y_interp[i]))])
    return len(ds)


def weights_geojson(ds: Dataset, weights: np.ndarray, y_hat, y_interp) -> dict:
    feats = []
    for i in range(len(ds)):
        props = {"t_index": int(ds.t_index[i]), "y_hat": float(y_hat[i]), "y_hat_interp": float(y_interp[i])}
        props.update({f"w_{j + 1}": float(v) for j, v in enumerate(weights[i])})
        feats.append({"type": "Feature",
                      "geometry": {"type": "Point", "coordinates": [float(ds.lon[i]), float(ds.lat[i])]},
                      "properties": props})
    return {"type": "FeatureCollection", "features": feats}


# ------------------------------------------------------------------ commands


def cmd_gen(args) -> int:
    cfg = resolve_config(args)
    announce(cfg.to_dict(), cfg.digest())
    try:
        ds, coef_field = generate_synthetic(cfg.data)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    out = Path(args.out)
    echo_config(out, cfg)
    rows = write_csv(ds, out / DATA_CSV)
    stats = zscore_normalize(ds).norm_stats
    write_manifest(replace(ds, norm_stats=stats), out / MANIFEST, seed=cfg.data.seed,
                   extra={"coefficient_field": coef_field.to_dict()})
    truth = coef_field.eval(ds.lon, ds.lat, ds.t_index)
    with open(out / COEF_CSV, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["lon", "lat", "t_index", *[f"w_{j + 1}" for j in range(truth.shape[1])]])
        for i in range(len(ds)):
            w.writerow([repr(float(ds.lon[i])), repr(float(ds.lat[i])), int(ds.t_index[i]),
                        *[repr(float(v)) for v in truth[i]]])
    print(f"wrote {len(ds)} samples ({rows} rows) to {out}")
    return EXIT_OK


def graph_for(ds: Dataset, cfg: RunConfig) -> ConditionGraph:
    g = cfg.graph
    tr = ds.part(TRAIN) if ds.split is not None else ds
    return build_graph(tr.lon, tr.lat, ds.n_times, g.k_clusters, g.k_nn, g.d_cond, g.sigma, g.mu,
                       seed=g.seed, walk_length=g.walk_length, walks_per_node=g.walks_per_node,
                       window=g.window, p=g.p, q=g.q)


def cmd_graph(args) -> int:
    cfg = resolve_config(args)
    announce(cfg.to_dict(), cfg.digest())
    ds = load_data_dir(args.data)
    graph = graph_for(ds, cfg)
    graph.save(args.out)
    print(f"graph with {graph.n_nodes} nodes, k_nn={graph.k_nn}, mu={graph.mu:.6g} -> {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    out = Path(args.out)
    history: list[EpochRecord] = []
    start_epoch = 0
    if args.resume:
        ckpt = load_checkpoint(args.resume)
        cfg = RunConfig.from_dict(ckpt.config)
        if args.epochs is not None:
            cfg = cfg.with_overrides({"train.epochs": args.epochs})
    else:
        cfg = resolve_config(args)
        if args.epochs is not None:
            cfg = cfg.with_overrides({"train.epochs": args.epochs})
    announce(cfg.to_dict(), cfg.digest())
    ds = load_data_dir(args.data, _stats_from_doc(ckpt.header["norm_stats"]) if args.resume else None)
    model_cfg = cfg.model_config(ds.window_length, ds.n_features)
    if args.resume:
        model = restore_model(ckpt, model_cfg)
        optimizer = restore_optimizer(ckpt, model, cfg.train)
        start_epoch = ckpt.epoch
        history = [EpochRecord(*r) for r in ckpt.header["history"]]
    else:
        graph = ConditionGraph.load(args.graph) if args.graph else graph_for(ds, cfg)
        torch.manual_seed(cfg.train.seed)
        model = GeoHetNet(graph, model_cfg, seed=cfg.train.seed)
        optimizer = None
    echo_config(out, cfg)
    extra = {"norm_stats": _stats_doc(ds.norm_stats), "feature_names": ds.feature_names,
             "data_shape": [ds.window_length, ds.n_features]}

    def checkpoint(rec, res):
        hist = [[h.epoch, h.train_loss, h.L_dep, h.L_interp, h.test_rmse, h.test_r2] for h in res.history]
        save_checkpoint(out / "last.ckpt", res.model, res.optimizer, epoch=rec.epoch + 1,
                        config=cfg.to_dict(), extra={**extra, "history": hist})
        best_hist = hist[:res.best_epoch + 1]
        save_checkpoint(out / "best.ckpt", res.model, state=res.best_state,
                        optimizer_state=res.best_optimizer, epoch=res.best_epoch + 1,
                        config=cfg.to_dict(), extra={**extra, "history": best_hist})
        write_metric_log(res.history, out / "metrics.csv")
        print(f"epoch {rec.epoch:3d}  loss {rec.train_loss:.6f}  dep {rec.L_dep:.6f}  "
              f"interp {rec.L_interp:.6f}  test_rmse {rec.test_rmse:.6f}  test_r2 {rec.test_r2:.6f}",
              flush=True)

    result = train(ds, model, cfg.train, optimizer=optimizer, start_epoch=start_epoch,
                   history=history, on_epoch=checkpoint)
    write_metric_log(result.history, out / "metrics.csv")
    print(f"best epoch {result.best_epoch}; checkpoints in {out}")
    return EXIT_OK


def _predict_ckpt(args):
    ckpt, cfg, model = _load_model(args.checkpoint)
    announce(cfg.to_dict(), cfg.digest())
    ds = select_part(load_data_dir(args.data, _stats_from_doc(ckpt.header["norm_stats"])), args.part)
    if ds.n_times > model.graph.n_times:
        raise DataError(f"data reaches t_index {ds.n_times - 1}, model covers {model.graph.n_times}")
    with numeric_mode(cfg.train.deterministic, cfg.train.threads):
        y_hat, raw, y_interp = predict_arrays(model, Batchable.from_dataset(ds, model))
    return ds, raw[:, :ds.n_features], y_hat, y_interp


def cmd_eval(args) -> int:
    ds, weights, y_hat, y_interp = _predict_ckpt(args)
    doc = {"part": args.part, "target_branch": compute_metrics(ds.target, y_hat).to_dict(),
           "interpretable_branch": compute_metrics(ds.target, y_interp).to_dict()}
    text = json.dumps(doc, indent=1)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return EXIT_OK


def cmd_export_weights(args) -> int:
    ds, weights, y_hat, y_interp = _predict_ckpt(args)
    n = write_weight_rows(args.out, ds, weights, y_hat, y_interp)
    if args.geojson:
        Path(args.geojson).write_text(json.dumps(weights_geojson(ds, weights, y_hat, y_interp)))
    print(f"exported {n} rows to {args.out}")
    return EXIT_OK


def toy_setup(cfg: RunConfig, n_samples: int = 4):
    """Small double-precision model and a fixed batch for gradient checking."""
    data = replace(cfg.data, n_locations=24, n_times=6, L=4, D=3, test_every=0)
    ds = zscore_normalize(generate_synthetic(data)[0])
    cfg = cfg.with_overrides({"graph.k_clusters": 8, "graph.k_nn": 3, "graph.d_cond": 8,
                              "encoder.d_model": 8, "encoder.n_blocks": 1})
    graph = graph_for(ds, cfg)
    model = GeoHetNet(graph, cfg.model_config(ds.window_length, ds.n_features), seed=cfg.train.seed)
    idx = np.random.default_rng(cfg.train.seed).choice(len(ds), n_samples, replace=False)
    batch = Batchable.from_dataset(ds.subset(idx), model)
    return model, batch.take(np.arange(n_samples))


def cmd_gradcheck(args) -> int:
    cfg = resolve_config(args)
    announce(cfg.to_dict(), cfg.digest())
    model, batch = toy_setup(cfg)
    with numeric_mode(True):
        report = gradcheck(model, batch, n_probe=args.probes, h=args.h, tolerance=args.tolerance,
                           seed=cfg.train.seed)
    text = json.dumps(report.to_dict(), indent=1)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    for name, g in report.groups.items():
        print(f"{'PASS' if g.passed else 'FAIL'} {name}: max {g.max_rel_err:.3e} mean {g.mean_rel_err:.3e} "
              f"({g.n_probed} probes)")
    return EXIT_OK if report.passed else EXIT_NUMERIC


def cmd_baseline(args) -> int:
    # raw feature units, so coefficients compare directly with coefficients.csv from gen
    ds = load_data_dir(args.data, normalize=False)
    announce({"method": args.method, "bandwidth": args.bandwidth, "time_average": args.time_average,
              "intercept": args.intercept})
    tr = ds.part(TRAIN)
    te = ds.part(TEST) if (ds.split == TEST).any() else None
    fit_on = time_average(tr) if args.time_average else tr
    if args.method == "ols":
        coef = ols_fit(fit_on, args.intercept).coef

        def predict(part):
            x = part.window_means
            return x @ coef[:x.shape[1]] + (coef[-1] if args.intercept else 0.0), \
                np.broadcast_to(coef[:x.shape[1]], x.shape)
        bandwidth = None
    else:
        if args.bandwidth == "auto":
            bandwidth = select_bandwidth_cv(fit_on, intercept=args.intercept)
        else:
            bandwidth = float(args.bandwidth)
        gwr = fit_gwr_model(fit_on, bandwidth, args.intercept)

        def predict(part):
            x = part.window_means
            return gwr.predict_means(x, part.lon, part.lat), gwr.coef[gwr.nearest(part.lon, part.lat)][:, :x.shape[1]]

    doc = {"method": args.method, "bandwidth": bandwidth, "time_average": args.time_average,
           "fit": compute_metrics(fit_on.target, predict(fit_on)[0]).to_dict(),
           "train": compute_metrics(tr.target, predict(tr)[0]).to_dict()}
    if te is not None:
        doc["test"] = compute_metrics(te.target, predict(te)[0]).to_dict()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.json").write_text(json.dumps(doc, indent=1) + "\n")
    y_hat, coefs = predict(ds)
    write_weight_rows(out / "coefficients.csv", ds, np.asarray(coefs), y_hat, y_hat)
    print(json.dumps(doc, indent=1))
    return EXIT_OK


# --------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="geohet", description=__doc__.splitlines()[0])
    parser.add_argument("--threads", type=int, default=None,
                        help="intra-op threads (default: $GEOHET_THREADS or torch default)")
    parser.add_argument("--deterministic", action="store_true", help="single-threaded, bitwise reproducible")
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(p):
        p.add_argument("--config", help="run configuration JSON")
        p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override a config field")
        return p

    p = with_config(sub.add_parser("gen", help="write a synthetic dataset"))
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen)

    p = with_config(sub.add_parser("graph", help="build the condition graph"))
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_graph)

    p = with_config(sub.add_parser("train", help="train the model"))
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--graph", help="prebuilt graph JSON")
    p.add_argument("--resume", help="continue from a checkpoint")
    p.add_argument("--epochs", type=int, help="override train.epochs")
    p.set_defaults(func=cmd_train)

    for name, func, help_ in (("eval", cmd_eval, "metrics of a checkpoint"),
                              ("export-weights", cmd_export_weights, "export interpretable weights")):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--data", required=True)
        p.add_argument("--part", choices=("all", TRAIN, TEST), default="all" if name != "eval" else TEST)
        if name == "eval":
            p.add_argument("--out")
        else:
            p.add_argument("--out", required=True, help="CSV path")
            p.add_argument("--geojson", help="also write a GeoJSON point collection")
        p.set_defaults(func=func)

    p = with_config(sub.add_parser("gradcheck", help="finite-difference gradient check on a toy model"))
    p.add_argument("--probes", type=int, default=100)
    p.add_argument("--h", type=float, default=1e-5)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--out")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("baseline", help="OLS or GWR baseline")
    p.add_argument("--data", required=True)
    p.add_argument("--method", choices=("ols", "gwr"), required=True)
    p.add_argument("--bandwidth", default="auto", help="chord-distance bandwidth or 'auto' (LOO CV)")
    p.add_argument("--time-average", action="store_true", help="fit on one time-averaged sample per location")
    p.add_argument("--intercept", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_baseline)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.threads is None and os.environ.get("GEOHET_THREADS"):
        try:
            args.threads = int(os.environ["GEOHET_THREADS"])
        except ValueError:
            print("error: GEOHET_THREADS must be an integer", file=sys.stderr)
            return EXIT_CONFIG
    if args.threads:
        torch.set_num_threads(args.threads)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, GraphError, CheckpointError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, TrainingDiverged, NonFiniteGradient, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
