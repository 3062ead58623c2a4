"""Sample containers, synthetic heterogeneous data, CSV ingestion and metrics.

A dataset is stored column-wise: ``features`` has shape ``(N, L, D)`` and
``lon``, ``lat``, ``t_index``, ``target`` and ``split`` are length-``N``
vectors.  Individual :class:`SpatioTemporalSample` views are produced on
demand.
"""

from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

TRAIN = "train"
TEST = "test"


class DataError(ValueError):
    """Base class for malformed or inconsistent input data."""


class MissingColumn(DataError):
    def __init__(self, column: str):
        super().__init__(f"missing column: {column!r}")
        self.column = column


class NonFiniteValue(DataError):
    def __init__(self, row: int, column: str, value: str):
        super().__init__(f"non-finite value {value!r} in column {column!r} at row {row}")
        self.row = row
        self.column = column


class RaggedWindow(DataError):
    def __init__(self, key, length: int, expected: int):
        super().__init__(f"window {key} has {length} time steps, expected {expected}")
        self.key = key


class DegenerateChannelWarning(UserWarning):
    pass


@dataclass(frozen=True)
class SpatioTemporalSample:
    lon: float
    lat: float
    t_index: int
    features: np.ndarray  # (L, D)
    target: float

    @property
    def window_mean(self) -> np.ndarray:
        return self.features.mean(axis=0)


@dataclass(frozen=True)
class NormStat:
    mean: float
    std: float
    degenerate: bool = False


@dataclass
class Dataset:
    features: np.ndarray
    target: np.ndarray
    lon: np.ndarray
    lat: np.ndarray
    t_index: np.ndarray
    feature_names: list[str]
    norm_stats: list[NormStat] | None = None
    split: np.ndarray | None = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 3:
            raise DataError(f"features must be (N, L, D), got shape {self.features.shape}")
        n, _, d = self.features.shape
        self.target = np.asarray(self.target, dtype=np.float64).reshape(-1)
        self.lon = np.asarray(self.lon, dtype=np.float64).reshape(-1)
        self.lat = np.asarray(self.lat, dtype=np.float64).reshape(-1)
        self.t_index = np.asarray(self.t_index, dtype=np.int64).reshape(-1)
        for name in ("target", "lon", "lat", "t_index"):
            if getattr(self, name).shape[0] != n:
                raise DataError(f"{name} has {getattr(self, name).shape[0]} entries for {n} samples")
        if len(self.feature_names) != d:
            raise DataError(f"{len(self.feature_names)} feature names for {d} channels")
        if not np.isfinite(self.features).all():
            raise DataError("features contain non-finite values")
        if self.split is not None:
            self.split = np.asarray(self.split, dtype="<U5")
            if self.split.shape != (n,) or not np.isin(self.split, (TRAIN, TEST)).all():
                raise DataError("split must label every sample 'train' or 'test'")

    def __len__(self) -> int:
        return self.features.shape[0]

    def __getitem__(self, i: int) -> SpatioTemporalSample:
        return SpatioTemporalSample(
            float(self.lon[i]), float(self.lat[i]), int(self.t_index[i]),
            self.features[i], float(self.target[i]),
        )

    def __iter__(self) -> Iterator[SpatioTemporalSample]:
        return (self[i] for i in range(len(self)))

    @property
    def samples(self) -> list[SpatioTemporalSample]:
        return list(self)

    @property
    def window_length(self) -> int:
        return self.features.shape[1]

    @property
    def n_features(self) -> int:
        return self.features.shape[2]

    @property
    def window_means(self) -> np.ndarray:
        return self.features.mean(axis=1)

    @property
    def n_times(self) -> int:
        return int(self.t_index.max()) + 1 if len(self) else 0

    def subset(self, mask_or_index) -> "Dataset":
        idx = np.asarray(mask_or_index)
        return Dataset(
            self.features[idx], self.target[idx], self.lon[idx], self.lat[idx],
            self.t_index[idx], list(self.feature_names), self.norm_stats,
            None if self.split is None else self.split[idx],
        )

    def part(self, label: str) -> "Dataset":
        if self.split is None:
            raise DataError("dataset has no train/test split")
        return self.subset(self.split == label)

    def train_mask(self) -> np.ndarray:
        if self.split is None:
            return np.ones(len(self), dtype=bool)
        return self.split == TRAIN

    def with_split(self, split) -> "Dataset":
        return replace(self, split=np.asarray(split))


# ---------------------------------------------------------------- coefficients


def _fibonacci_sphere(n: int) -> np.ndarray:
    i = np.arange(n) + 0.5
    z = 1.0 - 2.0 * i / n
    r = np.sqrt(1.0 - z * z)
    theta = math.pi * (1.0 + 5 ** 0.5) * i
    return np.stack([r * np.cos(theta), r * np.sin(theta), z], axis=1)


def _xyz(lon, lat) -> np.ndarray:
    lon = np.radians(np.asarray(lon, dtype=np.float64))
    lat = np.radians(np.asarray(lat, dtype=np.float64))
    return np.stack([np.cos(lat) * np.cos(lon), np.cos(lat) * np.sin(lon), np.sin(lat)], axis=-1)


def _monomial_exponents(order: int) -> np.ndarray:
    return np.array(
        [(a, b, c) for deg in range(1, order + 1)
         for a in range(deg + 1) for b in range(deg + 1 - a) for c in [deg - a - b]],
        dtype=np.int64,
    ).reshape(-1, 3)


@dataclass
class CoefficientField:
    """Smooth ground-truth coefficients ``w_j(lon, lat, t)``.

    ``w_j = base_j + amplitude_j * S_j(p) * (1 + seasonal_amplitude * sin(2 pi t / period + phase_j))``
    where ``S_j`` is a polynomial in the unit vector ``p`` (degree <= order),
    standardised to zero mean and unit variance over the sphere.  Being a
    function of ``p`` it is continuous across the antimeridian.
    """

    base: np.ndarray
    amplitude: np.ndarray
    exponents: np.ndarray
    poly_coef: np.ndarray  # (D, n_terms)
    shift: np.ndarray
    scale: np.ndarray
    seasonal_amplitude: float = 0.0
    phase: np.ndarray | None = None
    period: float = 1.0

    @property
    def n_features(self) -> int:
        return len(self.base)

    @classmethod
    def constant(cls, values: Sequence[float]) -> "CoefficientField":
        values = np.asarray(values, dtype=np.float64)
        d = len(values)
        return cls(values, np.zeros(d), np.zeros((0, 3), dtype=np.int64), np.zeros((d, 0)),
                   np.zeros(d), np.ones(d))

    @classmethod
    def random(cls, rng: np.random.Generator, n_features: int, order: int,
               base_scale: float = 0.3, amplitude: float = 1.0,
               seasonal_amplitude: float = 0.0, period: float = 1.0) -> "CoefficientField":
        exps = _monomial_exponents(order)
        base = rng.uniform(-base_scale, base_scale, n_features)
        amp = amplitude * rng.uniform(0.75, 1.25, n_features)
        coef = rng.standard_normal((n_features, len(exps)))
        phase = rng.uniform(0.0, 2 * math.pi, n_features)
        shift, scale = np.zeros(n_features), np.ones(n_features)
        if len(exps):
            grid = _fibonacci_sphere(4000)
            raw = _poly(grid, exps, coef)
            shift = raw.mean(axis=0)
            scale = raw.std(axis=0)
            scale[scale == 0] = 1.0
        return cls(base, amp, exps, coef, shift, scale, seasonal_amplitude, phase, period)

    def spatial(self, lon, lat) -> np.ndarray:
        p = _xyz(lon, lat)
        if not len(self.exponents):
            return np.zeros(p.shape[:-1] + (self.n_features,))
        return (_poly(p, self.exponents, self.poly_coef) - self.shift) / self.scale

    def eval(self, lon, lat, t_index) -> np.ndarray:
        """Coefficient vectors, shape ``broadcast(lon, lat, t).shape + (D,)``."""
        lon, lat, t = np.broadcast_arrays(np.asarray(lon, float), np.asarray(lat, float),
                                          np.asarray(t_index, float))
        s = self.spatial(lon, lat)
        if self.phase is not None and self.seasonal_amplitude:
            season = 1.0 + self.seasonal_amplitude * np.sin(
                2 * math.pi * t[..., None] / self.period + self.phase)
        else:
            season = 1.0
        return self.base + self.amplitude * s * season

    def to_dict(self) -> dict:
        return {
            "base": self.base.tolist(), "amplitude": self.amplitude.tolist(),
            "exponents": self.exponents.tolist(), "poly_coef": self.poly_coef.tolist(),
            "shift": self.shift.tolist(), "scale": self.scale.tolist(),
            "seasonal_amplitude": self.seasonal_amplitude,
            "phase": None if self.phase is None else self.phase.tolist(),
            "period": self.period,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CoefficientField":
        n = len(d["base"])
        return cls(
            np.asarray(d["base"], float), np.asarray(d["amplitude"], float),
            np.asarray(d["exponents"], np.int64).reshape(-1, 3),
            np.asarray(d["poly_coef"], float).reshape(n, -1),
            np.asarray(d["shift"], float), np.asarray(d["scale"], float),
            d["seasonal_amplitude"], None if d["phase"] is None else np.asarray(d["phase"], float),
            d["period"],
        )


def _poly(p: np.ndarray, exps: np.ndarray, coef: np.ndarray) -> np.ndarray:
    terms = np.prod(p[..., None, :] ** exps, axis=-1)  # (..., n_terms)
    return terms @ coef.T


# ------------------------------------------------------------------ synthesis


@dataclass
class GenConfig:
    seed: int = 0
    n_locations: int = 600
    n_times: int = 48
    L: int = 8
    D: int = 6
    noise_std: float = 0.1
    field_order: int = 2
    seasonal_amplitude: float = 0.5
    base_scale: float = 0.3
    ar_coef: float = 0.6
    test_every: int = 4


def quasi_uniform_locations(n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Fibonacci lattice under a random rotation, returned as (lon, lat) degrees."""
    p = _fibonacci_sphere(n)
    q, r = np.linalg.qr(rng.standard_normal((3, 3)))
    q = q * np.sign(np.diag(r))
    p = p @ q.T
    lat = np.degrees(np.arcsin(np.clip(p[:, 2], -1.0, 1.0)))
    lon = np.degrees(np.arctan2(p[:, 1], p[:, 0]))
    lon = (lon + 180.0) % 360.0 - 180.0
    return lon, lat


def ar1_series(rng: np.random.Generator, shape: tuple, length: int, phi: float) -> np.ndarray:
    """Stationary unit-variance AR(1) series along a new last axis."""
    out = np.empty(shape + (length,))
    out[..., 0] = rng.standard_normal(shape)
    innov = math.sqrt(1.0 - phi * phi)
    for k in range(1, length):
        out[..., k] = phi * out[..., k - 1] + innov * rng.standard_normal(shape)
    return out


def synthesize_targets(features: np.ndarray, lon, lat, t_index, coef_field: CoefficientField,
                       noise_std: float = 0.0, rng: np.random.Generator | None = None) -> np.ndarray:
    w = coef_field.eval(lon, lat, t_index)
    y = np.einsum("nd,nd->n", w, np.asarray(features).mean(axis=1))
    if noise_std > 0:
        y = y + noise_std * rng.standard_normal(y.shape)
    return y


def generate_synthetic(config: GenConfig | None = None, **overrides) -> tuple[Dataset, CoefficientField]:
    """Heterogeneous regression data with a known coefficient field.

    Samples are ordered location-major then by time step.  The split holds
    out every ``test_every``-th time step (offset ``test_every - 1``);
    ``test_every = 0`` leaves every sample in train.
    """
    cfg = replace(config or GenConfig(), **overrides)
    if cfg.n_locations < 1:
        raise ValueError("n_locations must be >= 1")
    if cfg.n_times < 1 or cfg.L < 1 or cfg.D < 1:
        raise ValueError("n_times, L and D must be >= 1")
    if not math.isfinite(cfg.noise_std) or cfg.noise_std < 0:
        raise ValueError("noise_std must be finite and >= 0")
    if cfg.field_order < 0:
        raise ValueError("field_order must be >= 0")
    rng = np.random.default_rng(cfg.seed)
    coef_field = CoefficientField.random(
        rng, cfg.D, cfg.field_order, base_scale=cfg.base_scale,
        seasonal_amplitude=cfg.seasonal_amplitude, period=float(cfg.n_times))
    if cfg.field_order == 0:
        coef_field.base = np.sign(coef_field.base) + coef_field.base
    lon, lat = quasi_uniform_locations(cfg.n_locations, rng)

    series = ar1_series(rng, (cfg.n_locations, cfg.D), cfg.n_times + cfg.L - 1, cfg.ar_coef)
    windows = np.lib.stride_tricks.sliding_window_view(series, cfg.L, axis=-1)  # (P, D, T, L)
    features = np.ascontiguousarray(windows.transpose(0, 2, 3, 1)).reshape(-1, cfg.L, cfg.D)

    loc_idx = np.repeat(np.arange(cfg.n_locations), cfg.n_times)
    t_index = np.tile(np.arange(cfg.n_times), cfg.n_locations)
    lon_s, lat_s = lon[loc_idx], lat[loc_idx]
    target = synthesize_targets(features, lon_s, lat_s, t_index, coef_field, cfg.noise_std, rng)

    if cfg.test_every > 0:
        split = np.where(t_index % cfg.test_every == cfg.test_every - 1, TEST, TRAIN)
    else:
        split = np.full(len(target), TRAIN)
    names = [f"x{j + 1}" for j in range(cfg.D)]
    return Dataset(features, target, lon_s, lat_s, t_index, names, None, split), coef_field


# -------------------------------------------------------------- normalisation


def zscore_normalize(dataset: Dataset, stats: Sequence[NormStat] | None = None) -> Dataset:
    """Z-score every feature channel with train-split population statistics.

    Pass ``stats`` to reuse previously fitted statistics.  Constant channels
    map to zeros and are flagged ``degenerate``.  The target is untouched.
    """
    if len(dataset) == 0:
        raise DataError("cannot normalize an empty dataset")
    x = dataset.features
    if stats is None:
        ref = x[dataset.train_mask()].reshape(-1, x.shape[2])
        mean = ref.mean(axis=0)
        # exact constancy test; a constant column's float std can be ~1e-14 instead of 0
        std = ref.std(axis=0)
        constant = (ref.min(axis=0) == ref.max(axis=0)) | (std == 0.0)
        std = np.where(constant, 0.0, std)
        stats = []
        for j, name in enumerate(dataset.feature_names):
            degenerate = bool(constant[j])
            if degenerate:
                warnings.warn(f"feature {name!r} is constant; mapped to zeros",
                              DegenerateChannelWarning, stacklevel=2)
            stats.append(NormStat(float(mean[j]), float(std[j]), degenerate))
    if len(stats) != dataset.n_features:
        raise DataError(f"{len(stats)} norm stats for {dataset.n_features} channels")
    mean = np.array([s.mean for s in stats])
    std = np.array([s.std for s in stats])
    degenerate = np.array([s.degenerate for s in stats])
    safe = np.where(degenerate, 1.0, std)
    z = np.where(degenerate, 0.0, (x - np.where(degenerate, 0.0, mean)) / safe)
    return replace(dataset, features=z, norm_stats=list(stats))


def denormalize(dataset: Dataset) -> Dataset:
    if dataset.norm_stats is None:
        raise DataError("dataset carries no norm_stats")
    mean = np.array([s.mean for s in dataset.norm_stats])
    std = np.array([s.std for s in dataset.norm_stats])
    return replace(dataset, features=dataset.features * std + mean, norm_stats=None)


# -------------------------------------------------------------------- metrics


@dataclass(frozen=True)
class Metrics:
    rmse: float
    r2: float  # nan when the target is constant
    n: int

    def to_dict(self) -> dict:
        return {"rmse": self.rmse, "r2": None if math.isnan(self.r2) else self.r2, "n": self.n}


def compute_metrics(y, y_hat) -> Metrics:
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    y_hat = np.asarray(y_hat, dtype=np.float64).reshape(-1)
    if y.shape != y_hat.shape or y.size == 0:
        raise ValueError(f"need equal non-empty lengths, got {y.size} and {y_hat.size}")
    resid = y - y_hat
    ss_res = float(resid @ resid)
    rmse = math.sqrt(ss_res / y.size)
    dev = y - y.mean()
    ss_tot = float(dev @ dev)
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else float("nan")
    if ss_res > 0 and r2 == 1.0:
        r2 = math.nextafter(1.0, 0.0)  # keep rmse == 0 <=> r2 == 1 when 1 - tiny rounds to 1
    return Metrics(rmse, r2, int(y.size))


# ------------------------------------------------------------------------ CSV


@dataclass(frozen=True)
class CsvSchema:
    lon: str = "lon"
    lat: str = "lat"
    t_index: str = "t_index"
    target: str = "target"
    features: tuple[str, ...] | None = None  # default: every other column
    window_length: int | None = None


def _parse_float(text: str, row: int, column: str) -> float:
    try:
        value = float(text)
    except ValueError:
        raise NonFiniteValue(row, column, text) from None
    if not math.isfinite(value):
        raise NonFiniteValue(row, column, text)
    return value


def load_csv(path, schema: CsvSchema | None = None) -> Dataset:
    """Read one row per (sample, time step) and group rows into windows.

    Rows sharing ``(lon, lat, t_index)`` form one window, in file order.
    Row numbers in errors count the header as row 0.
    """
    schema = schema or CsvSchema()
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        fixed = [schema.lon, schema.lat, schema.t_index, schema.target]
        for col in fixed:
            if col not in header:
                raise MissingColumn(col)
        feat_cols = list(schema.features) if schema.features else [h for h in header if h not in fixed]
        for col in feat_cols:
            if col not in header:
                raise MissingColumn(col)
        if not feat_cols:
            raise DataError("no feature columns")
        pos = {h: i for i, h in enumerate(header)}

        windows: dict[tuple, list] = {}
        for rownum, row in enumerate(reader, start=1):
            if not row:
                continue
            if len(row) != len(header):
                raise DataError(f"row {rownum} has {len(row)} cells, header has {len(header)}")
            lon = _parse_float(row[pos[schema.lon]], rownum, schema.lon)
            lat = _parse_float(row[pos[schema.lat]], rownum, schema.lat)
            t_raw = _parse_float(row[pos[schema.t_index]], rownum, schema.t_index)
            if t_raw < 0 or t_raw != int(t_raw):
                raise DataError(f"row {rownum}: t_index must be a non-negative integer")
            y = _parse_float(row[pos[schema.target]], rownum, schema.target)
            x = [_parse_float(row[pos[c]], rownum, c) for c in feat_cols]
            key = (lon, lat, int(t_raw))
            entry = windows.setdefault(key, [y, [], rownum])
            if entry[0] != y:
                raise DataError(f"row {rownum}: target differs within window {key}")
            entry[1].append(x)

    if not windows:
        raise DataError(f"{path}: no data rows")
    expected = schema.window_length or len(next(iter(windows.values()))[1])
    for key, (_, rows, _) in windows.items():
        if len(rows) != expected:
            raise RaggedWindow(key, len(rows), expected)
    keys = list(windows)
    return Dataset(
        np.array([windows[k][1] for k in keys], dtype=np.float64),
        np.array([windows[k][0] for k in keys]),
        np.array([k[0] for k in keys]), np.array([k[1] for k in keys]),
        np.array([k[2] for k in keys]), feat_cols,
    )


def write_csv(dataset: Dataset, path) -> int:
    """Write one row per (sample, time step); returns the number of data rows."""
    rows = 0
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["lon", "lat", "t_index", "target", *dataset.feature_names])
        for i in range(len(dataset)):
            head = [repr(float(dataset.lon[i])), repr(float(dataset.lat[i])),
                    str(int(dataset.t_index[i])), repr(float(dataset.target[i]))]
            for step in dataset.features[i]:
                w.writerow(head + [repr(float(v)) for v in step])
                rows += 1
    return rows


# ------------------------------------------------------------------- manifest


def write_manifest(dataset: Dataset, path, seed: int | None = None, extra: dict | None = None) -> dict:
    split = dataset.split if dataset.split is not None else np.full(len(dataset), TRAIN)
    manifest = {
        "seed": seed,
        "counts": {
            "samples": len(dataset),
            "rows": len(dataset) * dataset.window_length,
            TRAIN: int((split == TRAIN).sum()),
            TEST: int((split == TEST).sum()),
            "window_length": dataset.window_length,
            "features": dataset.n_features,
        },
        "feature_names": list(dataset.feature_names),
        "norm_stats": None if dataset.norm_stats is None else [
            {"mean": s.mean, "std": s.std, "degenerate": s.degenerate} for s in dataset.norm_stats],
        "split_indices": {
            TRAIN: np.flatnonzero(split == TRAIN).tolist(),
            TEST: np.flatnonzero(split == TEST).tolist(),
        },
    }
    if extra:
        manifest.update(extra)
    Path(path).write_text(json.dumps(manifest, indent=1) + "\n", encoding="utf-8")
    return manifest


def read_manifest(path) -> dict:
    return json.loads(Path(path).read_text(encoding="utf-8"))


def apply_manifest(dataset: Dataset, manifest: dict) -> Dataset:
    """Attach the manifest's train/test split to a freshly loaded dataset."""
    split = np.full(len(dataset), TRAIN, dtype="<U5")
    idx = manifest.get("split_indices") or {}
    if idx:
        n_listed = len(idx.get(TRAIN, [])) + len(idx.get(TEST, []))
        if n_listed != len(dataset):
            raise DataError(f"manifest lists {n_listed} samples, dataset has {len(dataset)}")
        split[np.asarray(idx.get(TEST, []), dtype=np.int64)] = TEST
    return dataset.with_split(split)


def manifest_norm_stats(manifest: dict) -> list[NormStat] | None:
    stats = manifest.get("norm_stats")
    if not stats:
        return None
    return [NormStat(s["mean"], s["std"], s["degenerate"]) for s in stats]
