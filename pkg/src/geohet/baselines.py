"""Global OLS and fixed-bandwidth GWR on window-mean regressors."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize_scalar
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_coords, check_target, check_windows
from .geodata import Dataset, SpatioTemporalSample, compute_metrics
from .stcg import latlon_to_xyz

RIDGE = 1e-8


class InsufficientSamples(ValueError):
    pass


@dataclass
class LinearFit:
    coef: np.ndarray  # (D,) or (D + 1,) with the intercept last
    ridge: bool = False


def _design(x: np.ndarray, intercept: bool) -> np.ndarray:
    return np.hstack([x, np.ones((len(x), 1))]) if intercept else x


def weighted_lstsq(x: np.ndarray, y: np.ndarray, w: np.ndarray | None = None,
                   ridge: float = RIDGE) -> LinearFit:
    """Solve the (weighted) normal equations, adding ``ridge * I`` only when singular."""
    xtw = x.T if w is None else x.T * w
    a = xtw @ x
    b = xtw @ y
    if np.linalg.matrix_rank(a) < a.shape[0]:
        return LinearFit(np.linalg.solve(a + ridge * np.eye(a.shape[0]), b), True)
    return LinearFit(np.linalg.solve(a, b), False)


def _xy(data) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(data, Dataset):
        return data.window_means, data.target
    x, y = data
    x = np.asarray(x, dtype=np.float64)
    return (x.mean(axis=1) if x.ndim == 3 else x), np.asarray(y, dtype=np.float64)


def ols_fit(data, intercept: bool = False) -> LinearFit:
    """Unweighted least squares of the target on feature window-means."""
    x, y = _xy(data)
    p = x.shape[1] + int(intercept)
    if len(x) < p:
        raise InsufficientSamples(f"need at least {p} samples, got {len(x)}")
    return weighted_lstsq(_design(x, intercept), y)


def gaussian_kernel(chord: np.ndarray, bandwidth: float) -> np.ndarray:
    return np.exp(-(chord ** 2) / (2.0 * bandwidth ** 2))


def gwr_fit(location, data, bandwidth: float, intercept: bool = False,
            coords: tuple[np.ndarray, np.ndarray] | None = None) -> LinearFit:
    """Local weighted least squares at ``location`` = (lon, lat).

    Sample weights follow a Gaussian kernel of the 3D chord distance.
    ``data`` is a Dataset or ``(X, y)`` with ``coords = (lon, lat)``.
    """
    if not (bandwidth > 0 and math.isfinite(bandwidth)):
        raise ValueError(f"bandwidth must be finite and positive, got {bandwidth}")
    x, y = _xy(data)
    lon, lat = (data.lon, data.lat) if isinstance(data, Dataset) else coords
    here = latlon_to_xyz(*location)
    chord = np.linalg.norm(latlon_to_xyz(lon, lat) - here, axis=-1)
    w = gaussian_kernel(chord, bandwidth)
    p = x.shape[1] + int(intercept)
    if int((w > 0).sum()) < p:
        raise InsufficientSamples(f"only {(w > 0).sum()} samples carry kernel weight, need {p}")
    return weighted_lstsq(_design(x, intercept), y, w)


@dataclass
class GwrModel:
    bandwidth: float
    locations: np.ndarray  # (m, 2) lon/lat of fitted locations
    coef: np.ndarray  # (m, p)
    ridge: np.ndarray  # (m,) bool
    intercept: bool = False

    def __post_init__(self):
        self.coords3d = latlon_to_xyz(self.locations[:, 0], self.locations[:, 1])

    def nearest(self, lon, lat) -> np.ndarray:
        q = latlon_to_xyz(lon, lat).reshape(-1, 3)
        d = ((q[:, None, :] - self.coords3d[None]) ** 2).sum(-1)
        return d.argmin(axis=1)

    def predict_means(self, x_mean: np.ndarray, lon, lat) -> np.ndarray:
        c = self.coef[self.nearest(lon, lat)]
        out = (c[:, :x_mean.shape[1]] * x_mean).sum(axis=1)
        if self.intercept:
            out = out + c[:, -1]
        return out


def fit_gwr_model(data, bandwidth: float, intercept: bool = False,
                  coords: tuple[np.ndarray, np.ndarray] | None = None,
                  locations: np.ndarray | None = None) -> GwrModel:
    """Fit local coefficients at every distinct sample location (or the given ones)."""
    lon, lat = (data.lon, data.lat) if isinstance(data, Dataset) else coords
    if locations is None:
        locations = np.unique(np.stack([lon, lat], axis=1), axis=0)
    fits = [gwr_fit(loc, data, bandwidth, intercept, coords) for loc in locations]
    return GwrModel(bandwidth, np.asarray(locations, dtype=np.float64),
                    np.stack([f.coef for f in fits]), np.array([f.ridge for f in fits]), intercept)


def gwr_predict(model: GwrModel, sample: SpatioTemporalSample) -> float:
    """Prediction with the coefficients of the nearest fitted location."""
    return float(model.predict_means(sample.window_mean[None], sample.lon, sample.lat)[0])


def time_average(dataset: Dataset) -> Dataset:
    """One sample per location: windows and targets averaged over all its time steps."""
    key = np.stack([dataset.lon, dataset.lat], axis=1)
    uniq, inv = np.unique(key, axis=0, return_inverse=True)
    inv = inv.reshape(-1)
    counts = np.bincount(inv).astype(np.float64)
    feats = np.zeros((len(uniq),) + dataset.features.shape[1:])
    np.add.at(feats, inv, dataset.features)
    feats /= counts[:, None, None]
    target = np.bincount(inv, dataset.target) / counts
    return Dataset(feats, target, uniq[:, 0], uniq[:, 1], np.zeros(len(uniq), dtype=np.int64),
                   list(dataset.feature_names), dataset.norm_stats)


def select_bandwidth(train: Dataset, valid: Dataset, bounds=(0.02, 2.0), intercept: bool = False,
                     xatol: float = 1e-3) -> float:
    """Bandwidth minimising held-out RMSE, searched on a log scale (bounded Brent/golden)."""
    xv, yv = valid.window_means, valid.target

    def rmse(log_bw):
        model = fit_gwr_model(train, math.exp(log_bw), intercept)
        return compute_metrics(yv, model.predict_means(xv, valid.lon, valid.lat)).rmse

    res = minimize_scalar(rmse, bounds=(math.log(bounds[0]), math.log(bounds[1])), method="bounded",
                          options={"xatol": xatol})
    return float(math.exp(res.x))


def loo_rmse(data: Dataset, bandwidth: float, intercept: bool = False) -> float:
    """Leave-one-out RMSE: each sample is predicted by a local fit that excludes it."""
    x = _design(data.window_means, intercept)
    y = data.target
    xyz = latlon_to_xyz(data.lon, data.lat)
    chord = np.sqrt(((xyz[:, None, :] - xyz[None]) ** 2).sum(-1))
    w = gaussian_kernel(chord, bandwidth)
    np.fill_diagonal(w, 0.0)
    a = np.einsum("ij,jp,jq->ipq", w, x, x)
    b = np.einsum("ij,jp,j->ip", w, x, y)
    singular = np.linalg.matrix_rank(a) < x.shape[1]
    a[singular] += RIDGE * np.eye(x.shape[1])
    coef = np.linalg.solve(a, b[..., None])[..., 0]
    return compute_metrics(y, (coef * x).sum(axis=1)).rmse


def select_bandwidth_cv(data: Dataset, bounds=(0.02, 2.0), intercept: bool = False,
                        xatol: float = 1e-3) -> float:
    """Bandwidth minimising leave-one-out RMSE on ``data`` (log-scale bounded search)."""
    res = minimize_scalar(lambda lb: loo_rmse(data, math.exp(lb), intercept),
                          bounds=(math.log(bounds[0]), math.log(bounds[1])), method="bounded",
                          options={"xatol": xatol})
    return float(math.exp(res.x))


# ------------------------------------------------------------ sklearn estimators


class OLSRegressor(RegressorMixin, BaseEstimator):
    """Global least squares on window means; accepts (n, D) or (n, L, D) input."""

    def __init__(self, intercept: bool = False):
        self.intercept = intercept

    def fit(self, X, y):
        X = check_windows(X)
        y = check_target(y, len(X))
        fit = ols_fit((X, y), self.intercept)
        self.coef_ = fit.coef[:X.shape[2]]
        self.intercept_ = float(fit.coef[-1]) if self.intercept else 0.0
        self.ridge_ = fit.ridge
        self.n_features_in_ = X.shape[2]
        return self

    def predict(self, X):
        check_is_fitted(self, "coef_")
        X = check_windows(X, self.n_features_in_)
        return X.mean(axis=1) @ self.coef_ + self.intercept_


class GWRRegressor(RegressorMixin, BaseEstimator):
    """Fixed-bandwidth Gaussian-kernel GWR.

    Local coefficients are fitted at every distinct training location;
    prediction uses the nearest fitted location.  Pass ``coords`` (lon, lat
    degrees, shape (n, 2)) to ``fit``, ``predict`` and ``score``.
    """

    def __init__(self, bandwidth: float = 0.2, intercept: bool = False):
        self.bandwidth = bandwidth
        self.intercept = intercept

    def fit(self, X, y, coords):
        X = check_windows(X)
        y = check_target(y, len(X))
        lon, lat = check_coords(coords, len(X))
        self.model_ = fit_gwr_model((X, y), self.bandwidth, self.intercept, coords=(lon, lat))
        self.coef_ = self.model_.coef
        self.locations_ = self.model_.locations
        self.n_features_in_ = X.shape[2]
        return self

    def predict(self, X, coords):
        check_is_fitted(self, "model_")
        X = check_windows(X, self.n_features_in_)
        lon, lat = check_coords(coords, len(X))
        return self.model_.predict_means(X.mean(axis=1), lon, lat)

    def score(self, X, y, coords, sample_weight=None):
        from sklearn.metrics import r2_score

        return r2_score(y, self.predict(X, coords), sample_weight=sample_weight)
