"""scikit-learn style front end for the dual-branch model.

``X`` is a stack of feature windows, shape ``(n_samples, L, D)``.  Each
sample also needs its location and time step, passed as ``coords``
(``(n_samples, 2)`` lon/lat degrees) and ``t_index`` (``(n_samples,)``).
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin, TransformerMixin
from sklearn.metrics import r2_score
from sklearn.utils.validation import check_is_fitted

from ._validation import ShapeError, check_coords, check_t_index, check_target, check_windows
from .condenc import CondEncConfig
from .decoder import DecoderConfig
from .encoder import EncoderConfig
from .geodata import TEST, TRAIN, Dataset, zscore_normalize
from .model import GeoHetNet, ModelConfig
from .stcg import build_graph
from .training import Batchable, TrainConfig, predict_arrays, train


class WindowScaler(TransformerMixin, BaseEstimator):
    """Per-channel z-scoring of ``(n, L, D)`` windows with population statistics.

    Constant channels become zeros.  ``inverse_transform`` restores the
    non-constant channels exactly up to rounding.
    """

    def fit(self, X, y=None):
        X = check_windows(X)
        flat = X.reshape(-1, X.shape[2])
        self.mean_ = flat.mean(axis=0)
        std = flat.std(axis=0)
        self.degenerate_ = (flat.min(axis=0) == flat.max(axis=0)) | (std == 0.0)
        self.scale_ = np.where(self.degenerate_, 0.0, std)
        self.n_features_in_ = X.shape[2]
        return self

    def transform(self, X):
        check_is_fitted(self, "mean_")
        X = check_windows(X, self.n_features_in_)
        safe = np.where(self.degenerate_, 1.0, self.scale_)
        return np.where(self.degenerate_, 0.0, (X - np.where(self.degenerate_, 0.0, self.mean_)) / safe)

    def inverse_transform(self, X):
        check_is_fitted(self, "mean_")
        return check_windows(X, self.n_features_in_) * self.scale_ + self.mean_


class GeoHetRegressor(RegressorMixin, BaseEstimator):
    """Encoder-decoder regressor with learned spatiotemporal condition vectors.

    Fitting clusters the training locations into a condition graph, then
    trains the encoder, condition encoder and both decoder branches jointly
    with AdamW.  ``predict`` returns the target-branch output; ``explain``
    returns the per-feature weights of the interpretable branch.

    Features are z-scored internally when ``standardize`` is true; the
    target is never rescaled.
    """

    def __init__(self, k_clusters=64, k_nn=8, d_cond=32, sigma=1.0, mu=None,
                 d_model=32, n_blocks=2, eps=1e-6, k_t=1, activation="relu",
                 intercept=False, loss_weights=(1.0, 1.0), batch_size=64, epochs=20,
                 lr=1e-3, lr_decay_epoch=10, lr_decayed=1e-4, weight_decay=0.01,
                 grad_clip=None, seed=0, deterministic=False, standardize=True, verbose=False):
        self.k_clusters = k_clusters
        self.k_nn = k_nn
        self.d_cond = d_cond
        self.sigma = sigma
        self.mu = mu
        self.d_model = d_model
        self.n_blocks = n_blocks
        self.eps = eps
        self.k_t = k_t
        self.activation = activation
        self.intercept = intercept
        self.loss_weights = loss_weights
        self.batch_size = batch_size
        self.epochs = epochs
        self.lr = lr
        self.lr_decay_epoch = lr_decay_epoch
        self.lr_decayed = lr_decayed
        self.weight_decay = weight_decay
        self.grad_clip = grad_clip
        self.seed = seed
        self.deterministic = deterministic
        self.standardize = standardize
        self.verbose = verbose

    def _dataset(self, X, y, coords, t_index, split=None) -> Dataset:
        X = check_windows(X)
        n = len(X)
        y = np.zeros(n) if y is None else check_target(y, n)
        lon, lat = check_coords(coords, n)
        t = check_t_index(t_index, n)
        return Dataset(X, y, lon, lat, t, [f"x{j + 1}" for j in range(X.shape[2])], split=split)

    def fit(self, X, y, coords, t_index, eval_set=None, n_times=None):
        """Train on the given windows.

        ``eval_set = (X, y, coords, t_index)`` is scored after every epoch and
        the parameters with the lowest eval RMSE are kept.  ``n_times`` sets
        the number of condition time steps (default: largest t_index + 1).
        """
        train_ds = self._dataset(X, y, coords, t_index)
        if eval_set is not None:
            eval_ds = self._dataset(*eval_set)
            if eval_ds.features.shape[1:] != train_ds.features.shape[1:]:
                raise ShapeError("eval_set windows do not match the training windows")
            full = Dataset(
                np.concatenate([train_ds.features, eval_ds.features]),
                np.concatenate([train_ds.target, eval_ds.target]),
                np.concatenate([train_ds.lon, eval_ds.lon]),
                np.concatenate([train_ds.lat, eval_ds.lat]),
                np.concatenate([train_ds.t_index, eval_ds.t_index]),
                train_ds.feature_names,
                split=np.array([TRAIN] * len(train_ds) + [TEST] * len(eval_ds)),
            )
        else:
            full = train_ds.with_split(np.full(len(train_ds), TRAIN))
        if self.standardize:
            full = zscore_normalize(full)
        self.norm_stats_ = full.norm_stats
        self.n_times_ = int(n_times or full.n_times)
        if full.n_times > self.n_times_:
            raise ValueError(f"t_index reaches {full.n_times - 1} but n_times={self.n_times_}")

        L, D = train_ds.features.shape[1:]
        self.graph_ = build_graph(train_ds.lon, train_ds.lat, self.n_times_, self.k_clusters, self.k_nn,
                                  self.d_cond, self.sigma, self.mu, seed=self.seed)
        mc = ModelConfig(
            EncoderConfig(L=L, D=D, d_model=self.d_model, n_blocks=self.n_blocks, eps=self.eps),
            CondEncConfig(k_t=self.k_t, activation=self.activation),
            DecoderConfig(intercept=self.intercept, loss_weights=tuple(self.loss_weights)),
        )
        tc = TrainConfig(batch=self.batch_size, epochs=self.epochs, lr=self.lr,
                         lr_decay_epoch=self.lr_decay_epoch, lr_decayed=self.lr_decayed,
                         weight_decay=self.weight_decay, seed=self.seed,
                         deterministic=self.deterministic, grad_clip=self.grad_clip)
        model = GeoHetNet(self.graph_, mc, seed=self.seed)
        log = (lambda rec, _: print(rec, flush=True)) if self.verbose else None
        result = train(full, model, tc, on_epoch=log)
        self.model_ = result.best_model()
        self.history_ = result.history
        self.best_epoch_ = result.best_epoch
        self.n_features_in_ = D
        self.window_length_ = L
        return self

    def _forward(self, X, coords, t_index):
        check_is_fitted(self, "model_")
        X = check_windows(X, self.n_features_in_, self.window_length_)
        ds = self._dataset(X, None, coords, t_index)
        if ds.n_times > self.n_times_:
            raise ValueError(f"t_index must be < {self.n_times_}")
        if self.standardize:
            ds = zscore_normalize(ds, self.norm_stats_)
        return predict_arrays(self.model_, Batchable.from_dataset(ds, self.model_))

    def predict(self, X, coords, t_index):
        return self._forward(X, coords, t_index)[0]

    def explain(self, X, coords, t_index):
        """Per-feature weights ``(n, D)`` of the interpretable branch (on standardized inputs)."""
        return self._forward(X, coords, t_index)[1][:, :self.n_features_in_]

    def predict_interpretable(self, X, coords, t_index):
        return self._forward(X, coords, t_index)[2]

    def score(self, X, y, coords, t_index, sample_weight=None):
        return r2_score(y, self.predict(X, coords, t_index), sample_weight=sample_weight)
