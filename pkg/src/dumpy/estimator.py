"""scikit-learn style front end."""
from __future__ import annotations

import tempfile
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .build import build_index
from .config import IndexConfig
from .evaluation import index_stats
from .exceptions import InvalidArgumentError
from .metrics import DistanceKind
from .parallel_build import BuildPipelinePlan, parallel_build
from .persist import load, save
from .query import (approx_search, dumpyos_f_search, exact_search, extended_approx_search,
                    parallel_exact_search)
from .sax_stage import DatasetHandle, open_dataset, write_dataset
from .series import paa, prepare, sax_from_paa
from .updates import delete, insert

__all__ = ["DumpyIndex", "SAXTransformer", "check_series", "check_query_mode"]

MODES = ("approx", "extended", "fuzzy", "exact", "parallel-exact")


def check_series(X, n: int | None = None) -> np.ndarray:
    """2-D finite float64 array of series, optionally of length ``n``."""
    X = check_array(X, dtype=np.float64, ensure_2d=False, ensure_min_samples=1)
    if X.ndim == 1:
        X = X.reshape(1, -1)
    if n is not None and X.shape[1] != n:
        raise InvalidArgumentError(f"expected series of length {n}, got {X.shape[1]}")
    return X


def check_query_mode(mode: str) -> str:
    if mode not in MODES:
        raise InvalidArgumentError(f"mode must be one of {', '.join(MODES)}; got {mode!r}")
    return mode


class SAXTransformer(TransformerMixin, BaseEstimator):
    """Map series to their z-normalized SAX words."""

    def __init__(self, w: int = 16, c: int = 256):
        self.w = w
        self.c = c

    def fit(self, X, y=None):
        X = check_series(X)
        IndexConfig(n=X.shape[1], w=self.w, c=self.c)
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X) -> np.ndarray:
        check_is_fitted(self, "n_features_in_")
        X = check_series(X, self.n_features_in_)
        return sax_from_paa(paa(prepare(X), self.w), self.c)


class DumpyIndex(BaseEstimator):
    """Disk-backed similarity index over fixed-length series.

    ``fit`` accepts an array of series or the path of a flat ``<f4``
    dataset with its ``.json`` sidecar. Index files go to ``directory``
    (a fresh temporary directory when unset).
    """

    def __init__(self, w=16, c=256, th=10000, alpha=0.2, fill_low=0.5, fill_high=3.0, rho=0.5,
                 fuzzy=0.0, max_replication=3, split="adaptive", exhaustive_split=False,
                 distance="ed", window=0.1, directory=None, build="serial", workers=5):
        self.w = w
        self.c = c
        self.th = th
        self.alpha = alpha
        self.fill_low = fill_low
        self.fill_high = fill_high
        self.rho = rho
        self.fuzzy = fuzzy
        self.max_replication = max_replication
        self.split = split
        self.exhaustive_split = exhaustive_split
        self.distance = distance
        self.window = window
        self.directory = directory
        self.build = build
        self.workers = workers

    def _config(self, n: int) -> IndexConfig:
        return IndexConfig(n=n, w=self.w, c=self.c, th=self.th, alpha=self.alpha, fill_low=self.fill_low,
                           fill_high=self.fill_high, rho=self.rho, fuzzy=self.fuzzy,
                           max_replication=self.max_replication, split=self.split,
                           exhaustive_split=self.exhaustive_split, distance=self.distance, window=self.window)

    def fit(self, X, y=None):
        if self.build not in ("serial", "parallel"):
            raise InvalidArgumentError("build must be 'serial' or 'parallel'")
        directory = Path(self.directory) if self.directory else Path(tempfile.mkdtemp(prefix="dumpy-"))
        directory.mkdir(parents=True, exist_ok=True)
        if isinstance(X, (str, Path)):
            ds = open_dataset(X)
        elif isinstance(X, DatasetHandle):
            ds = X
        else:
            ds = write_dataset(check_series(X), directory / "data.bin")
        cfg = self._config(ds.n)
        if self.build == "parallel":
            self.index_ = parallel_build(ds, cfg, directory, BuildPipelinePlan.uniform(self.workers))
        else:
            self.index_ = build_index(ds, cfg, directory)
        self.n_features_in_ = ds.n
        self.directory_ = directory
        return self

    @classmethod
    def load(cls, directory) -> "DumpyIndex":
        index = load(directory)
        cfg = index.cfg
        est = cls(w=cfg.w, c=cfg.c, th=cfg.th, alpha=cfg.alpha, fill_low=cfg.fill_low, fill_high=cfg.fill_high,
                  rho=cfg.rho, fuzzy=cfg.fuzzy, max_replication=cfg.max_replication, split=cfg.split,
                  exhaustive_split=cfg.exhaustive_split, distance=cfg.distance, window=cfg.window,
                  directory=str(directory))
        est.index_, est.n_features_in_, est.directory_ = index, cfg.n, Path(directory)
        return est

    def save(self) -> Path:
        check_is_fitted(self, "index_")
        return save(self.index_)

    def kneighbors(self, X, n_neighbors: int = 1, mode: str = "exact", nbr: int = 1, f: float = 0.3,
                   return_distance: bool = True, eta: int = 24, workers: int = 8):
        """k nearest stored series of each query, ordered by distance then ordinal.

        Rows with fewer than ``n_neighbors`` hits are padded with ordinal -1
        and distance inf.
        """
        check_is_fitted(self, "index_")
        check_query_mode(mode)
        if n_neighbors < 1:
            raise InvalidArgumentError("n_neighbors must be >= 1")
        X = check_series(X, self.n_features_in_)
        dist = DistanceKind.parse(self.distance, self.window)
        ind = np.full((len(X), n_neighbors), -1, dtype=np.int64)
        dst = np.full((len(X), n_neighbors), np.inf)
        for i, q in enumerate(X):
            res = self._search(q, n_neighbors, mode, nbr, f, dist, eta, workers)
            ind[i, : len(res)] = res.ordinals
            dst[i, : len(res)] = res.distances
        return (dst, ind) if return_distance else ind

    def _search(self, q, k, mode, nbr, f, dist, eta, workers):
        idx = self.index_
        if mode == "approx":
            return approx_search(idx, q, k, dist)
        if mode == "extended":
            return extended_approx_search(idx, q, k, nbr, dist)
        if mode == "fuzzy":
            return dumpyos_f_search(idx, q, k, nbr, f, dist)
        if mode == "parallel-exact":
            return parallel_exact_search(idx, q, k, dist, eta, workers)
        return exact_search(idx, q, k, dist)

    def insert(self, X) -> np.ndarray:
        check_is_fitted(self, "index_")
        X = check_series(X, self.n_features_in_)
        return np.array([insert(self.index_, x) for x in X], dtype=np.int64)

    def delete(self, ordinals) -> np.ndarray:
        check_is_fitted(self, "index_")
        return np.array([delete(self.index_, int(o)) for o in np.atleast_1d(ordinals)], dtype=bool)

    def stats(self) -> dict:
        check_is_fitted(self, "index_")
        return index_stats(self.index_)
