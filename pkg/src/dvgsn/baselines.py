"""Reference predictors and the fixed-graph ablation mask.

The autoregression and k-nearest-neighbor forecasters mirror the classic
window-in, value-out setup; persistence ("tomorrow looks like today") is
the sanity floor. The fixed neighborhood mask restricts aggregation to the
previous week and the same week one year (52 rows) earlier.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import RankError, ShapeError, UnsupportedHorizonError

AR_MIN_EXTRA = 2  # need n_train > p + 1 for a meaningful least-squares fit


@dataclass
class ArModel:
    """Least-squares autoregression over one window, one-step horizon."""

    coefficients: np.ndarray
    intercept: float


def ar_fit(windows: np.ndarray, targets: np.ndarray) -> ArModel:
    """Ordinary least squares of the next value on the window.

    Fitted on centered regressors (minimum-norm solution under
    collinearity, so constant series fit cleanly with zero coefficients).
    """
    windows = np.asarray(windows, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if targets.ndim == 2:
        if targets.shape[1] != 1:
            raise UnsupportedHorizonError(
                f"autoregression is only fitted for q = 1, got q = {targets.shape[1]}"
            )
        targets = targets[:, 0]
    n, p = windows.shape
    if n <= p + 1:
        raise ShapeError(f"need more than p+1={p + 1} training rows, got {n}")
    x_mean = windows.mean(axis=0)
    y_mean = float(targets.mean())
    try:
        coef, *_ = np.linalg.lstsq(windows - x_mean, targets - y_mean, rcond=None)
    except np.linalg.LinAlgError as exc:
        raise RankError(f"least-squares fit failed: {exc}") from exc
    return ArModel(coefficients=coef, intercept=y_mean - float(x_mean @ coef))


def ar_predict(ar: ArModel, window: np.ndarray) -> float:
    window = np.asarray(window, dtype=np.float64)
    if window.shape != ar.coefficients.shape:
        raise ShapeError(
            f"window shape {window.shape} does not match fit {ar.coefficients.shape}"
        )
    return float(window @ ar.coefficients + ar.intercept)


@dataclass
class KnnConfig:
    """Euclidean k-nearest-neighbor regression over standardized windows."""

    k: int = 5

    def __post_init__(self):
        if self.k < 1:
            raise ShapeError(f"k must be >= 1, got {self.k}")


def knn_predict(
    cfg: KnnConfig, windows: np.ndarray, targets: np.ndarray, query: np.ndarray
) -> np.ndarray:
    """Mean target vector of the k nearest training windows; distance ties go
    to the earlier node index."""
    windows = np.asarray(windows, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if windows.shape[0] == 0:
        raise ShapeError("empty training set")
    if cfg.k > windows.shape[0]:
        raise ShapeError(f"k={cfg.k} exceeds the {windows.shape[0]} training rows")
    dists = np.linalg.norm(windows - np.asarray(query, dtype=np.float64), axis=1)
    order = np.argsort(dists, kind="stable")
    return targets[order[: cfg.k]].mean(axis=0)


def persistence_predict(window: np.ndarray, q: int) -> np.ndarray:
    """Repeat the most recent observation (windows are most-recent-first)."""
    window = np.asarray(window, dtype=np.float64)
    if q < 1:
        raise ShapeError(f"q must be >= 1, got {q}")
    return np.full(q, window[0], dtype=np.float64)


def fixed_mask_from_positions(positions: np.ndarray) -> np.ndarray:
    """Boolean mask over nodes at the given chronological positions: node v
    attends to itself and the nodes 1 and 52 positions earlier, when present.
    Strictly backward-looking apart from the self-loop."""
    pos = np.asarray(positions, dtype=np.int64)
    diff = pos[:, None] - pos[None, :]
    return (diff == 0) | (diff == 1) | (diff == 52)


def fixed_graph_mask(ds) -> np.ndarray:
    """Fixed virtual graph over a windowed dataset's chronological node order:
    self, one week earlier, 52 weeks earlier."""
    return fixed_mask_from_positions(np.arange(ds.n))
