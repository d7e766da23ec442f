"""End-to-end training loop and transductive evaluation.

Each epoch runs the forward pass over all training nodes as one graph,
partitions the training nodes into shuffled batches, and takes one Adam
step per batch on the batch data term plus the full-graph significance
penalty. After every epoch the validation MSE is computed and the
parameters from the best validation epoch are returned.

Evaluation never leaks the future: an evaluation node joins a graph whose
permitted neighbors are training nodes plus itself; evaluation nodes see
neither each other nor later timepoints, and training-node rows never
attend to evaluation columns.
"""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import baselines as bl
from . import model as md
from .data import WindowedDataset, destandardize
from .errors import NumericalError, ShapeError, TrainingDivergedError, UnsupportedHorizonError
from .numerics import AdamState, Rng, adam_step

logger = logging.getLogger(__name__)

RESULT_COLUMNS = (
    "run_id",
    "model",
    "p",
    "q",
    "lambda",
    "seed",
    "split",
    "mse_std",
    "mse_raw",
    "best_epoch",
    "wall_clock_s",
    "error",
)

GRAPH_MODES = ("dynamic", "fixed")


@dataclass
class TrainConfig:
    """Hyperparameters of one training run."""

    p: int
    q: int
    hidden: int = md.DEFAULT_HIDDEN
    lr: float = 0.001
    epochs: int = 200
    penalty: float = 0.01  # weight of the squared-Frobenius significance term
    batch_size: int = 32
    seed: int = 0
    loss_mode: str = "averaged"

    def validate(self, n_train: int) -> None:
        if self.p < 1 or self.q < 1:
            raise ShapeError(f"p and q must be >= 1, got p={self.p}, q={self.q}")
        if self.epochs < 1:
            raise ShapeError(f"epochs must be >= 1, got {self.epochs}")
        if self.penalty < 0:
            raise ShapeError(f"penalty must be >= 0, got {self.penalty}")
        if not 1 <= self.batch_size <= n_train:
            raise ShapeError(
                f"batch_size must be in [1, n_train={n_train}], got {self.batch_size}"
            )
        if self.loss_mode not in ("averaged", "summed"):
            raise ShapeError(f"unknown loss mode {self.loss_mode!r}")

    def as_dict(self) -> dict:
        return {
            "p": self.p,
            "q": self.q,
            "hidden": self.hidden,
            "lr": self.lr,
            "epochs": self.epochs,
            "lambda": self.penalty,
            "batch_size": self.batch_size,
            "seed": self.seed,
            "loss_mode": self.loss_mode,
        }


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float  # full-graph data term + penalty, in the configured mode
    train_mse: float  # full-graph averaged MSE without the penalty
    val_mse: float
    t_frob_sq: float


@dataclass
class TrainHistory:
    records: list = field(default_factory=list)
    wall_clock_s: list = field(default_factory=list)  # kept out of serialization

    @property
    def best_epoch(self) -> int:
        """First epoch attaining the minimum validation MSE."""
        vals = [r.val_mse for r in self.records]
        return int(np.argmin(vals))

    def write_jsonl(self, path) -> None:
        """One JSON record per epoch. Wall-clock is deliberately excluded so
        identical runs serialize byte-identically."""
        import json

        with open(path, "w", encoding="utf-8") as fh:
            for r in self.records:
                fh.write(
                    json.dumps(
                        {
                            "epoch": r.epoch,
                            "train_loss": r.train_loss,
                            "train_mse": r.train_mse,
                            "val_mse": r.val_mse,
                            "t_frob_sq": r.t_frob_sq,
                        }
                    )
                    + "\n"
                )


@dataclass
class EvalReport:
    split: str
    mse_std: float
    mse_raw: float
    per_horizon_mse: list
    n_nodes: int


@dataclass
class _EvalGraph:
    """Cached node stacking + mask for repeated evaluation of one split."""

    windows: np.ndarray
    targets: np.ndarray
    mask: np.ndarray
    eval_rows: np.ndarray
    n_train: int
    train_positions: np.ndarray
    eval_positions: np.ndarray


def transductive_mask(
    train_positions: np.ndarray, eval_positions: np.ndarray | None, graph: str = "dynamic"
) -> np.ndarray:
    """Neighborhood mask for training nodes optionally followed by evaluation
    nodes, indexed by chronological positions.

    Training rows attend to training columns (all of them for the dynamic
    graph; offsets 0/-1/-52 for the fixed one). Evaluation rows attend to
    training columns (same rule) plus their own self-loop, never to other
    evaluation nodes. Training rows never attend to evaluation columns.
    """
    if graph not in GRAPH_MODES:
        raise ShapeError(f"unknown graph mode {graph!r}")
    tp = np.asarray(train_positions, dtype=np.int64)
    n_tr = tp.size
    ep = np.asarray(eval_positions, dtype=np.int64) if eval_positions is not None else None
    m = n_tr + (ep.size if ep is not None else 0)
    mask = np.zeros((m, m), dtype=bool)
    if graph == "dynamic":
        mask[:n_tr, :n_tr] = True
    else:
        diff = tp[:, None] - tp[None, :]
        mask[:n_tr, :n_tr] = (diff == 0) | (diff == 1) | (diff == 52)
    if ep is not None and ep.size:
        diff = ep[:, None] - tp[None, :]
        if graph == "dynamic":
            mask[n_tr:, :n_tr] = True
        else:
            mask[n_tr:, :n_tr] = (diff == 1) | (diff == 52)
    np.fill_diagonal(mask, True)
    return mask


def _build_eval_graph(ds: WindowedDataset, split: str, graph: str) -> _EvalGraph:
    if split not in ("train", "val", "test"):
        raise ShapeError(f"unknown split {split!r}")
    train_idx = ds.split_indices("train")
    if split == "train":
        mask = transductive_mask(train_idx, None, graph)
        return _EvalGraph(
            windows=ds.windows[train_idx],
            targets=ds.targets[train_idx],
            mask=mask,
            eval_rows=np.arange(train_idx.size),
            n_train=train_idx.size,
            train_positions=train_idx,
            eval_positions=train_idx,
        )
    eval_idx = ds.split_indices(split)
    if eval_idx.size == 0:
        raise ShapeError(f"split {split!r} is empty")
    mask = transductive_mask(train_idx, eval_idx, graph)
    return _EvalGraph(
        windows=np.vstack([ds.windows[train_idx], ds.windows[eval_idx]]),
        targets=np.vstack([ds.targets[train_idx], ds.targets[eval_idx]]),
        mask=mask,
        eval_rows=np.arange(train_idx.size, train_idx.size + eval_idx.size),
        n_train=train_idx.size,
        train_positions=train_idx,
        eval_positions=eval_idx,
    )


def _report(ds: WindowedDataset, split: str, targets, predictions) -> EvalReport:
    residuals = predictions - targets
    per_horizon = np.mean(residuals * residuals, axis=0)
    mse_std = float(per_horizon.mean())
    std = ds.norm[1] if ds.norm is not None else 1.0
    return EvalReport(
        split=split,
        mse_std=mse_std,
        mse_raw=mse_std * std * std,
        per_horizon_mse=[float(v) for v in per_horizon],
        n_nodes=targets.shape[0],
    )


def evaluate(
    params: md.ModelParams, ds: WindowedDataset, split: str, graph: str = "dynamic"
) -> EvalReport:
    """Score one split transductively (see module docstring for the edge
    policy). MSE is reported on the standardized scale and, via the stored
    normalization, on the raw rate scale."""
    eg = _build_eval_graph(ds, split, graph)
    acts = md.forward(eg.windows, params, eg.mask)
    preds = acts.predictions[eg.eval_rows]
    return _report(ds, split, eg.targets[eg.eval_rows], preds)


def _fit_arrays(
    x_train: np.ndarray,
    y_train: np.ndarray,
    cfg: TrainConfig,
    graph: str = "dynamic",
    train_positions: np.ndarray | None = None,
    val_graph: _EvalGraph | None = None,
) -> tuple:
    """Core loop over standardized arrays; returns (best params, history).

    ``val_graph`` supplies the per-epoch validation forward; without it the
    training MSE doubles as the selection metric.
    """
    n_train = x_train.shape[0]
    cfg.validate(n_train)
    if graph not in GRAPH_MODES:
        raise ShapeError(f"unknown graph mode {graph!r}")
    positions = (
        np.asarray(train_positions, dtype=np.int64)
        if train_positions is not None
        else np.arange(n_train, dtype=np.int64)
    )
    mask = transductive_mask(positions, None, graph)

    rng = Rng(cfg.seed)
    params = md.ModelParams.init(rng, cfg.p, cfg.q, cfg.hidden)
    states = {name: AdamState.for_param(w) for name, w in params.as_dict().items()}

    history = TrainHistory()
    best_params = params.copy()
    best_val = np.inf
    all_nodes = np.arange(n_train)

    for epoch in range(cfg.epochs):
        tic = time.perf_counter()
        order = rng.permutation(n_train)
        for step, start in enumerate(range(0, n_train, cfg.batch_size)):
            batch = order[start : start + cfg.batch_size]
            try:
                loss_value, grads = md.gradients(
                    x_train, y_train, params, mask, cfg.penalty, batch, cfg.loss_mode
                )
            except NumericalError as exc:
                raise TrainingDivergedError(
                    f"diverged at epoch {epoch}, step {step}: {exc}", epoch=epoch, step=step
                ) from exc
            if not np.isfinite(loss_value):
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch}, step {step}", epoch=epoch, step=step
                )
            for name in md.PARAM_NAMES:
                new_w = adam_step(getattr(params, name), grads[name], states[name], cfg.lr)
                setattr(params, name, new_w)

        acts = md.forward(x_train, params, mask)
        train_mse = md.loss(
            y_train, acts.predictions, np.zeros_like(acts.significance), 0.0, all_nodes
        )
        t_frob_sq = float(np.sum(acts.significance * acts.significance))
        train_loss = md.loss(
            y_train, acts.predictions, acts.significance, cfg.penalty, all_nodes, cfg.loss_mode
        )
        if val_graph is not None:
            val_acts = md.forward(val_graph.windows, params, val_graph.mask)
            val_preds = val_acts.predictions[val_graph.eval_rows]
            val_diff = val_preds - val_graph.targets[val_graph.eval_rows]
            val_mse = float(np.mean(val_diff * val_diff))
        else:
            val_mse = train_mse
        history.records.append(
            EpochRecord(
                epoch=epoch,
                train_loss=train_loss,
                train_mse=train_mse,
                val_mse=val_mse,
                t_frob_sq=t_frob_sq,
            )
        )
        history.wall_clock_s.append(time.perf_counter() - tic)
        if val_mse < best_val:
            best_val = val_mse
            best_params = params.copy()

    return best_params, history


def train(ds: WindowedDataset, cfg: TrainConfig, graph: str = "dynamic") -> tuple:
    """Train on a standardized, split-labeled dataset; returns (params from
    the best validation epoch, history)."""
    if ds.norm is None:
        raise ShapeError("dataset must be standardized before training")
    if ds.split is None:
        raise ShapeError("dataset must carry split labels before training")
    if ds.p != cfg.p or ds.q != cfg.q:
        raise ShapeError(
            f"config (p={cfg.p}, q={cfg.q}) does not match dataset (p={ds.p}, q={ds.q})"
        )
    train_idx = ds.split_indices("train")
    val_graph = _build_eval_graph(ds, "val", graph)
    return _fit_arrays(
        ds.windows[train_idx],
        ds.targets[train_idx],
        cfg,
        graph=graph,
        train_positions=train_idx,
        val_graph=val_graph,
    )


def audit_no_leakage(ds: WindowedDataset, split: str, graph: str = "dynamic") -> int:
    """Verify that every mask-permitted neighbor of every evaluation node is a
    training node (stamp within the training range). Returns the number of
    neighbor edges checked; raises on any violation."""
    eg = _build_eval_graph(ds, split, graph)
    train_stamps = [ds.node_stamps[i] for i in eg.train_positions]
    last_train = max(train_stamps)
    checked = 0
    for local_row, global_idx in enumerate(eg.eval_positions):
        row = eg.mask[eg.eval_rows[local_row]]
        neighbors = np.flatnonzero(row)
        for col in neighbors:
            if col == eg.eval_rows[local_row]:
                continue  # self-loop
            if col >= eg.n_train:
                raise NumericalError(
                    f"evaluation node {ds.node_stamps[global_idx]} attends to a "
                    "non-training column"
                )
            if ds.node_stamps[eg.train_positions[col]] > last_train:
                raise NumericalError("neighbor stamp beyond the training range")
            checked += 1
    return checked


# ---------------------------------------------------------------------------
# Experiment grid


def _evaluate_baseline(name: str, ds: WindowedDataset, split: str, k: int) -> EvalReport:
    train_idx = ds.split_indices("train")
    eval_idx = ds.split_indices(split)
    x_tr, y_tr = ds.windows[train_idx], ds.targets[train_idx]
    x_ev, y_ev = ds.windows[eval_idx], ds.targets[eval_idx]
    if name == "ar":
        ar = bl.ar_fit(x_tr, y_tr)
        preds = np.array([[bl.ar_predict(ar, w)] for w in x_ev])
    elif name == "knn":
        cfg = bl.KnnConfig(k=k)
        preds = np.array([bl.knn_predict(cfg, x_tr, y_tr, w) for w in x_ev])
    elif name == "persistence":
        preds = np.array([bl.persistence_predict(w, ds.q) for w in x_ev])
    else:
        raise ShapeError(f"unknown baseline {name!r}")
    return _report(ds, split, y_ev, preds)


def run_experiment_grid(
    series,
    ps,
    qs,
    penalties,
    base: TrainConfig | None = None,
    models=("dvgsn",),
    knn_k: int = 5,
    prepare=None,
) -> list:
    """One train+evaluate per (p, q, penalty, model) cell; per-cell failures
    are recorded in the result and the grid continues.

    ``prepare`` maps (series, p, q) to a standardized split dataset; the
    default applies the calendar splits. Returns one record per cell with
    val and test metrics.
    """
    from .data import assign_paper_splits, build_windows, standardize

    if prepare is None:
        prepare = lambda s, p, q: standardize(assign_paper_splits(build_windows(s, p, q)))
    base = base or TrainConfig(p=0, q=0)
    records = []
    for p in ps:
        for q in qs:
            try:
                ds = prepare(series, p, q)
            except Exception as exc:  # record and keep sweeping
                for penalty in penalties:
                    for name in models:
                        records.append(_grid_record(name, p, q, penalty, base.seed, error=str(exc)))
                continue
            for penalty in penalties:
                for name in models:
                    records.append(
                        _run_cell(ds, name, p, q, penalty, base, knn_k)
                    )
    return records


def _grid_record(model, p, q, penalty, seed, **extra) -> dict:
    rec = {
        "run_id": f"{model}-p{p}-q{q}-lam{penalty:g}-seed{seed}",
        "model": model,
        "p": p,
        "q": q,
        "lambda": penalty,
        "seed": seed,
        "best_epoch": None,
        "wall_clock_s": None,
        "val_mse_std": None,
        "val_mse_raw": None,
        "test_mse_std": None,
        "test_mse_raw": None,
        "error": "",
    }
    rec.update(extra)
    return rec


def _run_cell(ds, name, p, q, penalty, base: TrainConfig, knn_k: int) -> dict:
    tic = time.perf_counter()
    try:
        if name in ("dvgsn", "dvgsn-fixed"):
            graph = "fixed" if name == "dvgsn-fixed" else "dynamic"
            cfg = TrainConfig(
                p=p,
                q=q,
                hidden=base.hidden,
                lr=base.lr,
                epochs=base.epochs,
                penalty=penalty,
                batch_size=base.batch_size,
                seed=base.seed,
                loss_mode=base.loss_mode,
            )
            params, history = train(ds, cfg, graph=graph)
            val = evaluate(params, ds, "val", graph=graph)
            test = evaluate(params, ds, "test", graph=graph)
            best_epoch = history.best_epoch
        elif name == "ar" and q != 1:
            raise UnsupportedHorizonError("autoregression is only fitted for q = 1")
        else:
            run_name = name if name != "knn" else f"knn-k{knn_k}"
            val = _evaluate_baseline(name, ds, "val", knn_k)
            test = _evaluate_baseline(name, ds, "test", knn_k)
            best_epoch = None
            name = run_name
    except Exception as exc:
        logger.warning("grid cell %s p=%s q=%s lambda=%s failed: %s", name, p, q, penalty, exc)
        return _grid_record(name, p, q, penalty, base.seed, error=str(exc))
    rec = _grid_record(name, p, q, penalty, base.seed)
    rec.update(
        best_epoch=best_epoch,
        wall_clock_s=time.perf_counter() - tic,
        val_mse_std=val.mse_std,
        val_mse_raw=val.mse_raw,
        test_mse_std=test.mse_std,
        test_mse_raw=test.mse_raw,
    )
    return rec


def write_results_csv(records, path) -> None:
    """Long-format results: one row per (cell, split)."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(RESULT_COLUMNS)
        for rec in records:
            for split in ("val", "test"):
                mse_std = rec.get(f"{split}_mse_std")
                mse_raw = rec.get(f"{split}_mse_raw")
                writer.writerow(
                    [
                        rec["run_id"],
                        rec["model"],
                        rec["p"],
                        rec["q"],
                        rec["lambda"],
                        rec["seed"],
                        split,
                        repr(mse_std) if mse_std is not None else "",
                        repr(mse_raw) if mse_raw is not None else "",
                        rec["best_epoch"] if rec["best_epoch"] is not None else "",
                        repr(rec["wall_clock_s"]) if rec["wall_clock_s"] is not None else "",
                        rec.get("error", ""),
                    ]
                )
