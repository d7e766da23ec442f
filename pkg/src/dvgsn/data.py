"""Weekly ILI ingestion, sliding-window dataset construction, chronological
splits and standardization.

All functions are pure: they return new objects and never mutate their
inputs, so they are safe to call from multiple threads.
"""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np

from .errors import (
    DegenerateSeriesError,
    FormatError,
    GapError,
    SeriesTooShortError,
    StampNotFoundError,
)

logger = logging.getLogger(__name__)

DATASET_FORMAT_VERSION = "dvgsn-ds-1"

# Chronological split boundaries over node ("current timepoint") stamps.
TRAIN_START, TRAIN_END = (2003, 41), (2012, 2)
VAL_START, VAL_END = (2012, 3), (2014, 42)
TEST_START = (2014, 43)

SPLIT_NAMES = ("train", "val", "test")


@dataclass(frozen=True, order=True)
class WeekStamp:
    """A year/week timepoint such as 2017/12 (the 12th week of 2017).

    Ordering is (year, week). Weeks run 1..53; whether a given year has a
    53rd week is taken from the data, not computed.
    """

    year: int
    week: int

    def __post_init__(self):
        if not 1 <= self.week <= 53:
            raise FormatError(f"week must be in 1..53, got {self.week}")

    def __str__(self) -> str:
        return f"{self.year}/{self.week:02d}"

    @classmethod
    def parse(cls, text: str) -> "WeekStamp":
        try:
            year_s, week_s = text.strip().split("/")
            return cls(int(year_s), int(week_s))
        except (ValueError, AttributeError) as exc:
            raise FormatError(f"cannot parse week stamp {text!r}; expected YYYY/WW") from exc


def is_consecutive(a: WeekStamp, b: WeekStamp) -> bool:
    """True when b directly follows a. Year rollover is accepted from week 52
    or 53 (53-week years appear in the data occasionally)."""
    if b.year == a.year and b.week == a.week + 1:
        return True
    return b.year == a.year + 1 and b.week == 1 and a.week >= 52


def _missing_between(a: WeekStamp, b: WeekStamp, limit: int = 8):
    """Enumerate stamps strictly between a and b assuming 52-week years."""
    missing = []
    cur = a
    while len(missing) < limit:
        cur = WeekStamp(cur.year, cur.week + 1) if cur.week < 52 else WeekStamp(cur.year + 1, 1)
        if cur >= b:
            break
        missing.append(cur)
    return missing


@dataclass(frozen=True)
class IliSeries:
    """Gap-free weekly series of ILI rates (ILI patients / all-illness
    patients, a fraction in [0, 1])."""

    points: tuple  # of (WeekStamp, float)
    provenance: str = ""

    def __post_init__(self):
        for i, (stamp, rate) in enumerate(self.points):
            if not 0.0 <= rate <= 1.0:
                raise FormatError(f"rate out of [0, 1] at {stamp}: {rate}")
            if i > 0:
                prev = self.points[i - 1][0]
                if not is_consecutive(prev, stamp):
                    if stamp <= prev:
                        raise GapError(f"stamps not strictly increasing at {stamp}")
                    missing = _missing_between(prev, stamp)
                    listing = ", ".join(str(s) for s in missing) or f"between {prev} and {stamp}"
                    raise GapError(
                        f"gap between {prev} and {stamp}; missing weeks: {listing}",
                        missing=missing,
                    )

    def __len__(self) -> int:
        return len(self.points)

    def stamps(self) -> tuple:
        return tuple(s for s, _ in self.points)

    def rates(self) -> np.ndarray:
        return np.array([r for _, r in self.points], dtype=np.float64)

    def index_of(self, stamp: WeekStamp) -> int:
        for i, (s, _) in enumerate(self.points):
            if s == stamp:
                return i
        raise StampNotFoundError(
            f"{stamp} not in series ({self.points[0][0]} .. {self.points[-1][0]})"
        )


def parse_ili_csv(raw: str, provenance: str = "csv") -> IliSeries:
    """Parse a header-bearing CSV with YEAR, WEEK and either ILI_RATE or
    (ILITOTAL, TOTAL_PATIENTS) columns into a gap-free series."""
    reader = csv.DictReader(io.StringIO(raw))
    if reader.fieldnames is None:
        raise FormatError("empty input: no header row")
    columns = {name.strip().upper(): name for name in reader.fieldnames if name}
    if "YEAR" not in columns or "WEEK" not in columns:
        raise FormatError(f"missing YEAR/WEEK columns; found {sorted(columns)}")
    has_rate = "ILI_RATE" in columns
    has_counts = "ILITOTAL" in columns and "TOTAL_PATIENTS" in columns
    if not has_rate and not has_counts:
        raise FormatError(
            "need either an ILI_RATE column or both ILITOTAL and TOTAL_PATIENTS; "
            f"found {sorted(columns)}"
        )

    points = []
    for lineno, row in enumerate(reader, start=2):
        if all((v is None or not str(v).strip()) for v in row.values()):
            continue
        try:
            stamp = WeekStamp(int(row[columns["YEAR"]]), int(row[columns["WEEK"]]))
        except (TypeError, ValueError) as exc:
            raise FormatError(f"bad YEAR/WEEK on line {lineno}: {row}") from exc
        if has_rate:
            rate = float(row[columns["ILI_RATE"]])
        else:
            total = float(row[columns["TOTAL_PATIENTS"]])
            if total == 0.0:
                raise FormatError(f"TOTAL_PATIENTS is zero on line {lineno} ({stamp})")
            rate = float(row[columns["ILITOTAL"]]) / total
        points.append((stamp, rate))
    if not points:
        raise FormatError("no data rows found")
    return IliSeries(points=tuple(points), provenance=provenance)


@dataclass(frozen=True)
class WindowedDataset:
    """Supervised windows over a weekly series.

    Row v of ``windows`` holds the most-recent-first observations
    [o_v, o_{v-1}, ..., o_{v-p+1}] for the node whose current timepoint is
    ``node_stamps[v]``; row v of ``targets`` holds [o_{v+1}, ..., o_{v+q}].
    After :func:`standardize`, both matrices are on the z-score scale and
    ``norm`` carries (mean, std) for inversion.
    """

    windows: np.ndarray
    targets: np.ndarray
    node_stamps: tuple
    p: int
    q: int
    split: Optional[tuple] = None  # per-node label in {train, val, test, unused}
    norm: Optional[tuple] = None  # (mean, std) once standardized

    @property
    def n(self) -> int:
        return self.windows.shape[0]

    def split_indices(self, name: str) -> np.ndarray:
        if self.split is None:
            raise StampNotFoundError("dataset has no split labels yet")
        return np.flatnonzero(np.array(self.split) == name)

    def split_counts(self) -> dict:
        if self.split is None:
            return {}
        labels, counts = np.unique(np.array(self.split), return_counts=True)
        return dict(zip(labels.tolist(), counts.tolist()))

    def index_of(self, stamp: WeekStamp) -> int:
        for i, s in enumerate(self.node_stamps):
            if s == stamp:
                return i
        raise StampNotFoundError(
            f"{stamp} is not a node timepoint "
            f"({self.node_stamps[0]} .. {self.node_stamps[-1]})"
        )

    def to_json(self) -> str:
        doc = {
            "version": DATASET_FORMAT_VERSION,
            "p": self.p,
            "q": self.q,
            "stamps": [str(s) for s in self.node_stamps],
            "windows": self.windows.tolist(),
            "targets": self.targets.tolist(),
            "split": list(self.split) if self.split is not None else None,
            "norm": list(self.norm) if self.norm is not None else None,
        }
        return json.dumps(doc)

    @classmethod
    def from_json(cls, text: str) -> "WindowedDataset":
        doc = json.loads(text)
        if doc.get("version") != DATASET_FORMAT_VERSION:
            raise FormatError(f"unsupported dataset version {doc.get('version')!r}")
        return cls(
            windows=np.array(doc["windows"], dtype=np.float64),
            targets=np.array(doc["targets"], dtype=np.float64),
            node_stamps=tuple(WeekStamp.parse(s) for s in doc["stamps"]),
            p=int(doc["p"]),
            q=int(doc["q"]),
            split=tuple(doc["split"]) if doc.get("split") is not None else None,
            norm=tuple(doc["norm"]) if doc.get("norm") is not None else None,
        )


def build_windows(series: IliSeries, p: int, q: int) -> WindowedDataset:
    """Slide a (p observations -> q targets) window over the series.

    n = |series| - p - q + 1 nodes; node v's current timepoint is the p-th
    stamp of its window, so windows never overlap their targets.
    """
    if p < 1 or q < 1:
        raise SeriesTooShortError(f"p and q must be >= 1, got p={p}, q={q}")
    if len(series) < p + q:
        raise SeriesTooShortError(
            f"series has {len(series)} points; need at least p+q = {p + q}"
        )
    values = series.rates()
    n = len(series) - p - q + 1
    obs = np.lib.stride_tricks.sliding_window_view(values, p)
    tgt = np.lib.stride_tricks.sliding_window_view(values, q)
    windows = obs[0:n, ::-1].copy()  # most-recent-first
    targets = tgt[p : p + n].copy()
    stamps = series.stamps()[p - 1 : p - 1 + n]
    return WindowedDataset(windows=windows, targets=targets, node_stamps=stamps, p=p, q=q)


def assign_paper_splits(ds: WindowedDataset) -> WindowedDataset:
    """Label nodes train (2003/41-2012/02), val (2012/03-2014/42) or test
    (2014/43 to the last node, which shrinks with q so targets stay within
    the observed series). Nodes before the training range are 'unused'."""
    train_lo, train_hi = WeekStamp(*TRAIN_START), WeekStamp(*TRAIN_END)
    val_lo, val_hi = WeekStamp(*VAL_START), WeekStamp(*VAL_END)
    test_lo = WeekStamp(*TEST_START)
    labels = []
    for stamp in ds.node_stamps:
        if train_lo <= stamp <= train_hi:
            labels.append("train")
        elif val_lo <= stamp <= val_hi:
            labels.append("val")
        elif stamp >= test_lo:
            labels.append("test")
        else:
            labels.append("unused")
    unused = labels.count("unused")
    if unused:
        logger.warning("%d node(s) fall outside all split ranges and are unused", unused)
    return replace(ds, split=tuple(labels))


def assign_fraction_splits(
    ds: WindowedDataset, train_frac: float = 0.6, val_frac: float = 0.2
) -> WindowedDataset:
    """Chronologically contiguous train/val/test split by node fractions, for
    series that do not cover the 2003-2017 calendar ranges."""
    if not 0 < train_frac < 1 or not 0 < val_frac < 1 or train_frac + val_frac >= 1:
        raise SeriesTooShortError("fractions must be positive and sum to < 1")
    n = ds.n
    n_train = int(round(n * train_frac))
    n_val = int(round(n * val_frac))
    if n_train < 1 or n_val < 1 or n_train + n_val >= n:
        raise SeriesTooShortError(f"cannot split {n} nodes into {train_frac}/{val_frac}")
    labels = ["train"] * n_train + ["val"] * n_val + ["test"] * (n - n_train - n_val)
    return replace(ds, split=tuple(labels))


def _train_window_values(ds: WindowedDataset) -> np.ndarray:
    """Raw series values covered by the training nodes' observation windows,
    each distinct timepoint once."""
    train_idx = ds.split_indices("train")
    if train_idx.size == 0:
        raise DegenerateSeriesError("train split is empty")
    # Node v's window spans series positions v-p+1..v; node order is
    # chronological, so the union is one contiguous run. Recover it from the
    # window matrix: all last-column values plus the first node's full window.
    first = ds.windows[train_idx[0], ::-1]  # oldest-first
    rest = ds.windows[train_idx[1:], 0]
    return np.concatenate([first, rest])


def standardize(ds: WindowedDataset) -> WindowedDataset:
    """Z-score windows and targets with population statistics of the raw
    values inside training windows only."""
    if ds.norm is not None:
        raise DegenerateSeriesError("dataset is already standardized")
    values = _train_window_values(ds)
    mean = float(values.mean())
    std = float(values.std())  # population std: deterministic, scale-free tests
    if std == 0.0:
        raise DegenerateSeriesError("training-window values are constant; zero std")
    return replace(
        ds,
        windows=(ds.windows - mean) / std,
        targets=(ds.targets - mean) / std,
        norm=(mean, std),
    )


def destandardize(ds: WindowedDataset, values: np.ndarray) -> np.ndarray:
    """Map standardized values back to the raw rate scale."""
    if ds.norm is None:
        return np.asarray(values, dtype=np.float64)
    mean, std = ds.norm
    return np.asarray(values, dtype=np.float64) * std + mean


# ---------------------------------------------------------------------------
# Season descriptive statistics (the ingest summary table)

SEASON_THRESHOLD = 0.01  # a season week has rate strictly above this
PEAK_WINDOW = 8  # a peak dominates every other week within +/- this distance


@dataclass(frozen=True)
class SeasonRow:
    label: str
    peaks: tuple  # of (WeekStamp, rate), chronological
    duration: int


@dataclass(frozen=True)
class SeasonStats:
    rows: tuple
    mean_peak_rate: float
    sd_peak_rate: float  # sample SD over all peak entries
    mean_duration: float
    sd_duration: float


def _run_peaks(rates: np.ndarray, start: int, end: int) -> list:
    """Local maxima inside rates[start:end] that strictly dominate every other
    value within PEAK_WINDOW weeks (plateaus count once, at their first week)."""
    peaks = []
    w = start
    while w < end:
        plateau_end = w
        while plateau_end + 1 < end and rates[plateau_end + 1] == rates[w]:
            plateau_end += 1
        lo = max(start, w - PEAK_WINDOW)
        hi = min(end, plateau_end + 1 + PEAK_WINDOW)
        neighborhood = np.concatenate([rates[lo:w], rates[plateau_end + 1 : hi]])
        if neighborhood.size == 0 or rates[w] > neighborhood.max():
            peaks.append(w)
        w = plateau_end + 1
    return peaks


def season_statistics(series: IliSeries, threshold: float = SEASON_THRESHOLD) -> SeasonStats:
    """Summarize influenza seasons: maximal runs of weeks with rate above the
    threshold. Each run is labeled by the year containing its highest peak
    (a peak in weeks 1..26 belongs to the season that started the year
    before); multi-wave runs report every dominant local maximum."""
    rates = series.rates()
    stamps = series.stamps()
    above = rates > threshold
    rows = []
    all_peak_rates = []
    i = 0
    while i < len(rates):
        if not above[i]:
            i += 1
            continue
        j = i
        while j < len(rates) and above[j]:
            j += 1
        peak_idx = _run_peaks(rates, i, j)
        if not peak_idx:
            peak_idx = [i + int(np.argmax(rates[i:j]))]
        top = max(peak_idx, key=lambda w: rates[w])
        year = stamps[top].year if stamps[top].week >= 27 else stamps[top].year - 1
        rows.append(
            SeasonRow(
                label=f"{year}-{year + 1}",
                peaks=tuple((stamps[w], float(rates[w])) for w in peak_idx),
                duration=j - i,
            )
        )
        all_peak_rates.extend(float(rates[w]) for w in peak_idx)
        i = j
    peaks = np.array(all_peak_rates, dtype=np.float64)
    durations = np.array([r.duration for r in rows], dtype=np.float64)
    return SeasonStats(
        rows=tuple(rows),
        mean_peak_rate=float(peaks.mean()) if peaks.size else float("nan"),
        sd_peak_rate=float(peaks.std(ddof=1)) if peaks.size > 1 else float("nan"),
        mean_duration=float(durations.mean()) if durations.size else float("nan"),
        sd_duration=float(durations.std(ddof=1)) if durations.size > 1 else float("nan"),
    )
