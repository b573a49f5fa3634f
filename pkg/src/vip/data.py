"""Dataset loading, standardization, splitting, and synthetic generators.

CSV convention: comma separated, '.' decimal point, optional single header
row, last column is the regression target.  Standardization statistics are
always computed on training rows and carried along so predictions can be
mapped back to the original scale.
"""

import csv
import math
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, ParameterError, ParseError
from .numkit import STREAM_DATA, STREAM_SPLIT, Rng


@dataclass
class Stats:
    """Per-column standardization statistics (population std, ddof=0)."""

    feature_means: np.ndarray
    feature_stds: np.ndarray
    target_mean: float
    target_std: float

    def to_dict(self) -> dict:
        return {
            "feature_means": [float(v) for v in self.feature_means],
            "feature_stds": [float(v) for v in self.feature_stds],
            "target_mean": float(self.target_mean),
            "target_std": float(self.target_std),
        }

    @staticmethod
    def from_dict(d: dict) -> "Stats":
        return Stats(
            feature_means=np.asarray(d["feature_means"], dtype=float),
            feature_stds=np.asarray(d["feature_stds"], dtype=float),
            target_mean=float(d["target_mean"]),
            target_std=float(d["target_std"]),
        )


@dataclass
class Dataset:
    """Feature matrix plus target vector; stats present once standardized."""

    x: np.ndarray
    y: np.ndarray
    stats: Stats = None

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=float)
        self.y = np.asarray(self.y, dtype=float)
        if self.x.ndim != 2:
            raise ParameterError("x must be 2-d")
        if self.y.ndim != 1 or self.y.shape[0] != self.x.shape[0]:
            raise ParameterError("y must be a vector with one entry per row of x")

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def d(self) -> int:
        return self.x.shape[1]

    @property
    def standardized(self) -> bool:
        return self.stats is not None

    def take(self, idx) -> "Dataset":
        return Dataset(self.x[idx], self.y[idx], stats=self.stats)


def load_csv(path: str, has_header: bool = False) -> Dataset:
    """Parse a regression CSV; last column is the target.

    Errors cite 1-based (row, col) file coordinates, counting the header
    row when present.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    start = 1 if has_header else 0
    data_rows = [(i + 1, r) for i, r in enumerate(rows) if i >= start]
    data_rows = [(ln, r) for ln, r in data_rows if r]  # skip blank lines
    if not data_rows:
        raise ParseError(f"{path}: no data rows")
    width = len(data_rows[0][1])
    if width < 2:
        raise ParseError(
            f"{path}: need at least one feature column plus a target",
            row=data_rows[0][0],
            col=1,
        )
    out = np.empty((len(data_rows), width))
    for i, (ln, cells) in enumerate(data_rows):
        if len(cells) != width:
            raise ParseError(
                f"{path}: expected {width} cells, found {len(cells)}", row=ln, col=1
            )
        for j, cell in enumerate(cells):
            try:
                out[i, j] = float(cell.strip())
            except ValueError:
                raise ParseError(
                    f"{path}: non-numeric cell {cell.strip()!r}", row=ln, col=j + 1
                ) from None
    return Dataset(out[:, :-1], out[:, -1])


_MIN_STD = 1e-12


def compute_stats(data: Dataset) -> Stats:
    """Column means/stds of a training set; constant columns are rejected."""
    fm = data.x.mean(axis=0)
    fs = data.x.std(axis=0)
    for j, s in enumerate(fs):
        if s <= _MIN_STD:
            raise ContractError(f"feature column {j} is constant")
    tm = float(data.y.mean())
    ts = float(data.y.std())
    if ts <= _MIN_STD:
        raise ContractError("target column is constant")
    return Stats(fm, fs, tm, ts)


def apply_stats(data: Dataset, stats: Stats) -> Dataset:
    if stats.feature_means.shape[0] != data.d:
        raise ParameterError("stats dimension does not match data")
    x = (data.x - stats.feature_means) / stats.feature_stds
    y = (data.y - stats.target_mean) / stats.target_std
    return Dataset(x, y, stats=stats)


def standardize(data: Dataset) -> Dataset:
    """Standardize in place of the data's own statistics (training use)."""
    return apply_stats(data, compute_stats(data))


def destandardize_y(y: np.ndarray, stats: Stats) -> np.ndarray:
    return np.asarray(y, dtype=float) * stats.target_std + stats.target_mean


def split(data: Dataset, train_frac: float, seed: int):
    """Random train/test split; both halves keep original row order."""
    if not 0.0 < train_frac < 1.0:
        raise ParameterError("train_frac must lie in (0, 1)")
    n = data.n
    if n < 2:
        raise ParameterError("need at least 2 rows to split")
    n_train = min(max(int(train_frac * n), 1), n - 1)
    perm = Rng(seed, STREAM_SPLIT).permutation(n)
    tr = np.sort(perm[:n_train])
    te = np.sort(perm[n_train:])
    return data.take(tr), data.take(te)


def interp_split(data: Dataset, n_segments: int, segment_len: int, seed: int):
    """Remove n_segments disjoint contiguous index runs of segment_len as test.

    Placement is uniform over all non-overlapping arrangements: k starts are
    drawn sorted from a compressed range of size N - k*L + k and expanded by
    i*(L-1) so consecutive choices cannot collide.
    """
    if n_segments < 1 or segment_len < 1:
        raise ParameterError("segment counts must be positive")
    n, k, seg = data.n, n_segments, segment_len
    if k * seg >= n:
        raise ParameterError(
            f"{k} segments of length {seg} leave no training rows in {n}"
        )
    rng = Rng(seed, STREAM_SPLIT)
    compressed = rng.choose_sorted(n - k * seg + k, k)
    test_idx = []
    for i, c in enumerate(compressed):
        start = int(c) + i * (seg - 1)
        test_idx.extend(range(start, start + seg))
    test_idx = np.asarray(test_idx)
    mask = np.ones(n, dtype=bool)
    mask[test_idx] = False
    return data.take(np.nonzero(mask)[0]), data.take(test_idx)


def toy_fn(x: np.ndarray) -> np.ndarray:
    """cos(5x) / (|x| + 1), the bumpy 1-d target used throughout."""
    x = np.asarray(x, dtype=float)
    return np.cos(5.0 * x) / (np.abs(x) + 1.0)


def synth_toy(n: int, seed: int, noise: str = "var") -> Dataset:
    """n rows of x ~ N(0,1) with y = toy_fn(x) plus Gaussian noise.

    noise: "var" treats the 0.1 noise level as a variance, "std" as a
    standard deviation, "none" disables it.  Inputs are drawn before the
    noise from the same stream, so all modes share the same x.
    """
    if n < 1:
        raise ParameterError("n must be positive")
    scales = {"var": math.sqrt(0.1), "std": 0.1, "none": 0.0}
    if noise not in scales:
        raise ParameterError(f"unknown noise mode {noise!r}")
    rng = Rng(seed, STREAM_DATA)
    x = rng.standard_normal(n)
    eps = rng.standard_normal(n)
    y = toy_fn(x) + scales[noise] * eps
    return Dataset(x.reshape(n, 1), y)


def toy_grid(n: int = 1000) -> Dataset:
    """Noiseless evaluation grid: n evenly spaced points on [-3, 3]."""
    if n < 2:
        raise ParameterError("grid needs at least 2 points")
    x = np.linspace(-3.0, 3.0, n)
    return Dataset(x.reshape(n, 1), toy_fn(x))
