"""Synthetic datasets and CSV loading for the experiment runner."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np


class ParseError(ValueError):
    pass


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray  # (N, d) float64
    labels: np.ndarray  # (N,) int64
    train_idx: np.ndarray
    test_idx: np.ndarray

    def __post_init__(self) -> None:
        if self.features.shape[0] != self.labels.shape[0]:
            raise ValueError("features and labels disagree on sample count")
        if np.intersect1d(self.train_idx, self.test_idx).size:
            raise ValueError("train/test indices overlap")

    @property
    def n_classes(self) -> int:
        return int(self.labels.max()) + 1

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    def train(self) -> tuple[np.ndarray, np.ndarray]:
        return self.features[self.train_idx], self.labels[self.train_idx]

    def test(self) -> tuple[np.ndarray, np.ndarray]:
        return self.features[self.test_idx], self.labels[self.test_idx]


def gen_blobs(
    classes: int, dim: int, per_class: int, spread: float, seed: int
) -> Dataset:
    """Gaussian clusters with an 80/20 train/test split, fully seeded."""
    if classes < 2:
        raise ValueError("need at least two classes")
    rng = np.random.default_rng(seed)
    means = rng.normal(0.0, 1.0, size=(classes, dim))
    features = np.repeat(means, per_class, axis=0)
    features = features + spread * rng.normal(size=features.shape)
    labels = np.repeat(np.arange(classes, dtype=np.int64), per_class)
    n = classes * per_class
    perm = rng.permutation(n)
    n_train = int(round(0.8 * n))
    return Dataset(features, labels, perm[:n_train], perm[n_train:])


def save_csv(dataset: Dataset, path: str | Path) -> None:
    """Write `f0..f{d-1},label` rows; float text via repr so loads are exact."""
    path = Path(path)
    d = dataset.n_features
    header = ",".join([f"f{i}" for i in range(d)] + ["label"])
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        fh.write(header + "\n")
        for row, label in zip(dataset.features, dataset.labels):
            fh.write(",".join(repr(float(v)) for v in row) + f",{int(label)}\n")


def load_csv(path: str | Path, test_fraction: float = 0.2, seed: int = 0) -> Dataset:
    """Parse feature floats + trailing integer label; header row optional.

    The train/test split is a seeded shuffle so callers get reproducible
    experiments regardless of row order in the file.
    """
    path = Path(path)
    features: list[list[float]] = []
    labels: list[int] = []
    width = None
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            cells = line.split(",")
            if lineno == 1:
                try:
                    float(cells[0])
                except ValueError:
                    continue  # header row
            if width is None:
                width = len(cells)
            elif len(cells) != width:
                raise ParseError(
                    f"{path}: line {lineno}: expected {width} cells, got {len(cells)}"
                )
            try:
                row = [float(c) for c in cells[:-1]]
            except ValueError as exc:
                raise ParseError(f"{path}: line {lineno}: non-numeric feature ({exc})")
            try:
                label = int(cells[-1])
            except ValueError:
                raise ParseError(
                    f"{path}: line {lineno}: label {cells[-1]!r} is not an integer"
                )
            if label < 0:
                raise ParseError(f"{path}: line {lineno}: negative label")
            features.append(row)
            labels.append(label)
    if not features:
        raise ParseError(f"{path}: no data rows")
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    n = x.shape[0]
    perm = np.random.default_rng(seed).permutation(n)
    n_train = n - int(round(test_fraction * n))
    return Dataset(x, y, perm[:n_train], perm[n_train:])
