"""Dataset carriers, CSV ingestion, and synthetic task generators.

Inputs are always signed 8-bit integer vectors. Regression targets live in
the same integer units as the network's 8-bit outputs; classification
targets are class indices. Float features loaded from CSV are quantized
symmetrically and the scale is recorded.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace

import numpy as np

from .qmodel import (
    ACC_WIDTH_FLOOR,
    QLayer,
    QuantizedMLP,
    bits_needed_signed,
    derive_requant_params,
    infer_reference_batch,
)

SPLIT_CODES = {"train": 0, "val": 1, "test": 2}


@dataclass(frozen=True)
class Dataset:
    inputs: np.ndarray  # int32 [n, d] in [-128, 127]
    targets: np.ndarray  # [n] class ids or [n, k] integer regression targets
    task: str  # "classification" | "regression"
    split: np.ndarray  # [n] codes: 0 train, 1 val, 2 test
    input_scale: float = 1.0

    def __post_init__(self):
        if self.inputs.ndim != 2:
            raise ValueError("inputs must be [n, d]")
        if self.inputs.min(initial=0) < -128 or self.inputs.max(initial=0) > 127:
            raise ValueError("inputs outside int8 range")
        if self.task not in ("classification", "regression"):
            raise ValueError(f"unknown task {self.task!r}")
        if len(self.targets) != len(self.inputs) or len(self.split) != len(self.inputs):
            raise ValueError("inputs/targets/split length mismatch")

    def __len__(self) -> int:
        return len(self.inputs)

    @property
    def n_features(self) -> int:
        return self.inputs.shape[1]

    @property
    def n_outputs(self) -> int:
        if self.task == "regression":
            return self.targets.shape[1]
        return int(self.targets.max()) + 1

    def subset(self, which: str) -> "Dataset":
        sel = self.split == SPLIT_CODES[which]
        return replace(
            self,
            inputs=self.inputs[sel],
            targets=self.targets[sel],
            split=self.split[sel],
        )


def assign_splits(n: int, seed: int, fractions=(0.7, 0.15, 0.15)) -> np.ndarray:
    rng = np.random.default_rng(seed)
    order = rng.permutation(n)
    split = np.zeros(n, dtype=np.int64)
    n_train = int(n * fractions[0])
    n_val = int(n * fractions[1])
    split[order[n_train : n_train + n_val]] = 1
    split[order[n_train + n_val :]] = 2
    return split


# ---------------------------------------------------------------------------
# Synthetic tasks


def make_separable(n: int, dim: int, seed: int = 0) -> Dataset:
    """Two linearly separable classes with a known separating hyperplane."""
    rng = np.random.default_rng(seed)
    x = rng.integers(-128, 128, size=(n, dim), dtype=np.int64)
    plane = rng.integers(-8, 9, size=dim, dtype=np.int64)
    while not plane.any():
        plane = rng.integers(-8, 9, size=dim, dtype=np.int64)
    margin = 48 * np.sqrt(dim)
    score = x @ plane
    keep = np.abs(score) >= margin  # drop points hugging the boundary
    x, score = x[keep], score[keep]
    y = (score >= 0).astype(np.int64)
    return Dataset(
        inputs=x.astype(np.int32),
        targets=y,
        task="classification",
        split=assign_splits(len(x), seed + 1),
    )


def random_model(
    arch,
    seed: int = 0,
    weight_choices=None,
    sparsity: float = 0.0,
    name: str = "random",
) -> QuantizedMLP:
    """Random quantized MLP with calibrated requantizers.

    `arch` lists all widths, inputs first (e.g. (8, 16, 4)). Requant
    scales are calibrated on a probe batch so activations stay in a
    useful range instead of saturating or collapsing to zero.
    """
    rng = np.random.default_rng(seed)
    arch = list(arch)
    layers = []
    probe = rng.integers(-128, 128, size=(512, arch[0]), dtype=np.int64)
    act = probe
    for li in range(len(arch) - 1):
        n_in, n_out = arch[li], arch[li + 1]
        if weight_choices is not None:
            choices = np.array(sorted(weight_choices), dtype=np.int64)
            w = rng.choice(choices, size=(n_out, n_in))
        else:
            w = rng.integers(-128, 128, size=(n_out, n_in), dtype=np.int64)
        if sparsity > 0:
            drop = rng.random(size=w.shape) < sparsity
            w = np.where(drop, 0, w)
        acc = act @ w.T
        last = li == len(arch) - 2
        peak = np.percentile(np.abs(acc), 99.0, axis=0)
        peak = np.maximum(peak, 1.0)
        requant = []
        for j in range(n_out):
            scale = min(100.0 / float(peak[j]), 0.5)
            requant.append(derive_requant_params(max(scale, 2.0**-16)))
        layer = QLayer(
            weights=tuple(tuple(int(v) for v in row) for row in w),
            acc_widths=tuple(_worst_width(w[j]) for j in range(n_out)),
            requant=tuple(requant),
            activation="none" if last else "relu",
        )
        layers.append(layer)
        m = np.array([p.m for p in requant], dtype=np.int64)
        s = np.array([p.s for p in requant], dtype=np.int64)
        rounding = np.where(s > 0, np.int64(1) << np.maximum(s - 1, 0), 0)
        nxt = (np.maximum(acc, 0) if not last else acc)
        act = np.clip((nxt * m + rounding) >> s, -128, 127)
    return QuantizedMLP(layers=tuple(layers), name=name)


def _worst_width(row) -> int:
    lo = hi = 0
    for w in row:
        w = int(w)
        if w >= 0:
            lo, hi = lo - 128 * w, hi + 127 * w
        else:
            lo, hi = lo + 127 * w, hi - 128 * w
    return max(bits_needed_signed(lo), bits_needed_signed(hi), ACC_WIDTH_FLOOR)


def make_teacher_dataset(
    arch,
    n: int,
    seed: int = 0,
    weight_choices=None,
    task: str = "classification",
    sparsity: float = 0.0,
):
    """Dataset labeled by a planted random network; returns (teacher, data).

    With a restricted weight_choices (e.g. powers of two) the task is
    solvable exactly inside that weight set.
    """
    teacher = random_model(
        arch, seed=seed, weight_choices=weight_choices, sparsity=sparsity, name="teacher"
    )
    rng = np.random.default_rng(seed + 17)
    x = rng.integers(-128, 128, size=(n, arch[0]), dtype=np.int64)
    y = infer_reference_batch(teacher, x)
    if task == "classification":
        targets = (
            (y[:, 0] >= 0).astype(np.int64) if y.shape[1] == 1 else np.argmax(y, axis=1)
        )
    else:
        targets = y.astype(np.int64)
    data = Dataset(
        inputs=x.astype(np.int32),
        targets=targets,
        task=task,
        split=assign_splits(n, seed + 23),
    )
    return teacher, data


# ---------------------------------------------------------------------------
# CSV interchange: header row, integer feature columns, final target column


def save_csv(data: Dataset, path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow([f"f{i}" for i in range(data.n_features)] + ["target"])
        targets = data.targets
        for i in range(len(data)):
            t = targets[i]
            tval = int(t) if np.ndim(t) == 0 else ";".join(str(int(v)) for v in t)
            writer.writerow([int(v) for v in data.inputs[i]] + [tval])


def load_csv(path, task: str = "classification", seed: int = 0) -> Dataset:
    rows = []
    targets = []
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader)
        if not header:
            raise ValueError("empty CSV")
        for line in reader:
            if not line:
                continue
            rows.append([float(v) for v in line[:-1]])
            targets.append(line[-1])
    if not rows:
        raise ValueError("CSV has no data rows")
    x = np.array(rows, dtype=np.float64)
    scale = 1.0
    if not np.all(x == np.rint(x)) or x.min() < -128 or x.max() > 127:
        scale = max(np.abs(x).max() / 127.0, 1e-12)
        x = np.rint(x / scale)
    x = np.clip(x, -128, 127).astype(np.int32)
    if task == "regression" or ";" in targets[0]:
        t = np.array(
            [[int(v) for v in t.split(";")] for t in targets], dtype=np.int64
        )
        task = "regression"
    else:
        t = np.array([int(float(v)) for v in targets], dtype=np.int64)
    return Dataset(
        inputs=x,
        targets=t,
        task=task,
        split=assign_splits(len(x), seed),
        input_scale=scale,
    )
