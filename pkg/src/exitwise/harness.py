"""Datasets, exit logs and policy evaluation.

Exit log text format, version 1::

    #exitlog v1 L=<int> C=<int>
    <sample_id>,<gold>,<p[1][0]>,...,<p[1][C-1]>,<p[2][0]>,...,<p[L][C-1]>

Probabilities are layer-major, class-minor, written with ``repr`` so a
dump/load round trip is exact.
"""

import csv
import os
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from sklearn.datasets import make_blobs, make_moons

from ._math import argmax_class
from .exceptions import DataFormatError, InvalidInputError
from .model import forward
from .strategies import ExitPolicy, decide, make_policy, parse_policy

SYNTHETIC_KINDS = ("gaussian_blobs", "two_moons", "concentric_rings")
THREADS_ENV = "EXITWISE_THREADS"


@dataclass
class Dataset:
    X: np.ndarray
    y: np.ndarray
    n_classes: int
    name: str = "dataset"

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.X.ndim != 2 or len(self.X) != len(self.y):
            raise InvalidInputError("X must be 2-D with one label per row")
        if len(self.y) and (self.y.min() < 0 or self.y.max() >= self.n_classes):
            raise InvalidInputError(f"labels must lie in [0, {self.n_classes})")

    def __len__(self):
        return len(self.y)

    def split(self, test_fraction=0.25, seed=0):
        """Deterministic shuffled train/test split."""
        order = np.random.default_rng(seed).permutation(len(self))
        cut = len(self) - int(round(test_fraction * len(self)))
        tr, te = order[:cut], order[cut:]
        return (
            Dataset(self.X[tr], self.y[tr], self.n_classes, self.name + ":train"),
            Dataset(self.X[te], self.y[te], self.n_classes, self.name + ":test"),
        )


def _balanced_counts(n, C):
    return [n // C + (1 if c < n % C else 0) for c in range(C)]


def gen_synthetic(kind, n, n_classes=2, noise=0.1, seed=0):
    """Generate a small labelled 2-D dataset.

    Parameters
    ----------
    kind : {"gaussian_blobs", "two_moons", "concentric_rings"}
    n : int
        Number of samples, at least ``n_classes``. Class counts differ by at most 1.
    noise : float
        Standard deviation of the Gaussian jitter.
    """
    if kind not in SYNTHETIC_KINDS:
        raise InvalidInputError(f"unknown synthetic dataset {kind!r}")
    if n_classes < 2 or n < n_classes:
        raise InvalidInputError("need n_classes >= 2 and n >= n_classes")
    if noise < 0:
        raise InvalidInputError("noise must be >= 0")
    rng = np.random.default_rng(seed)
    counts = _balanced_counts(n, n_classes)
    if kind == "two_moons":
        if n_classes != 2:
            raise InvalidInputError("two_moons is a two-class dataset")
        X, y = make_moons(n_samples=tuple(counts), shuffle=False)
        X = X + rng.normal(scale=noise, size=X.shape)
    elif kind == "gaussian_blobs":
        angles = 2 * np.pi * np.arange(n_classes) / n_classes
        centers = 3.0 * np.column_stack([np.cos(angles), np.sin(angles)])
        X, y = make_blobs(
            n_samples=counts, centers=centers, cluster_std=noise, shuffle=False,
            random_state=int(rng.integers(2**31 - 1)),
        )
    else:
        X = np.empty((n, 2))
        y = np.repeat(np.arange(n_classes), counts)
        theta = rng.uniform(0, 2 * np.pi, size=n)
        radius = 1.0 + y + rng.normal(scale=noise, size=n)
        X[:, 0] = radius * np.cos(theta)
        X[:, 1] = radius * np.sin(theta)
    order = rng.permutation(n)
    return Dataset(X[order], np.asarray(y)[order], n_classes, kind)


def parse_dataset_spec(spec, seed=0):
    """``two_moons:n=2000,noise=0.2`` (optionally ``C=3``) to a :class:`Dataset`."""
    kind, _, rest = spec.partition(":")
    opts = {"n": 1000, "C": 2, "noise": 0.1}
    for item in filter(None, rest.split(",")):
        key, sep, value = item.partition("=")
        if not sep or key not in opts:
            raise InvalidInputError(f"bad dataset option {item!r}; allowed: n, C, noise")
        opts[key] = float(value)
    return gen_synthetic(kind, int(opts["n"]), int(opts["C"]), opts["noise"], seed)


def load_csv_dataset(path):
    """Read ``label,feature_1,...,feature_d`` rows; the class count is max label + 1."""
    rows, labels = [], []
    width = None
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or all(not cell.strip() for cell in row):
                continue
            try:
                values = [float(cell) for cell in row]
            except ValueError:
                raise DataFormatError(f"{path}:{lineno}: non-numeric field") from None
            if len(values) < 2:
                raise DataFormatError(f"{path}:{lineno}: need a label and at least one feature")
            if width is None:
                width = len(values)
            elif len(values) != width:
                raise DataFormatError(f"{path}:{lineno}: expected {width} fields, found {len(values)}")
            label = values[0]
            if label != int(label) or label < 0:
                raise DataFormatError(f"{path}:{lineno}: label must be a non-negative integer")
            if not np.all(np.isfinite(values[1:])):
                raise DataFormatError(f"{path}:{lineno}: non-finite feature")
            labels.append(int(label))
            rows.append(values[1:])
    if not rows:
        raise DataFormatError(f"{path}: empty dataset")
    return Dataset(np.array(rows), np.array(labels), max(max(labels) + 1, 2), Path(path).stem)


def write_csv_dataset(dataset, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        for label, x in zip(dataset.y, dataset.X):
            w.writerow([int(label)] + [repr(float(v)) for v in x])


@dataclass
class LayerTrace:
    sample_id: int
    gold: int
    dists: np.ndarray  # (L, C), shallow to deep


@dataclass
class ExitLog:
    """All head distributions for a set of samples."""

    dists: np.ndarray  # (n, L, C)
    gold: np.ndarray
    sample_ids: np.ndarray = field(default=None)

    def __post_init__(self):
        self.dists = np.asarray(self.dists, dtype=np.float64)
        self.gold = np.asarray(self.gold, dtype=np.int64)
        if self.sample_ids is None:
            self.sample_ids = np.arange(len(self.gold))
        self.sample_ids = np.asarray(self.sample_ids, dtype=np.int64)

    @property
    def L(self):
        return self.dists.shape[1]

    @property
    def C(self):
        return self.dists.shape[2]

    def __len__(self):
        return len(self.gold)

    @property
    def traces(self):
        return [LayerTrace(int(s), int(g), d) for s, g, d in zip(self.sample_ids, self.gold, self.dists)]

    def layer_predictions(self):
        return argmax_class(self.dists)  # (n, L)


def collect_exitlog(model, dataset):
    if dataset.X.shape[1] != model.config.input_dim:
        raise InvalidInputError("dataset and model disagree on input_dim")
    return ExitLog(forward(model, dataset.X), dataset.y)


def dump_exitlog(model_or_log, dataset_or_path, path=None):
    """Write an exit log; accepts ``(model, dataset, path)`` or ``(log, path)``."""
    if path is None:
        log, path = model_or_log, dataset_or_path
    else:
        log = collect_exitlog(model_or_log, dataset_or_path)
    with open(path, "w") as fh:
        fh.write(f"#exitlog v1 L={log.L} C={log.C}\n")
        for sid, g, d in zip(log.sample_ids, log.gold, log.dists):
            fh.write(",".join([str(int(sid)), str(int(g))] + [repr(float(v)) for v in d.ravel()]) + "\n")
    return log


_HEADER = re.compile(r"#exitlog v(\d+) L=(\d+) C=(\d+)\s*$")


def load_exitlog(path, atol=1e-6):
    """Parse and validate an exit log file."""
    with open(path) as fh:
        header = fh.readline()
        m = _HEADER.match(header.strip())
        if not header.startswith("#exitlog") or m is None:
            raise DataFormatError(f"{path}:1: bad magic, expected '#exitlog v1 L=<int> C=<int>'")
        if m.group(1) != "1":
            raise DataFormatError(f"{path}:1: unsupported exitlog version {m.group(1)}")
        L, C = int(m.group(2)), int(m.group(3))
        if L < 1 or C < 2:
            raise DataFormatError(f"{path}:1: need L >= 1 and C >= 2")
        ids, gold, rows = [], [], []
        for lineno, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            cells = line.strip().split(",")
            if len(cells) != 2 + L * C:
                raise DataFormatError(f"{path}:{lineno}: expected {2 + L * C} columns, found {len(cells)}")
            try:
                sid, g = int(cells[0]), int(cells[1])
                probs = np.array([float(c) for c in cells[2:]]).reshape(L, C)
            except ValueError:
                raise DataFormatError(f"{path}:{lineno}: non-numeric field") from None
            if not 0 <= g < C:
                raise DataFormatError(f"{path}:{lineno}: gold label {g} outside [0, {C})")
            if not np.all(np.isfinite(probs)) or np.any(probs < 0):
                raise DataFormatError(f"{path}:{lineno}: probabilities must be finite and non-negative")
            sums = probs.sum(axis=1)
            bad = np.flatnonzero(np.abs(sums - 1.0) > atol)
            if bad.size:
                raise DataFormatError(
                    f"{path}:{lineno}: layer {bad[0] + 1} probabilities sum to {sums[bad[0]]:.6g}"
                )
            ids.append(sid)
            gold.append(g)
            rows.append(probs)
    dists = np.stack(rows) if rows else np.empty((0, L, C))
    return ExitLog(dists, np.array(gold, dtype=np.int64), np.array(ids, dtype=np.int64))


@dataclass
class SweepPoint:
    policy: ExitPolicy
    accuracy: float
    mean_exit_layer: float
    speedup: float
    exit_histogram: np.ndarray  # counts per layer 1..L
    correct_exit_histogram: np.ndarray
    n_samples: int = 0


def max_workers(requested=None):
    """Worker count, capped by the ``EXITWISE_THREADS`` environment variable."""
    n = requested or 1
    cap = os.environ.get(THREADS_ENV)
    if cap:
        try:
            n = min(n, max(1, int(cap)))
        except ValueError:
            raise InvalidInputError(f"{THREADS_ENV} must be an integer, got {cap!r}") from None
    return max(1, n)


def _tally(log, policy, lo, hi):
    L = log.L
    exits = np.zeros(L, dtype=np.int64)
    correct = np.zeros(L, dtype=np.int64)
    for n in range(lo, hi):
        out = decide(policy, log.dists[n], int(log.gold[n]))
        exits[out.exit_layer - 1] += 1
        if out.prediction == log.gold[n]:
            correct[out.exit_layer - 1] += 1
    return exits, correct


def evaluate(log, policy, n_jobs=None):
    """Accuracy, mean exit layer and speed-up of ``policy`` over ``log``.

    Speed-up is ``L / mean exit layer``. Results do not depend on ``n_jobs``.
    """
    if isinstance(policy, str):
        policy = parse_policy(policy)
    n = len(log)
    if n == 0:
        raise InvalidInputError("cannot evaluate an empty exit log")
    workers = min(max_workers(n_jobs), n)
    bounds = np.linspace(0, n, workers + 1).astype(int)
    if workers == 1:
        parts = [_tally(log, policy, 0, n)]
    else:
        with ThreadPoolExecutor(workers) as pool:
            parts = list(pool.map(lambda b: _tally(log, policy, *b), zip(bounds[:-1], bounds[1:])))
    exits = sum(p[0] for p in parts)
    correct = sum(p[1] for p in parts)
    mean_layer = float(exits @ np.arange(1, log.L + 1)) / n
    return SweepPoint(
        policy=policy,
        accuracy=float(correct.sum()) / n,
        mean_exit_layer=mean_layer,
        speedup=log.L / mean_layer,
        exit_histogram=exits,
        correct_exit_histogram=correct,
        n_samples=n,
    )


_GRID_PARAM = {"voting": "delta", "patience": "s", "entropy": "t", "maxprob": "t"}


def sweep(log, kind, grid, n_jobs=None, **fixed):
    """Evaluate ``kind`` once per grid value, sorted by speed-up.

    ``grid`` holds values of the kind's main knob (``delta``, ``s`` or ``t``);
    remaining parameters come from ``fixed`` (e.g. ``k=0.5`` for voting).
    """
    grid = list(grid)
    if not grid:
        raise InvalidInputError("sweep grid is empty")
    if kind not in _GRID_PARAM:
        raise InvalidInputError(f"cannot sweep policy kind {kind!r}")
    name = _GRID_PARAM[kind]
    points = [evaluate(log, make_policy(kind, **{**fixed, name: v}), n_jobs) for v in grid]
    return sorted(points, key=lambda p: p.speedup)


def compare_policies(log, policies, n_jobs=None):
    """One :class:`SweepPoint` per policy, with an oracle row appended if absent."""
    if len(log) == 0:
        raise InvalidInputError("cannot compare policies on an empty exit log")
    policies = list(policies)
    if not policies:
        raise InvalidInputError("need at least one policy")
    if not any(p.kind == "oracle" for p in policies):
        policies.append(ExitPolicy("oracle"))
    return [evaluate(log, p, n_jobs) for p in policies]


REPORT_HEADER = ["policy", "params", "accuracy", "speedup", "mean_exit_layer"]


def _params_cell(policy):
    if policy.kind == "hybrid":
        return "+".join(str(p) for p in policy.inner)
    return ";".join(f"{k}={v!r}" for k, v in policy.params.items())


def write_report_csv(points, path_or_file):
    """Columns: policy, params, accuracy, speedup, mean_exit_layer."""
    if hasattr(path_or_file, "write"):
        _write_report(points, path_or_file)
    else:
        with open(path_or_file, "w", newline="") as fh:
            _write_report(points, fh)


def _write_report(points, fh):
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(REPORT_HEADER)
    for p in points:
        w.writerow([p.policy.kind, _params_cell(p.policy), repr(p.accuracy), repr(p.speedup), repr(p.mean_exit_layer)])


def write_histogram_csv(points, path):
    """Per-layer exit counts: ``policy,layer,exits,correct_exits``."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["policy", "layer", "exits", "correct_exits"])
        for p in points:
            for l, (e, c) in enumerate(zip(p.exit_histogram, p.correct_exit_histogram), start=1):
                w.writerow([str(p.policy), l, int(e), int(c)])


def layer_accuracies(log):
    """Accuracy of every head on its own."""
    return (log.layer_predictions() == log.gold[:, None]).mean(axis=0)


def pairwise_disagreement(log):
    """Mean over samples and head pairs ``i < j`` of ``argmax_i != argmax_j``."""
    preds = log.layer_predictions()
    L = preds.shape[1]
    iu, ju = np.triu_indices(L, k=1)
    return float((preds[:, iu] != preds[:, ju]).mean())


def oracle_accuracy(log):
    return float((log.layer_predictions() == log.gold[:, None]).any(axis=1).mean())
