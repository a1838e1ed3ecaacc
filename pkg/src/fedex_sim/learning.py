"""Desk-scale learning tasks with exact gradients, non-iid partitioning,
local SGD, statistical utility, feature extraction, and linear CKA.

Datasets and shards are struct-of-arrays (feature matrix + label vector);
``LabeledSample`` exists only at the CSV ingestion boundary. Gradient kernels
come from the selected backend (compiled extension or numpy fallback).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from ._backend import kernels
from .core import (
    ConfigError,
    ModelParams,
    ProtocolError,
    RngStream,
    UpdateRecord,
    ensure_finite,
)

TASK_KINDS = ("logistic", "mlp", "quadratic")


class LabeledSample(NamedTuple):
    features: np.ndarray
    label: int


@dataclass
class Shard:
    """One device's slice of the training data."""

    X: np.ndarray
    y: np.ndarray
    owner: int = -1

    def __post_init__(self):
        if len(self.X) != len(self.y):
            raise ConfigError("shard features and labels differ in length")
        if len(self.y) == 0:
            raise ConfigError(f"empty shard for device {self.owner}")

    @property
    def n(self) -> int:
        return len(self.y)


@dataclass(frozen=True)
class LearningTask:
    kind: str
    input_dim: int = 20
    num_classes: int = 10
    hidden_dim: int = 16
    l2_reg: float = 0.0

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise ConfigError(f"unknown task kind {self.kind!r}; one of {TASK_KINDS}")
        if self.input_dim < 1 or self.num_classes < 1:
            raise ConfigError("input_dim and num_classes must be >= 1")
        if self.kind == "mlp" and self.hidden_dim < 1:
            raise ConfigError("hidden_dim must be >= 1 for the mlp task")
        if self.l2_reg < 0:
            raise ConfigError("l2_reg must be nonnegative")

    @property
    def param_dim(self) -> int:
        if self.kind == "logistic":
            return (self.input_dim + 1) * self.num_classes
        if self.kind == "mlp":
            return (
                self.input_dim * self.hidden_dim
                + self.hidden_dim
                + self.hidden_dim * self.num_classes
                + self.num_classes
            )
        return self.input_dim

    def init_params(self, rng: RngStream) -> ModelParams:
        """Initial global model. The mlp needs random weights to break hidden
        symmetry; the convex tasks start at zero."""
        if self.kind != "mlp":
            return np.zeros(self.param_dim, dtype=np.float64)
        w = np.zeros(self.param_dim, dtype=np.float64)
        p, h, c = self.input_dim, self.hidden_dim, self.num_classes
        w[: p * h] = rng.gen.normal(0.0, 1.0 / np.sqrt(p), size=p * h)
        o = p * h + h
        w[o : o + h * c] = rng.gen.normal(0.0, 1.0 / np.sqrt(h), size=h * c)
        return w

    def logits(self, model: ModelParams, X: np.ndarray) -> np.ndarray:
        """Pre-softmax outputs, one row per sample."""
        p, c = self.input_dim, self.num_classes
        if self.kind == "logistic":
            W = model[: p * c].reshape(p, c)
            return X @ W + model[p * c :]
        if self.kind == "mlp":
            h = self.hidden_dim
            o = 0
            W1 = model[o : o + p * h].reshape(p, h)
            o += p * h
            b1 = model[o : o + h]
            o += h
            W2 = model[o : o + h * c].reshape(h, c)
            o += h * c
            return np.tanh(X @ W1 + b1) @ W2 + model[o:]
        # quadratic: the model has no per-sample response; expose the first C
        # coordinates as a constant logit row so downstream shape contracts hold
        row = np.zeros(c, dtype=np.float64)
        row[: min(c, model.shape[0])] = model[: min(c, model.shape[0])]
        return np.tile(row, (len(X), 1))


def loss_and_grad(task: LearningTask, model: ModelParams, X: np.ndarray, y: np.ndarray):
    """Mean loss (cross-entropy, or ||w||^2/2 for quadratic) plus the l2 term,
    its exact gradient, and the per-sample losses (regularizer excluded)."""
    if len(X) == 0:
        raise ConfigError("loss_and_grad on an empty batch")
    if task.kind == "logistic":
        out = kernels.logistic_loss_grad(model, X, y, task.num_classes, task.l2_reg)
    elif task.kind == "mlp":
        out = kernels.mlp_loss_grad(
            model, X, y, task.num_classes, task.hidden_dim, task.l2_reg
        )
    else:
        out = kernels.quadratic_loss_grad(model, len(X), task.l2_reg)
    loss, grad, per_sample = out
    if not np.isfinite(loss):
        raise ProtocolError(f"non-finite loss {loss} on task {task.kind}")
    return float(loss), np.asarray(grad), np.asarray(per_sample)


def local_sgd(
    task: LearningTask,
    model: ModelParams,
    shard: Shard,
    iters: int,
    eta: float,
    batch_size: int,
    rng: RngStream,
    round_no: int = 0,
) -> tuple[ModelParams, UpdateRecord]:
    """Run ``iters`` minibatch gradient steps from ``model``.

    Minibatches are with-replacement uniform; a batch_size at or above the
    shard size uses the whole shard deterministically (no rng draws). The
    returned model is computed as model - delta so the algebraic identity
    new_model == model - update.delta holds bit-exactly.
    """
    if iters < 0:
        raise ConfigError(f"iters must be nonnegative, got {iters}")
    if eta <= 0:
        raise ConfigError(f"eta must be positive, got {eta}")
    delta = np.zeros_like(model)
    w = model - delta
    full_batch = batch_size >= shard.n
    for _ in range(iters):
        if full_batch:
            bx, by = shard.X, shard.y
        else:
            idx = rng.gen.integers(0, shard.n, size=batch_size)
            bx, by = shard.X[idx], shard.y[idx]
        _, grad, _ = loss_and_grad(task, w, bx, by)
        delta += eta * grad
        w = model - delta
        ensure_finite(w, f"local model (device shard {shard.owner})")
    return w, UpdateRecord(delta=delta, round=round_no, iterations=iters)


def statistical_utility(per_sample_losses) -> float:
    """|B| * sqrt(mean of squared per-sample losses)."""
    losses = np.asarray(per_sample_losses, dtype=np.float64)
    if losses.size == 0:
        raise ProtocolError("statistical utility of a device with no loss record")
    if np.any(losses < 0):
        raise ConfigError("per-sample losses must be nonnegative")
    return float(losses.size * np.sqrt(np.mean(losses * losses)))


def per_sample_losses(
    task: LearningTask, model: ModelParams, X: np.ndarray, y: np.ndarray
) -> np.ndarray:
    return loss_and_grad(task, model, X, y)[2]


def extract_features(task: LearningTask, model: ModelParams, probe_X: np.ndarray):
    """Feature matrix for similarity checks: rows are pre-softmax outputs on
    the fixed probe set."""
    if len(probe_X) == 0:
        raise ConfigError("probe set must be nonempty")
    return task.logits(model, probe_X)


def linear_cka(X: np.ndarray, Y: np.ndarray) -> float:
    """Linear centered kernel alignment between two feature matrices.

    Columns are centered, then ||Y'X||_F^2 / (||X'X||_F ||Y'Y||_F). Zero when
    either centered matrix vanishes (e.g. features of an all-zero model).
    """
    if X.shape[0] != Y.shape[0]:
        raise ConfigError(f"row-count mismatch in linear_cka: {X.shape} vs {Y.shape}")
    if X.shape[0] < 2:
        raise ConfigError("linear_cka needs at least 2 rows")
    Xc = X - X.mean(axis=0)
    Yc = Y - Y.mean(axis=0)
    xx = np.linalg.norm(Xc.T @ Xc)
    yy = np.linalg.norm(Yc.T @ Yc)
    if xx == 0.0 or yy == 0.0:
        return 0.0
    xy = np.linalg.norm(Yc.T @ Xc) ** 2
    # Cauchy-Schwarz bounds the true value by 1; clip float dust only
    return float(min(max(xy / (xx * yy), 0.0), 1.0))


def evaluate(
    task: LearningTask, model: ModelParams, X: np.ndarray, y: np.ndarray
) -> tuple[float, float]:
    """Accuracy (argmax-correct fraction) and mean per-sample loss."""
    if len(X) == 0:
        raise ConfigError("evaluate on an empty test set")
    if task.kind == "quadratic":
        losses = per_sample_losses(task, model, X, y)
    else:
        z = task.logits(model, X)
        z = z - z.max(axis=1, keepdims=True)
        logsum = np.log(np.exp(z).sum(axis=1))
        losses = logsum - z[np.arange(len(y)), y]
    preds = np.argmax(task.logits(model, X), axis=1)
    return float(np.mean(preds == y)), float(np.mean(losses))


def make_blobs(
    input_dim: int,
    num_classes: int,
    n_samples: int,
    rng: RngStream,
    center_scale: float = 2.0,
) -> tuple[np.ndarray, np.ndarray]:
    """Gaussian blob classification data with balanced classes."""
    if n_samples < num_classes:
        raise ConfigError("need at least one sample per class")
    centers = rng.gen.normal(size=(num_classes, input_dim)) * center_scale
    base = np.arange(n_samples) % num_classes
    y = rng.gen.permutation(base).astype(np.int64)
    X = centers[y] + rng.gen.normal(size=(n_samples, input_dim))
    return np.ascontiguousarray(X), y


def load_csv_dataset(path) -> tuple[np.ndarray, np.ndarray]:
    """Read `label,f0,f1,...` rows into (X, y)."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header[:1]] != ["label"]:
            raise ConfigError(f"{path}: expected header starting with 'label'")
        rows = [row for row in reader if row]
    if not rows:
        raise ConfigError(f"{path}: no data rows")
    width = len(rows[0])
    feats, labels = [], []
    for i, row in enumerate(rows):
        if len(row) != width:
            raise ConfigError(f"{path}: row {i + 2} has {len(row)} fields, expected {width}")
        labels.append(int(row[0]))
        feats.append([float(v) for v in row[1:]])
    y = np.asarray(labels, dtype=np.int64)
    if np.any(y < 0):
        raise ConfigError(f"{path}: labels must be nonnegative")
    return np.asarray(feats, dtype=np.float64), y


def samples_to_arrays(samples: list[LabeledSample]) -> tuple[np.ndarray, np.ndarray]:
    X = np.asarray([s.features for s in samples], dtype=np.float64)
    y = np.asarray([s.label for s in samples], dtype=np.int64)
    return X, y


def partition_noniid(
    X: np.ndarray,
    y: np.ndarray,
    n_devices: int,
    lam: float,
    rng: RngStream,
) -> list[Shard]:
    """Label-skewed partition: each device gets a round(lam * size) chunk of a
    dominant label (assigned round-robin over device ids) and the rest drawn
    uniformly from the other labels. lam=0 is a plain uniform split; lam=1
    gives disjoint single-label shards. Every input sample is used exactly
    once.
    """
    if not 0.0 <= lam <= 1.0:
        raise ConfigError(f"lambda must lie in [0,1], got {lam}")
    if n_devices < 1:
        raise ConfigError("n_devices must be >= 1")
    m = len(y)
    if m < n_devices:
        raise ConfigError(f"dataset of {m} samples cannot cover {n_devices} devices")
    classes = np.unique(y)
    sizes = [m // n_devices + (1 if i < m % n_devices else 0) for i in range(n_devices)]
    dominant = [int(classes[i % len(classes)]) for i in range(n_devices)]

    pools: dict[int, list[int]] = {
        int(c): list(rng.gen.permutation(np.flatnonzero(y == c))) for c in classes
    }
    picks: list[list[int]] = [[] for _ in range(n_devices)]
    dom_counts = [int(round(lam * s)) if lam > 0 else 0 for s in sizes]

    if lam > 0:
        for i in range(n_devices):
            pool = pools[dominant[i]]
            if len(pool) < dom_counts[i]:
                raise ConfigError(
                    f"not enough samples of class {dominant[i]} for device {i}: "
                    f"need {dom_counts[i]}, have {len(pool)}"
                )
            picks[i] = [pool.pop() for _ in range(dom_counts[i])]

    # Fill the remainder uniformly from the leftover pools, excluding each
    # device's own dominant label when lam > 0 ("the remaining belong to other
    # labels"). Draws are uniform over the allowed leftover samples.
    for i in range(n_devices):
        need = sizes[i] - len(picks[i])
        for _ in range(need):
            allowed = [
                c for c, pool in pools.items() if pool and (lam == 0 or c != dominant[i])
            ]
            if not allowed:
                _repair_fill(picks, pools, y, i, dominant, dom_counts)
                continue
            weights = np.array([len(pools[c]) for c in allowed], dtype=np.float64)
            c = allowed[int(rng.gen.choice(len(allowed), p=weights / weights.sum()))]
            picks[i].append(pools[c].pop())

    shards = []
    for i in range(n_devices):
        idx = np.asarray(sorted(picks[i]), dtype=np.intp)
        shards.append(Shard(X=np.ascontiguousarray(X[idx]), y=y[idx].copy(), owner=i))
    return shards


def _repair_fill(picks, pools, y, i, dominant, dom_counts):
    """Only the dominant class of device i remains in the pools: hand one of
    those samples to an already-filled device that accepts the class and take
    one of its fillers in exchange. The filler taken must not itself carry
    device i's dominant label."""
    heldover = pools[dominant[i]]
    for j in range(i):
        if dominant[j] == dominant[i]:
            continue
        for k in range(len(picks[j]) - 1, dom_counts[j] - 1, -1):
            if int(y[picks[j][k]]) == dominant[i]:
                continue
            picks[i].append(picks[j][k])
            picks[j][k] = heldover.pop()
            return
    raise ConfigError(
        f"cannot satisfy non-iid constraints: only class {dominant[i]} remains"
    )
