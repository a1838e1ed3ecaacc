"""Shared domain types, deterministic randomness, and dense-vector arithmetic.

Parameter vectors are plain 1-D float64 numpy arrays (aliased ``ModelParams``).
A wrapper class would tax every arithmetic site for no gain; invariants that a
wrapper would carry (fixed dimension, finite entries) are instead enforced at
operation boundaries with :func:`ensure_finite` and explicit dimension checks.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

ModelParams = np.ndarray


class ConfigError(ValueError):
    """Invalid configuration; maps to CLI exit code 1."""


class ProtocolError(RuntimeError):
    """Protocol-level failure (no participants, empty aggregation, ...)."""


class NumericFault(ArithmeticError):
    """Non-finite value produced during training; aborts the run."""


def new_params(dim: int) -> ModelParams:
    if dim <= 0:
        raise ConfigError(f"model dimension must be positive, got {dim}")
    return np.zeros(dim, dtype=np.float64)


def as_params(values) -> ModelParams:
    vec = np.asarray(values, dtype=np.float64)
    if vec.ndim != 1:
        raise ConfigError(f"parameter vector must be 1-D, got shape {vec.shape}")
    return vec


def ensure_finite(vec: np.ndarray, context: str) -> None:
    """Abort with a diagnostic if any entry is NaN or infinite."""
    if not np.all(np.isfinite(vec)):
        bad = int(np.flatnonzero(~np.isfinite(np.ravel(vec)))[0])
        raise NumericFault(f"non-finite value in {context} (first at index {bad})")


def vec_axpy(a: float, x: ModelParams, y: ModelParams) -> ModelParams:
    """Return a*x + y without modifying the inputs."""
    if x.shape != y.shape:
        raise ConfigError(f"dimension mismatch in vec_axpy: {x.shape} vs {y.shape}")
    return a * x + y


def vec_mean(vs: list[ModelParams]) -> ModelParams:
    """Elementwise mean. Callers pass vectors in ascending device id so the
    floating-point summation order is pinned and results are bit-reproducible.
    """
    if not vs:
        raise ProtocolError("vec_mean of an empty list (no participants uploaded)")
    dim = vs[0].shape
    for v in vs[1:]:
        if v.shape != dim:
            raise ConfigError(f"dimension mismatch in vec_mean: {dim} vs {v.shape}")
    acc = vs[0].copy()
    for v in vs[1:]:
        acc += v
    return acc / len(vs)


@dataclass
class UpdateRecord:
    """Accumulated scaled gradient m_n^r (same units as parameters)."""

    delta: ModelParams
    round: int
    iterations: int

    @classmethod
    def zero(cls, dim: int, round: int = 0) -> "UpdateRecord":
        return cls(delta=np.zeros(dim, dtype=np.float64), round=round, iterations=0)


@dataclass(frozen=True)
class DeviceProfile:
    """Static per-device capabilities."""

    id: int
    t_cp: float  # seconds per local training iteration
    rate: float  # uplink bytes/second
    model_bytes: float  # serialized model size D_n
    mem_capacity: float  # bytes
    shard_id: int = -1

    def __post_init__(self):
        for name in ("t_cp", "rate", "model_bytes", "mem_capacity"):
            if not getattr(self, name) > 0:
                raise ConfigError(
                    f"device {self.id}: {name} must be positive, "
                    f"got {getattr(self, name)}"
                )

    @property
    def t_comm(self) -> float:
        return self.model_bytes / self.rate


@dataclass
class DeviceState:
    """Evolving per-device protocol state.

    ``pending_updates`` holds completed K-iteration blocks that have been
    computed ahead but not yet uploaded (overlap protocols), or uploaded but
    not yet corrected (DGA). ``partial_delta``/``partial_iters`` hold the tail
    of an overlap phase that has not yet filled a whole block.
    """

    local_model: ModelParams
    pending_updates: list[UpdateRecord] = field(default_factory=list)
    staleness_prev: int = 0
    overlooked_rounds: int = 0
    last_losses: np.ndarray | None = None
    last_upload: UpdateRecord | None = None
    partial_delta: ModelParams | None = None
    partial_iters: int = 0
    overflowed: bool = False
    # Server-side bookkeeping: cumulative global update the device had folded
    # in at its last correction (None == the initial model).  Lives here for
    # convenience but is maintained by the server, not the device.
    basis_seen: ModelParams | None = None

    @property
    def ahead_iterations(self) -> int:
        """Iterations computed past the last uploaded block."""
        k_blocks = sum(u.iterations for u in self.pending_updates)
        return k_blocks + self.partial_iters


class RngStream:
    """Deterministic substream keyed by (seed, label).

    The underlying generator is seeded by a hash of the label, so streams are
    independent of each other and of the order in which they are created:
    adding a new stream never shifts draws from existing streams, and
    identical (seed, label, call sequence) yields identical output on every
    platform.
    """

    def __init__(self, seed: int, label: str):
        self.seed = int(seed)
        self.label = label
        digest = hashlib.sha256(f"{self.seed}:{label}".encode()).digest()
        self.gen = np.random.default_rng(int.from_bytes(digest[:8], "big"))

    def substream(self, label: str) -> "RngStream":
        return RngStream(self.seed, f"{self.label}/{label}")

    def __repr__(self):
        return f"RngStream(seed={self.seed}, label={self.label!r})"
