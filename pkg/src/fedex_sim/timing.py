"""Virtual-time machinery: per-round phase latencies, the staleness ceiling,
collision and memory laws, and a deterministic discrete-event engine for
synchronous rounds.

All times are seconds of simulated wall clock. Nothing here reads a real
clock; identical inputs give identical timings on every run.
"""

from __future__ import annotations

import heapq
import itertools
import math
from dataclasses import dataclass, field
from enum import IntEnum

from .core import ConfigError, DeviceProfile, ProtocolError


# ---- closed-form laws -------------------------------------------------------


@dataclass(frozen=True)
class PhaseTimings:
    """One selected device's round breakdown: compute-then-upload."""

    device: int
    classical_s: float
    comm_s: float

    @property
    def total_s(self) -> float:
        return self.classical_s + self.comm_s


def phase_latency(profile: DeviceProfile, K: int, S_prev: int) -> PhaseTimings:
    """Compute and upload durations for a device entering a round with
    S_prev iterations already banked. Only the unbanked remainder of the
    K-iteration block is computed before the upload starts."""
    if K < 1:
        raise ConfigError(f"K must be >= 1, got {K}")
    if S_prev < 0:
        raise ConfigError(f"S_prev must be nonnegative, got {S_prev}")
    fresh = max(0, K - S_prev)
    return PhaseTimings(
        device=profile.id,
        classical_s=fresh * profile.t_cp,
        comm_s=profile.t_comm,
    )


def round_latency(selected: list[PhaseTimings]) -> float:
    """Barrier position: the slowest selected device's compute+upload time."""
    if not selected:
        raise ProtocolError("round latency of an empty selection")
    return max(p.total_s for p in selected)


def iterations_before(window_s: float, t_cp: float) -> int:
    """Count local iterations a device can *start* strictly before the window
    closes, launching at times 0, t_cp, 2*t_cp, ... A started iteration runs
    to completion, so this is also the number banked when the window closes.

    Exact under float semantics: the ceil estimate is corrected so that the
    result c satisfies (c-1)*t_cp < window_s <= c*t_cp as computed.
    """
    if t_cp <= 0:
        raise ConfigError(f"t_cp must be positive, got {t_cp}")
    if window_s <= 0:
        return 0
    c = math.ceil(window_s / t_cp)
    while c > 0 and (c - 1) * t_cp >= window_s:
        c -= 1
    while c * t_cp < window_s:
        c += 1
    return c


def staleness_ceiling(t_comm: float, t_wait: float, t_cp: float, U: int) -> int:
    """Iterations a device banks while its upload and the straggler wait are
    in flight, hard-capped at U."""
    if t_comm < 0 or t_wait < 0:
        raise ConfigError("t_comm and t_wait must be nonnegative")
    if U < 0:
        raise ConfigError(f"ceiling U must be nonnegative, got {U}")
    return min(iterations_before(t_comm + t_wait, t_cp), U)


def collision_predicate(profile: DeviceProfile, K: int) -> bool:
    """True when a block upload outlives the computation of the next block,
    so back-to-back transmissions queue up on the uplink."""
    if K < 1:
        raise ConfigError(f"K must be >= 1, got {K}")
    return profile.t_comm > K * profile.t_cp


def staleness_decompose(S: int, K: int) -> tuple[int, int]:
    """Split banked work into (full K-blocks, leftover iterations)."""
    if K < 1:
        raise ConfigError(f"K must be >= 1, got {K}")
    if S < 0:
        raise ConfigError(f"S must be nonnegative, got {S}")
    return S // K, S % K


def memory_usage(S: int, K: int, model_bytes: float) -> float:
    """Device-side footprint of banked state: one delta buffer per (possibly
    partial) K-block plus the working model copy."""
    if model_bytes <= 0:
        raise ConfigError(f"model_bytes must be positive, got {model_bytes}")
    blocks, rem = staleness_decompose(S, K)
    stored = blocks + (1 if rem else 0)
    return (stored + 1) * model_bytes


# ---- event queue ------------------------------------------------------------


class QueueEmpty(ProtocolError):
    pass


class EventKind(IntEnum):
    # Numeric order is the tie-break at equal timestamps: an upload that lands
    # at the same instant an iteration finishes is processed first, and the
    # barrier check always runs last.
    TX_DONE = 0
    ITER_DONE = 1
    TX_START = 2
    BARRIER = 3


@dataclass
class SimEvent:
    time: float
    kind: EventKind
    device: int
    payload: object = None
    seq: int = -1  # stamped by the queue; FIFO among exact ties


class EventQueue:
    """Min-heap of SimEvents ordered by (time, kind, device, insertion)."""

    def __init__(self):
        self._heap: list[tuple[tuple, SimEvent]] = []
        self._counter = itertools.count()

    def push(self, event: SimEvent) -> None:
        if event.time < 0 or not math.isfinite(event.time):
            raise ConfigError(f"event time must be finite and nonnegative: {event.time}")
        event.seq = next(self._counter)
        key = (event.time, int(event.kind), event.device, event.seq)
        heapq.heappush(self._heap, (key, event))

    def pop(self) -> SimEvent:
        if not self._heap:
            raise QueueEmpty("pop from an empty event queue")
        return heapq.heappop(self._heap)[1]

    def __len__(self) -> int:
        return len(self._heap)

    def __bool__(self) -> bool:
        return bool(self._heap)


# ---- synchronous round engine ------------------------------------------------


@dataclass(frozen=True)
class DevicePlan:
    """Input to the sync engine: what one device does this round."""

    device: int
    t_cp: float
    t_comm: float
    classical_iters: int


@dataclass
class SyncRoundTiming:
    barrier_s: float
    classical_end: dict[int, float] = field(default_factory=dict)
    tx_done: dict[int, float] = field(default_factory=dict)
    events_processed: int = 0

    def overlap_window(self, device: int) -> float:
        """Time between a device finishing its fresh compute and the barrier:
        its own upload plus the straggler wait."""
        return self.barrier_s - self.classical_end[device]

    def wait_s(self, device: int) -> float:
        return self.barrier_s - self.tx_done[device]


def simulate_sync_round(plans: list[DevicePlan]) -> SyncRoundTiming:
    """Drive one synchronous round through the event queue.

    Every device computes its fresh iterations back to back from t=0, then
    transmits. The barrier sits at the last TX_DONE. Iteration completion
    times are laid out multiplicatively (start + j*t_cp), never by repeated
    addition, so long rounds don't accumulate rounding drift.
    """
    if not plans:
        raise ProtocolError("sync round with no participants")
    q = EventQueue()
    for p in plans:
        if p.classical_iters < 0:
            raise ConfigError(f"negative iteration count for device {p.device}")
        end = p.classical_iters * p.t_cp
        for j in range(1, p.classical_iters + 1):
            q.push(SimEvent(j * p.t_cp, EventKind.ITER_DONE, p.device))
        q.push(SimEvent(end, EventKind.TX_START, p.device))
        q.push(SimEvent(end + p.t_comm, EventKind.TX_DONE, p.device))

    timing = SyncRoundTiming(barrier_s=0.0)
    while q:
        ev = q.pop()
        timing.events_processed += 1
        if ev.kind == EventKind.TX_START:
            timing.classical_end[ev.device] = ev.time
        elif ev.kind == EventKind.TX_DONE:
            timing.tx_done[ev.device] = ev.time
            if ev.time > timing.barrier_s:
                timing.barrier_s = ev.time

    q.push(SimEvent(timing.barrier_s, EventKind.BARRIER, -1))
    q.pop()
    timing.events_processed += 1
    return timing
