"""Participant selection: loss-driven utility, latency penalties, the
overlap-aware variant that discounts already-banked work, and a starvation
boost for repeatedly overlooked devices.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .core import ConfigError, DeviceProfile, ProtocolError
from .learning import statistical_utility


@dataclass(frozen=True)
class UtilityRecord:
    device: int
    statistical: float
    latency_factor: float
    combined: float
    boosted: float = 0.0

    def with_boost(self, boosted: float) -> "UtilityRecord":
        return UtilityRecord(
            self.device, self.statistical, self.latency_factor, self.combined, boosted
        )


def oort_utility(
    device: int,
    stat_losses,
    t_total: float,
    T_pref: float,
    alpha: float,
) -> UtilityRecord:
    """Loss utility with a soft deadline: devices slower than the preferred
    round time T_pref are penalized by (T_pref/t)^alpha, faster ones are not
    rewarded further."""
    if t_total <= 0 or T_pref <= 0:
        raise ConfigError("t_total and T_pref must be positive")
    if alpha < 0:
        raise ConfigError(f"alpha must be nonnegative, got {alpha}")
    stat = statistical_utility(stat_losses)
    factor = (T_pref / t_total) ** alpha if T_pref < t_total else 1.0
    rec = UtilityRecord(device, stat, factor, stat * factor)
    return rec.with_boost(rec.combined)


def fedex_utility(
    stat_losses,
    profile: DeviceProfile,
    K: int,
    S_prev: int,
    alpha: float,
) -> UtilityRecord:
    """Overlap-aware utility: the latency term charges only the iterations a
    device still has to compute this round (banked work is free) plus its
    upload, inverted and raised to alpha."""
    if K < 1:
        raise ConfigError(f"K must be >= 1, got {K}")
    if S_prev < 0:
        raise ConfigError(f"S_prev must be nonnegative, got {S_prev}")
    if alpha < 0:
        raise ConfigError(f"alpha must be nonnegative, got {alpha}")
    stat = statistical_utility(stat_losses)
    fresh = max(0, K - S_prev)
    latency = fresh * profile.t_cp + profile.t_comm
    factor = (1.0 / latency) ** alpha
    rec = UtilityRecord(profile.id, stat, factor, stat * factor)
    return rec.with_boost(rec.combined)


def temporal_uncertainty_boost(
    combined: float, overlooked: int, current_round: int, c_boost: float = 1.0
) -> float:
    """Multiply utility by 1 + c*sqrt(rounds overlooked / current round) so
    long-ignored devices eventually win a slot."""
    if current_round < 1:
        raise ConfigError(f"current_round must be >= 1, got {current_round}")
    if overlooked < 0:
        raise ConfigError(f"overlooked must be nonnegative, got {overlooked}")
    if c_boost < 0:
        raise ConfigError(f"c_boost must be nonnegative, got {c_boost}")
    return combined * (1.0 + c_boost * np.sqrt(overlooked / current_round))


def rank_and_select(records: list[UtilityRecord], P: int) -> list[int]:
    """Pick the P highest boosted utilities. Exact ties go to the lower device
    id; the returned ids are sorted ascending. Asking for more devices than
    exist selects everyone (with a warning)."""
    if P < 1:
        raise ConfigError(f"P must be >= 1, got {P}")
    if not records:
        raise ProtocolError("selection over an empty candidate set")
    seen = set()
    for r in records:
        if r.device in seen:
            raise ProtocolError(f"duplicate utility record for device {r.device}")
        seen.add(r.device)
    if P > len(records):
        warnings.warn(
            f"requested {P} participants from {len(records)} candidates; taking all",
            stacklevel=2,
        )
        P = len(records)
    ranked = sorted(records, key=lambda r: (-r.boosted, r.device))
    return sorted(r.device for r in ranked[:P])
