"""Round procedures for six federation protocols over one shared world.

Synchronous family (server round barrier):
  fedavg        random selection, compute-then-upload
  oort          utility selection, compute-then-upload
  dgaplus       random selection, uploads overlap next-block computing
  dgaplus_oort  utility selection, same overlapping
  fedex         similarity-triggered: classical rounds until the fleet's
                local models agree with the global one, then overlapping
                with banked-work-aware selection

Asynchronous:
  dga           every device computes continuously and ships every K-th
                block; the server aggregates a round when all blocks for it
                have landed

A device that overlaps banks iterations during its own upload and the
straggler wait, capped at the ceiling U. The banked block is what it uploads
next time it is selected; on selection it first re-aligns its model by
adding back its own last upload and subtracting every global mean update
aggregated since it last participated (the server keeps that running sum per
device; the broadcast is still a single model-sized vector). Banked work is
never discarded.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import (
    ConfigError,
    DeviceProfile,
    DeviceState,
    ModelParams,
    ProtocolError,
    RngStream,
    UpdateRecord,
    vec_axpy,
    vec_mean,
)
from .learning import (
    LearningTask,
    Shard,
    evaluate,
    extract_features,
    linear_cka,
    local_sgd,
    per_sample_losses,
)
from .selection import (
    UtilityRecord,
    fedex_utility,
    oort_utility,
    rank_and_select,
    temporal_uncertainty_boost,
)
from .timing import (
    DevicePlan,
    iterations_before,
    memory_usage,
    simulate_sync_round,
)

PROTOCOLS = ("fedavg", "oort", "dga", "dgaplus", "dgaplus_oort", "fedex")
OVERLAP_FROM_START = ("dgaplus", "dgaplus_oort")


# ---- shared state and small ops ----------------------------------------------


@dataclass
class GlobalState:
    model: ModelParams
    round: int = 0
    virtual_time_s: float = 0.0
    latched: bool = False
    mean_update_prev: UpdateRecord = None  # latest aggregated mean update
    cum_update: ModelParams = None  # running sum of all mean updates


@dataclass(frozen=True)
class RoundRecord:
    round: int
    virtual_time_s: float
    protocol: str
    n_selected: int
    round_latency_s: float
    max_staleness: int
    mean_staleness: float
    max_memory_bytes: float
    n_collisions: int
    mean_cka: float
    trigger_latched: bool
    accuracy: float
    mean_loss: float

    def as_dict(self) -> dict:
        return {
            "round": self.round,
            "virtual_time_s": self.virtual_time_s,
            "protocol": self.protocol,
            "n_selected": self.n_selected,
            "round_latency_s": self.round_latency_s,
            "max_staleness": self.max_staleness,
            "mean_staleness": self.mean_staleness,
            "max_memory_bytes": self.max_memory_bytes,
            "n_collisions": self.n_collisions,
            "mean_cka": self.mean_cka,
            "trigger_latched": self.trigger_latched,
            "accuracy": self.accuracy,
            "mean_loss": self.mean_loss,
        }


def update_correction(
    w_local: ModelParams, m_own: UpdateRecord, m_global: UpdateRecord
) -> ModelParams:
    """Re-align a returning device: add back its own last upload (which the
    server already folded into a global mean) and subtract the global movement
    it has not yet seen — the sum of every mean update aggregated since the
    device last participated, which for back-to-back participation is just the
    latest mean. After the correction the device sits exactly on the current
    global model minus its still-banked work."""
    return vec_axpy(-1.0, m_global.delta, vec_axpy(1.0, m_own.delta, w_local))


def trigger_check(
    task: LearningTask,
    device_models: list[ModelParams],
    global_model: ModelParams,
    probe_X: np.ndarray,
    delta_cka: float,
) -> tuple[bool, float]:
    """Fleet-agreement test: mean linear CKA between every device's local
    features and the global model's features on the probe set. Fires (True)
    when the mean strictly exceeds delta_cka."""
    if not device_models:
        raise ProtocolError("trigger check with no device models")
    gf = extract_features(task, global_model, probe_X)
    vals = [
        linear_cka(extract_features(task, m, probe_X), gf) for m in device_models
    ]
    mean_cka = float(np.mean(vals))
    return mean_cka > delta_cka, mean_cka


# ---- experiment orchestration -------------------------------------------------


class Experiment:
    """One protocol run over a fixed world (task, devices, shards, test set).

    ``cfg`` is any object exposing: protocol, local_iters, ceiling,
    participants, alpha, delta_cka, eta, batch_size, target_accuracy,
    master_seed, budget_rounds, budget_hours, c_boost, t_pref, noise_sigma.
    """

    def __init__(
        self,
        task: LearningTask,
        profiles: list[DeviceProfile],
        shards: list[Shard],
        test_X: np.ndarray,
        test_y: np.ndarray,
        probe_X: np.ndarray,
        cfg,
    ):
        if len(profiles) != len(shards):
            raise ConfigError(
                f"{len(profiles)} profiles but {len(shards)} shards"
            )
        if cfg.protocol not in PROTOCOLS:
            raise ConfigError(
                f"unknown protocol {cfg.protocol!r}; one of {PROTOCOLS}"
            )
        self.task = task
        self.profiles = profiles
        self.shards = shards
        self.test_X, self.test_y = test_X, test_y
        self.probe_X = probe_X
        self.cfg = cfg
        self.n = len(profiles)
        self.K = cfg.local_iters
        self.U = cfg.ceiling
        if self.K < 1:
            raise ConfigError(f"local_iters must be >= 1, got {self.K}")
        if self.U < 1:
            raise ConfigError(f"ceiling must be >= 1, got {self.U}")

        self.rng = RngStream(cfg.master_seed, "experiment")
        self.select_rng = self.rng.substream("select")
        self.mb_rngs = [self.rng.substream(f"minibatch/{i}") for i in range(self.n)]

        model0 = task.init_params(self.rng.substream("init"))
        self.g = GlobalState(
            model=model0,
            latched=(cfg.protocol in OVERLAP_FROM_START)
            or (cfg.protocol == "fedex" and cfg.delta_cka <= 0),
            mean_update_prev=UpdateRecord.zero(task.param_dim),
            cum_update=np.zeros(task.param_dim),
        )
        self.states = [DeviceState(local_model=model0.copy()) for _ in range(self.n)]
        # selection needs a loss record before a device's first participation
        for i, st in enumerate(self.states):
            st.last_losses = per_sample_losses(task, model0, shards[i].X, shards[i].y)

        # T_pref for deadline-penalized selection: median first-round latency
        if cfg.t_pref is not None and cfg.t_pref > 0:
            self.t_pref = float(cfg.t_pref)
        else:
            self.t_pref = float(
                np.median([self.K * p.t_cp + p.t_comm for p in profiles])
            )

        self._model_version = [0] * self.n
        self._feat_cache: dict[int, tuple[int, np.ndarray]] = {}
        self.records: list[RoundRecord] = []
        self.trace = None  # optional callable(event: str, payload: dict)

    # -- bookkeeping helpers --

    def _emit(self, event: str, **payload):
        if self.trace is not None:
            self.trace(event, payload)

    def _set_local(self, i: int, model: ModelParams) -> None:
        self.states[i].local_model = model
        self._model_version[i] += 1

    def _features(self, i: int) -> np.ndarray:
        cached = self._feat_cache.get(i)
        if cached is not None and cached[0] == self._model_version[i]:
            return cached[1]
        feats = extract_features(self.task, self.states[i].local_model, self.probe_X)
        self._feat_cache[i] = (self._model_version[i], feats)
        return feats

    def _mean_cka(self) -> float:
        gf = extract_features(self.task, self.g.model, self.probe_X)
        vals = [linear_cka(self._features(i), gf) for i in range(self.n)]
        return float(np.mean(vals))

    def _effective_timings(self, r: int) -> tuple[list[float], list[float]]:
        """Per-device compute and upload times this round. noise_sigma > 0
        applies i.i.d. lognormal jitter, drawn for the whole fleet whether or
        not a device participates, so draws never depend on selection."""
        sigma = self.cfg.noise_sigma
        t_cp = [p.t_cp for p in self.profiles]
        t_comm = [p.t_comm for p in self.profiles]
        if sigma > 0:
            z = self.rng.substream(f"noise/{r}").gen.normal(size=(self.n, 2))
            t_cp = [t * float(np.exp(sigma * z[i, 0])) for i, t in enumerate(t_cp)]
            t_comm = [t * float(np.exp(sigma * z[i, 1])) for i, t in enumerate(t_comm)]
        return t_cp, t_comm

    def _refresh_losses(self, i: int) -> None:
        st = self.states[i]
        st.last_losses = per_sample_losses(
            self.task, st.local_model, self.shards[i].X, self.shards[i].y
        )

    def _bank_iterations(self, i: int, n_iters: int, r: int) -> None:
        """Run n_iters local steps, accumulating into the device's open
        partial block and moving each filled K-block onto its pending queue."""
        st = self.states[i]
        remaining = n_iters
        while remaining > 0:
            seg = min(self.K - st.partial_iters, remaining)
            new_model, upd = local_sgd(
                self.task,
                st.local_model,
                self.shards[i],
                seg,
                self.cfg.eta,
                self.cfg.batch_size,
                self.mb_rngs[i],
                round_no=r,
            )
            self._set_local(i, new_model)
            if st.partial_delta is None:
                st.partial_delta = upd.delta
            else:
                st.partial_delta = st.partial_delta + upd.delta
            st.partial_iters += seg
            if st.partial_iters == self.K:
                st.pending_updates.append(
                    UpdateRecord(st.partial_delta, r, self.K)
                )
                st.partial_delta = None
                st.partial_iters = 0
            remaining -= seg

    # -- selection --

    def _select_random(self, P: int) -> list[int]:
        if P > self.n:
            P = self.n
        ids = self.select_rng.gen.choice(self.n, size=P, replace=False)
        return sorted(int(i) for i in ids)

    def _utility_records(self, r: int, overlap_aware: bool) -> list[UtilityRecord]:
        recs = []
        for i, p in enumerate(self.profiles):
            st = self.states[i]
            if overlap_aware:
                rec = fedex_utility(
                    st.last_losses, p, self.K, st.staleness_prev, self.cfg.alpha
                )
            else:
                rec = oort_utility(
                    i,
                    st.last_losses,
                    self.K * p.t_cp + p.t_comm,
                    self.t_pref,
                    self.cfg.alpha,
                )
            boosted = temporal_uncertainty_boost(
                rec.combined, st.overlooked_rounds, r, self.cfg.c_boost
            )
            recs.append(rec.with_boost(boosted))
        return recs

    def _select_utility(self, r: int, overlap_aware: bool) -> list[int]:
        return rank_and_select(
            self._utility_records(r, overlap_aware), self.cfg.participants
        )

    # -- synchronous rounds --

    def _mark_participation(self, selected: list[int]) -> None:
        chosen = set(selected)
        for i, st in enumerate(self.states):
            if i in chosen:
                st.overlooked_rounds = 0
            else:
                st.overlooked_rounds += 1

    def _aggregate(self, r: int, uploads: list[UpdateRecord]) -> None:
        mbar = vec_mean([u.delta for u in uploads])
        self.g.model = vec_axpy(-1.0, mbar, self.g.model)
        self.g.mean_update_prev = UpdateRecord(mbar, r, self.K)
        self.g.cum_update = vec_axpy(1.0, mbar, self.g.cum_update)
        self._emit("aggregate", round=r, mean_delta=mbar)

    def _missed_updates(self, i: int) -> UpdateRecord:
        """Sum of mean updates aggregated since device i's last correction."""
        basis = self.states[i].basis_seen
        if basis is None:
            missed = self.g.cum_update
        else:
            missed = vec_axpy(-1.0, basis, self.g.cum_update)
        return UpdateRecord(missed, self.g.round, self.K)

    def _finish_round(
        self,
        r: int,
        latency: float,
        n_selected: int,
        staleness: list[int],
        n_collisions: int = 0,
        mem_values: list[float] | None = None,
    ) -> RoundRecord:
        self.g.round = r
        self.g.virtual_time_s += latency
        mean_cka = self._mean_cka()
        self.g.latched = self.g.latched or (mean_cka > self.cfg.delta_cka)
        acc, loss = evaluate(self.task, self.g.model, self.test_X, self.test_y)
        if mem_values is None:
            mem_values = [
                memory_usage(st.ahead_iterations, self.K, self.profiles[i].model_bytes)
                for i, st in enumerate(self.states)
            ]
        max_mem = max(mem_values)
        for i, st in enumerate(self.states):
            if mem_values[i] > self.profiles[i].mem_capacity:
                st.overflowed = True
        rec = RoundRecord(
            round=r,
            virtual_time_s=self.g.virtual_time_s,
            protocol=self.cfg.protocol,
            n_selected=n_selected,
            round_latency_s=latency,
            max_staleness=max(staleness) if staleness else 0,
            mean_staleness=float(np.mean(staleness)) if staleness else 0.0,
            max_memory_bytes=max_mem,
            n_collisions=n_collisions,
            mean_cka=mean_cka,
            trigger_latched=self.g.latched,
            accuracy=acc,
            mean_loss=loss,
        )
        self.records.append(rec)
        self._emit("round", record=rec)
        return rec

    def _classical_round(self, r: int, selected: list[int]) -> RoundRecord:
        """Broadcast, K local iterations, upload, aggregate. No banked work."""
        t_cp, t_comm = self._effective_timings(r)
        uploads = []
        plans = []
        for i in selected:
            self._set_local(i, self.g.model.copy())
            self.states[i].basis_seen = self.g.cum_update
            new_model, upd = local_sgd(
                self.task,
                self.states[i].local_model,
                self.shards[i],
                self.K,
                self.cfg.eta,
                self.cfg.batch_size,
                self.mb_rngs[i],
                round_no=r,
            )
            self._set_local(i, new_model)
            self.states[i].last_upload = upd
            uploads.append(upd)
            self._emit("upload", round=r, device=i, update=upd)
            self._refresh_losses(i)
            plans.append(DevicePlan(i, t_cp[i], t_comm[i], self.K))
        timing = simulate_sync_round(plans)
        self._mark_participation(selected)
        self._aggregate(r, uploads)
        return self._finish_round(r, timing.barrier_s, len(selected), [0] * len(selected))

    def _overlap_round(self, r: int, selected: list[int]) -> RoundRecord:
        """Overlapping round: re-align, top up the open block to K fresh
        iterations, upload the oldest banked block while computing ahead
        until every participant's upload has landed."""
        t_cp, t_comm = self._effective_timings(r)
        uploads = {}
        plans = []
        fresh_need = {}
        for i in selected:
            st = self.states[i]
            before = st.local_model
            self._set_local(
                i,
                update_correction(
                    before,
                    st.last_upload or UpdateRecord.zero(self.task.param_dim),
                    self._missed_updates(i),
                ),
            )
            st.basis_seen = self.g.cum_update
            self._emit("correction", round=r, device=i, before=before,
                       after=st.local_model)
            s_prev = st.ahead_iterations
            need = max(0, self.K - s_prev)
            fresh_need[i] = need
            if need:
                self._bank_iterations(i, need, r)
            if not st.pending_updates:
                raise ProtocolError(
                    f"device {i} has no complete block to upload in round {r}"
                )
            upload = st.pending_updates.pop(0)
            st.last_upload = upload
            uploads[i] = upload
            self._emit("upload", round=r, device=i, update=upload)
            self._refresh_losses(i)
            plans.append(DevicePlan(i, t_cp[i], t_comm[i], need))

        timing = simulate_sync_round(plans)

        staleness_out = []
        for i in selected:
            st = self.states[i]
            carry = st.ahead_iterations
            window = timing.overlap_window(i)
            n_ov = min(iterations_before(window, t_cp[i]), self.U - carry)
            if n_ov > 0:
                self._bank_iterations(i, n_ov, r)
            s_out = st.ahead_iterations
            if s_out > self.U:
                raise ProtocolError(
                    f"device {i} banked {s_out} iterations past the ceiling {self.U}"
                )
            st.staleness_prev = s_out
            staleness_out.append(s_out)
            self._emit("bank", round=r, device=i, carried=carry, added=n_ov)

        self._mark_participation(selected)
        self._aggregate(r, [uploads[i] for i in selected])
        return self._finish_round(r, timing.barrier_s, len(selected), staleness_out)

    # -- spec'd round entry points --

    def run_fedavg_round(self, r: int) -> RoundRecord:
        return self._classical_round(r, self._select_random(self.cfg.participants))

    def run_oort_round(self, r: int) -> RoundRecord:
        return self._classical_round(r, self._select_utility(r, overlap_aware=False))

    def run_dgaplus_round(self, r: int) -> RoundRecord:
        return self._overlap_round(r, self._select_random(self.cfg.participants))

    def run_dgaplus_oort_round(self, r: int) -> RoundRecord:
        return self._overlap_round(r, self._select_utility(r, overlap_aware=False))

    def run_fedex_round(self, r: int) -> RoundRecord:
        """Classical utility rounds until the similarity trigger latches; from
        then on, overlapping rounds with banked-work-aware selection."""
        if not self.g.latched:
            return self.run_oort_round(r)
        return self._overlap_round(r, self._select_utility(r, overlap_aware=True))

    # -- asynchronous protocol --

    def run_dga(self) -> list[RoundRecord]:
        """Continuous computing on every device; every finished K-block is
        shipped on the device's own uplink (transmissions queue FIFO if the
        previous one is still in flight, which counts as a collision). The
        server closes round r when all round-r blocks have arrived; the
        correction is applied the moment a device receives the broadcast,
        possibly mid-block, and iterations already started keep their old
        basis. Staleness is never capped here."""
        n, K = self.n, self.K
        t_cp = [p.t_cp for p in self.profiles]
        t_comm = [p.t_comm for p in self.profiles]
        tx_done_prev = [0.0] * n
        started = [0] * n
        r = 0
        while True:
            r += 1
            if self.cfg.budget_rounds and r > self.cfg.budget_rounds:
                break
            # round-r block of device i finishes computing at r*K*t_cp; its
            # upload waits for the device's previous transmission to clear
            collisions = 0
            t_agg = 0.0
            tx_done = []
            for i in range(n):
                block_end = r * K * t_cp[i]
                if tx_done_prev[i] > block_end:
                    collisions += 1
                done = max(block_end, tx_done_prev[i]) + t_comm[i]
                tx_done.append(done)
                t_agg = max(t_agg, done)
            # run every iteration that starts before the broadcast lands
            for i in range(n):
                target = iterations_before(t_agg, t_cp[i])
                if target > started[i]:
                    self._bank_iterations(i, target - started[i], r)
                    started[i] = target
                if len(self.states[i].pending_updates) < 1:
                    raise ProtocolError(
                        f"device {i} has not finished block {r} at aggregation"
                    )
            staleness = [started[i] - r * K for i in range(n)]
            # footprint peaks just before the round-r delta is retired
            mem_peak = [
                memory_usage(
                    self.states[i].ahead_iterations, K, self.profiles[i].model_bytes
                )
                for i in range(n)
            ]
            blocks = [self.states[i].pending_updates.pop(0) for i in range(n)]
            for i, st in enumerate(self.states):
                st.staleness_prev = staleness[i]
            self._aggregate(r, blocks)
            for i in range(n):
                st = self.states[i]
                self._set_local(
                    i, update_correction(st.local_model, blocks[i], self._missed_updates(i))
                )
                st.basis_seen = self.g.cum_update
                st.last_upload = blocks[i]
            latency = t_agg - self.g.virtual_time_s
            rec = self._finish_round(
                r, latency, n, staleness, collisions, mem_values=mem_peak
            )
            tx_done_prev = tx_done
            if self._should_stop(rec):
                break
        return self.records

    # -- driving loop --

    def _should_stop(self, rec: RoundRecord) -> bool:
        target = self.cfg.target_accuracy
        if target is not None and rec.accuracy >= target:
            return True
        if (
            self.cfg.budget_hours is not None
            and self.g.virtual_time_s >= self.cfg.budget_hours * 3600.0
        ):
            return True
        return False

    def run(self) -> list[RoundRecord]:
        if self.cfg.protocol == "dga":
            return self.run_dga()
        dispatch = {
            "fedavg": self.run_fedavg_round,
            "oort": self.run_oort_round,
            "dgaplus": self.run_dgaplus_round,
            "dgaplus_oort": self.run_dgaplus_oort_round,
            "fedex": self.run_fedex_round,
        }[self.cfg.protocol]
        r = 0
        while True:
            r += 1
            if self.cfg.budget_rounds and r > self.cfg.budget_rounds:
                break
            rec = dispatch(r)
            if self._should_stop(rec):
                break
        return self.records

    def summary(self) -> dict:
        target = self.cfg.target_accuracy
        reached_rec = None
        if target is not None:
            for rec in self.records:
                if rec.accuracy >= target:
                    reached_rec = rec
                    break
        max_acc = max((rec.accuracy for rec in self.records), default=0.0)
        out = {
            "protocol": self.cfg.protocol,
            "reached": reached_rec is not None,
            "OL_s": reached_rec.virtual_time_s if reached_rec else None,
            "NR": reached_rec.round if reached_rec else None,
            "PRT_s": (
                reached_rec.virtual_time_s / reached_rec.round if reached_rec else None
            ),
            "max_accuracy": max_acc,
            "speedup_vs_reference": None,
        }
        return out


def run_experiment(config) -> tuple[list[RoundRecord], dict]:
    """Build the world a config describes, run its protocol to the target or
    budget, and return (round records, summary)."""
    from .harness import build_world

    world = build_world(config)
    exp = Experiment(
        world.task,
        world.profiles,
        world.shards,
        world.test_X,
        world.test_y,
        world.probe_X,
        config,
    )
    records = exp.run()
    return records, exp.summary()
