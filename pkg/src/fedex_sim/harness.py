"""Experiment harness: device-tier presets, flat key=value configs, world
construction, scenario presets, parallel run driving, and deterministic CSV /
JSON / table reporting.

Config files are plain text, one `key = value` per line, `#` comments. The
same dotted keys work as command-line overrides. Floats are written back out
via repr so identical runs produce byte-identical artifacts.
"""

from __future__ import annotations

import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .core import ConfigError, DeviceProfile, RngStream
from .learning import (
    LearningTask,
    Shard,
    load_csv_dataset,
    make_blobs,
    partition_noniid,
)
from .protocols import PROTOCOLS, RoundRecord

# ---- device tiers -------------------------------------------------------------

MIB = 1024 * 1024


@dataclass(frozen=True)
class ProfilePreset:
    name: str
    t_cp: float  # seconds per local iteration
    t_comm: float  # seconds per model upload
    mem_capacity: float  # bytes


# Measured per-iteration compute and per-upload times for the reference model;
# uplink rate is derived per task so t_comm stays at these values.
PROFILE_PRESETS = {
    "xavier": ProfilePreset("xavier", 1.13, 5.54, 8192 * MIB),
    "tx2": ProfilePreset("tx2", 1.35, 6.40, 4096 * MIB),
    "xiaomi12s": ProfilePreset("xiaomi12s", 0.84, 7.66, 8192 * MIB),
    "honor70": ProfilePreset("honor70", 1.01, 7.24, 8192 * MIB),
    "honorplay6t": ProfilePreset("honorplay6t", 1.18, 6.82, 8192 * MIB),
}

# fraction of each tier, fastest compute first: xiaomi12s / honor70 / tx2
MIX_PRESETS = {
    "tiermix-70-20-10": {"xiaomi12s": 70, "honor70": 20, "tx2": 10},
    "tiermix-30-30-40": {"xiaomi12s": 30, "honor70": 30, "tx2": 40},
    "tiermix-20-30-50": {"xiaomi12s": 20, "honor70": 30, "tx2": 50},
    "homogeneous-tx2": {"tx2": 1},
    "trio": {"xavier": 1, "tx2": 1, "xiaomi12s": 1},
}

DEFAULT_MIX = "tiermix-30-30-40"


# ---- configuration ------------------------------------------------------------


@dataclass
class SimConfig:
    protocol: str = "fedex"
    n_devices: int = 100
    participants: int = 20
    local_iters: int = 10
    ceiling: int = 10
    alpha: float = 2.0
    delta_cka: float = 0.7
    lam: float = 0.5
    eta: float = 0.05
    batch_size: int = 32
    target_accuracy: float | None = None
    master_seed: int = 1
    output_dir: str | None = None
    budget_hours: float | None = None
    budget_rounds: int = 300
    task_kind: str = "logistic"
    input_dim: int = 20
    num_classes: int = 10
    hidden_dim: int = 16
    l2_reg: float = 0.0
    samples_per_device: int = 100
    center_scale: float = 2.0
    dataset_csv: str | None = None
    c_boost: float = 1.0
    t_pref: float | None = None
    noise_sigma: float = 0.0
    probe_size: int = 256
    test_fraction: float = 0.2
    mix: dict = field(default_factory=dict)
    profile_overrides: dict = field(default_factory=dict)

    def validate(self) -> "SimConfig":
        if self.protocol not in PROTOCOLS:
            raise ConfigError(f"unknown protocol {self.protocol!r}; one of {PROTOCOLS}")
        if self.n_devices < 1:
            raise ConfigError("n_devices must be >= 1")
        if not 1 <= self.participants <= self.n_devices:
            raise ConfigError(
                f"participants must lie in [1, n_devices]; got {self.participants} "
                f"with n_devices={self.n_devices}"
            )
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigError(f"lambda must lie in [0,1], got {self.lam}")
        if self.eta <= 0:
            raise ConfigError("eta must be positive")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not 0.0 < self.test_fraction < 1.0:
            raise ConfigError("eval.test_fraction must lie in (0,1)")
        if self.probe_size < 2:
            raise ConfigError("probe_size must be >= 2")
        if self.budget_rounds is not None and self.budget_rounds < 1:
            raise ConfigError("budget.rounds must be >= 1")
        return self


# dotted config key -> SimConfig field
KEY_MAP = {
    "protocol": "protocol",
    "n_devices": "n_devices",
    "participants": "participants",
    "local_iters": "local_iters",
    "ceiling": "ceiling",
    "alpha": "alpha",
    "delta_cka": "delta_cka",
    "lambda": "lam",
    "eta": "eta",
    "batch_size": "batch_size",
    "target_accuracy": "target_accuracy",
    "master_seed": "master_seed",
    "output_dir": "output_dir",
    "budget.hours": "budget_hours",
    "budget.rounds": "budget_rounds",
    "task.kind": "task_kind",
    "task.input_dim": "input_dim",
    "task.num_classes": "num_classes",
    "task.hidden_dim": "hidden_dim",
    "task.l2_reg": "l2_reg",
    "task.samples_per_device": "samples_per_device",
    "task.center_scale": "center_scale",
    "task.dataset_csv": "dataset_csv",
    "select.c_boost": "c_boost",
    "select.t_pref": "t_pref",
    "timing.noise_sigma": "noise_sigma",
    "probe_size": "probe_size",
    "eval.test_fraction": "test_fraction",
}

_INT_FIELDS = {
    "n_devices", "participants", "local_iters", "ceiling", "batch_size",
    "master_seed", "budget_rounds", "input_dim", "num_classes", "hidden_dim",
    "samples_per_device", "probe_size",
}
_STR_FIELDS = {"protocol", "output_dir", "task_kind", "dataset_csv"}


def _parse_value(key: str, raw: str):
    raw = raw.strip()
    if raw.lower() in ("none", "null", ""):
        return None
    fname = KEY_MAP.get(key)
    if fname in _STR_FIELDS:
        return raw
    if fname in _INT_FIELDS:
        try:
            return int(raw)
        except ValueError as e:
            raise ConfigError(f"{key}: expected an integer, got {raw!r}") from e
    try:
        return float(raw)
    except ValueError as e:
        raise ConfigError(f"{key}: expected a number, got {raw!r}") from e


def apply_setting(cfg: SimConfig, key: str, raw: str) -> None:
    """Apply one dotted `key = value` setting in place."""
    key = key.strip()
    if key in KEY_MAP:
        setattr(cfg, KEY_MAP[key], _parse_value(key, raw))
        return
    if key.startswith("mix."):
        name = key[len("mix."):]
        if name not in PROFILE_PRESETS:
            raise ConfigError(
                f"mix.{name}: unknown profile; one of {sorted(PROFILE_PRESETS)}"
            )
        weight = float(raw)
        if weight < 0:
            raise ConfigError(f"{key}: weight must be nonnegative")
        cfg.mix[name] = weight
        return
    if key.startswith("profile."):
        parts = key.split(".")
        if len(parts) != 3 or parts[2] not in ("t_cp", "t_comm", "mem_capacity"):
            raise ConfigError(
                f"{key}: profile overrides take the form "
                "profile.<name>.t_cp|t_comm|mem_capacity"
            )
        cfg.profile_overrides.setdefault(parts[1], {})[parts[2]] = float(raw)
        return
    valid = sorted(KEY_MAP) + ["mix.<profile>", "profile.<name>.<field>"]
    raise ConfigError(f"unknown config key {key!r}; valid keys: {', '.join(valid)}")


def load_config(path, overrides: list[str] | None = None) -> SimConfig:
    """Read a key=value config file (optional) and apply overrides on top."""
    cfg = SimConfig()
    if path is not None:
        text = Path(path).read_text()
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key = value, got {line!r}")
            key, raw = line.split("=", 1)
            apply_setting(cfg, key, raw)
    for ov in overrides or ():
        if "=" not in ov:
            raise ConfigError(f"override {ov!r} must look like key=value")
        key, raw = ov.split("=", 1)
        apply_setting(cfg, key, raw)
    return cfg.validate()


def scenario(name: str, overrides: list[str] | None = None) -> SimConfig:
    """Named experiment presets used throughout the docs and tests."""
    if name not in MIX_PRESETS:
        raise ConfigError(f"unknown scenario {name!r}; one of {sorted(MIX_PRESETS)}")
    cfg = SimConfig()
    cfg.mix = dict(MIX_PRESETS[name])
    if name == "trio":
        cfg.n_devices = 3
        cfg.participants = 3
        # one dominant label per device keeps the skewed split satisfiable
        cfg.num_classes = 3
    elif name == "homogeneous-tx2":
        cfg.n_devices = 8
        cfg.participants = 8
    for ov in overrides or ():
        if "=" not in ov:
            raise ConfigError(f"override {ov!r} must look like key=value")
        key, raw = ov.split("=", 1)
        apply_setting(cfg, key, raw)
    return cfg.validate()


def format_config(cfg: SimConfig) -> str:
    """Resolved-settings echo, one canonical dotted key per line."""
    back = {v: k for k, v in KEY_MAP.items()}
    lines = []
    for f in fields(cfg):
        if f.name in ("mix", "profile_overrides"):
            continue
        lines.append(f"{back[f.name]} = {getattr(cfg, f.name)}")
    mix = cfg.mix or dict(MIX_PRESETS[DEFAULT_MIX])
    for name in sorted(mix):
        lines.append(f"mix.{name} = {mix[name]}")
    for name in sorted(cfg.profile_overrides):
        for k in sorted(cfg.profile_overrides[name]):
            lines.append(f"profile.{name}.{k} = {cfg.profile_overrides[name][k]}")
    return "\n".join(sorted(lines))


# ---- world construction --------------------------------------------------------


@dataclass
class World:
    task: LearningTask
    profiles: list[DeviceProfile]
    shards: list[Shard]
    test_X: np.ndarray
    test_y: np.ndarray
    probe_X: np.ndarray


def _apportion(weights: dict[str, float], total: int) -> dict[str, int]:
    """Largest-remainder split of `total` devices over tier weights."""
    names = sorted(weights)
    wsum = sum(weights[n] for n in names)
    if wsum <= 0:
        raise ConfigError("device mix weights sum to zero")
    exact = {n: total * weights[n] / wsum for n in names}
    counts = {n: int(exact[n]) for n in names}
    short = total - sum(counts.values())
    by_remainder = sorted(names, key=lambda n: (-(exact[n] - counts[n]), n))
    for n in by_remainder[:short]:
        counts[n] += 1
    return {n: c for n, c in counts.items() if c > 0}


def tier_preset(cfg: SimConfig, name: str) -> ProfilePreset:
    if name not in PROFILE_PRESETS:
        raise ConfigError(f"unknown profile {name!r}; one of {sorted(PROFILE_PRESETS)}")
    preset = PROFILE_PRESETS[name]
    ov = cfg.profile_overrides.get(name, {})
    if ov:
        preset = replace(
            preset,
            t_cp=ov.get("t_cp", preset.t_cp),
            t_comm=ov.get("t_comm", preset.t_comm),
            mem_capacity=ov.get("mem_capacity", preset.mem_capacity),
        )
    return preset


def build_world(cfg: SimConfig) -> World:
    """Construct the task, the device fleet, and the data shards a config
    describes. Every random choice flows from master_seed."""
    task = LearningTask(
        kind=cfg.task_kind,
        input_dim=cfg.input_dim,
        num_classes=cfg.num_classes,
        hidden_dim=cfg.hidden_dim,
        l2_reg=cfg.l2_reg,
    )
    model_bytes = task.param_dim * 8  # float64 coefficients

    mix = cfg.mix or dict(MIX_PRESETS[DEFAULT_MIX])
    counts = _apportion(mix, cfg.n_devices)
    # fixed tier order (preset declaration order) so device ids are stable
    profiles = []
    for name in PROFILE_PRESETS:
        if name not in counts:
            continue
        preset = tier_preset(cfg, name)
        for _ in range(counts[name]):
            profiles.append(
                DeviceProfile(
                    id=len(profiles),
                    t_cp=preset.t_cp,
                    rate=model_bytes / preset.t_comm,
                    model_bytes=model_bytes,
                    mem_capacity=preset.mem_capacity,
                )
            )

    rng = RngStream(cfg.master_seed, "world")
    if cfg.dataset_csv is not None:
        X, y = load_csv_dataset(cfg.dataset_csv)
        if int(y.max()) >= task.num_classes:
            raise ConfigError(
                f"{cfg.dataset_csv}: label {int(y.max())} out of range for "
                f"{task.num_classes} classes"
            )
        if X.shape[1] != task.input_dim:
            raise ConfigError(
                f"{cfg.dataset_csv}: {X.shape[1]} features but task.input_dim "
                f"is {task.input_dim}"
            )
    else:
        total = int(round(cfg.n_devices * cfg.samples_per_device / (1 - cfg.test_fraction)))
        X, y = make_blobs(
            task.input_dim, task.num_classes, total, rng.substream("data"),
            center_scale=cfg.center_scale,
        )

    order = rng.substream("split").gen.permutation(len(y))
    n_test = max(1, int(round(len(y) * cfg.test_fraction)))
    test_idx, train_idx = order[:n_test], order[n_test:]
    test_X = np.ascontiguousarray(X[test_idx])
    test_y = y[test_idx].copy()
    shards = partition_noniid(
        X[train_idx], y[train_idx], cfg.n_devices, cfg.lam, rng.substream("partition")
    )

    probe_n = min(cfg.probe_size, len(test_y))
    pick = rng.substream("probe").gen.choice(len(test_y), size=probe_n, replace=False)
    probe_X = np.ascontiguousarray(test_X[np.sort(pick)])
    return World(task, profiles, shards, test_X, test_y, probe_X)


# ---- reporting -----------------------------------------------------------------

CSV_COLUMNS = [
    "round", "virtual_time_s", "protocol", "n_selected", "round_latency_s",
    "max_staleness", "mean_staleness", "max_memory_bytes", "n_collisions",
    "mean_cka", "trigger_latched", "accuracy", "mean_loss",
]


def _csv_cell(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_rounds_csv(records: list[RoundRecord], path) -> None:
    lines = [",".join(CSV_COLUMNS)]
    for rec in records:
        row = rec.as_dict()
        lines.append(",".join(_csv_cell(row[c]) for c in CSV_COLUMNS))
    Path(path).write_text("\n".join(lines) + "\n")


def write_summary_json(summary: dict, path) -> None:
    Path(path).write_text(json.dumps(summary, indent=2) + "\n")


def worker_count(n_jobs: int) -> int:
    env = os.environ.get("FEDEX_SIM_THREADS", "").strip()
    if env:
        try:
            cap = int(env)
        except ValueError as e:
            raise ConfigError(f"FEDEX_SIM_THREADS must be an integer, got {env!r}") from e
        if cap < 1:
            raise ConfigError("FEDEX_SIM_THREADS must be >= 1")
    else:
        cap = os.cpu_count() or 1
    return max(1, min(cap, n_jobs))


def _run_one(cfg: SimConfig):
    from .protocols import run_experiment

    return run_experiment(cfg)


def run_and_report(
    configs: list[SimConfig],
    reference: str = "fedavg",
    out_dir=None,
) -> list[dict]:
    """Run each config (in parallel when allowed), write per-run artifacts,
    and return the summaries with speedups filled in against the reference
    protocol's overall latency."""
    if not configs:
        raise ConfigError("run_and_report needs at least one config")
    workers = worker_count(len(configs))
    if workers == 1 or len(configs) == 1:
        results = [_run_one(c) for c in configs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_one, configs))

    summaries = []
    ref_ol = None
    for cfg, (records, summary) in zip(configs, results):
        if cfg.protocol == reference and summary["reached"] and ref_ol is None:
            ref_ol = summary["OL_s"]
    for cfg, (records, summary) in zip(configs, results):
        if ref_ol is not None and summary["reached"]:
            summary = {**summary, "speedup_vs_reference": ref_ol / summary["OL_s"]}
        summaries.append(summary)
        if out_dir is not None:
            out = Path(out_dir)
            out.mkdir(parents=True, exist_ok=True)
            stem = cfg.protocol if len(configs) > 1 else "rounds"
            csv_name = f"{stem}.csv" if len(configs) > 1 else "rounds.csv"
            write_rounds_csv(records, out / csv_name)
            json_name = f"{stem}_summary.json" if len(configs) > 1 else "summary.json"
            write_summary_json(summary, out / json_name)
    if out_dir is not None and len(configs) > 1:
        Path(out_dir, "comparison.txt").write_text(
            comparison_table(summaries, reference) + "\n"
        )
    return summaries


def comparison_table(summaries: list[dict], reference: str = "fedavg") -> str:
    """Fixed-width text table of time-to-target and speedup per protocol."""
    header = f"{'protocol':<14} {'OL_s':>12} {'NR':>6} {'PRT_s':>10} {'speedup':>10}"
    rows = [header, "-" * len(header)]
    for s in summaries:
        if s["reached"]:
            speed = s.get("speedup_vs_reference")
            rows.append(
                f"{s['protocol']:<14} {s['OL_s']:>12.1f} {s['NR']:>6d} "
                f"{s['PRT_s']:>10.2f} "
                + (f"{speed:>10.2f}" if speed is not None else f"{'n/a':>10}")
            )
        else:
            rows.append(
                f"{s['protocol']:<14} {'n/a (max acc %.1f%%)' % (100 * s['max_accuracy']):>40}"
            )
    rows.append("")
    rows.append(
        f"speedup = overall latency of {reference} / overall latency of the row's "
        "protocol (unitless ratio of virtual seconds to the same target accuracy)"
    )
    return "\n".join(rows)


def plot_accuracy(csv_paths: list, out_path) -> None:
    """Accuracy-vs-virtual-time SVG across runs. Needs matplotlib."""
    try:
        import matplotlib
        matplotlib.use("svg")
        import matplotlib.pyplot as plt
    except ImportError as e:
        raise ConfigError(
            "plotting needs matplotlib (pip install fedex-sim[plots])"
        ) from e
    fig, ax = plt.subplots(figsize=(7, 4.5))
    for path in csv_paths:
        times, accs, label = [], [], Path(path).stem
        with open(path) as fh:
            header = fh.readline().rstrip("\n").split(",")
            t_i, a_i, p_i = (
                header.index("virtual_time_s"),
                header.index("accuracy"),
                header.index("protocol"),
            )
            for line in fh:
                cells = line.rstrip("\n").split(",")
                if not cells or not cells[0]:
                    continue
                times.append(float(cells[t_i]))
                accs.append(float(cells[a_i]))
                label = cells[p_i]
        ax.plot(times, accs, label=label)
    ax.set_xlabel("virtual time (s)")
    ax.set_ylabel("test accuracy")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_path, format="svg")
    plt.close(fig)
