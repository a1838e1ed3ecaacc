import numpy as np
import pytest

from fedex_sim.core import DeviceProfile, RngStream
from fedex_sim.harness import PROFILE_PRESETS, SimConfig
from fedex_sim.learning import LearningTask, Shard, make_blobs


def profile_from_preset(name: str, device_id: int, model_bytes: float) -> DeviceProfile:
    p = PROFILE_PRESETS[name]
    return DeviceProfile(
        id=device_id,
        t_cp=p.t_cp,
        rate=model_bytes / p.t_comm,
        model_bytes=model_bytes,
        mem_capacity=p.mem_capacity,
    )


def tiny_world(
    n_devices: int,
    tier_names: list[str],
    task: LearningTask,
    seed: int = 7,
    samples_per_device: int = 40,
    clone_shards: bool = False,
):
    """Small hand-assembled world for direct Experiment construction."""
    assert len(tier_names) == n_devices
    rng = RngStream(seed, "test-world")
    total = n_devices * samples_per_device + 200
    X, y = make_blobs(task.input_dim, task.num_classes, total, rng.substream("data"))
    test_X, test_y = X[:160], y[:160]
    probe_X = X[160:200]
    train_X, train_y = X[200:], y[200:]
    model_bytes = task.param_dim * 8
    profiles = [
        profile_from_preset(t, i, model_bytes) for i, t in enumerate(tier_names)
    ]
    if clone_shards:
        shards = [
            Shard(train_X[:samples_per_device], train_y[:samples_per_device], owner=i)
            for i in range(n_devices)
        ]
    else:
        shards = [
            Shard(
                train_X[i * samples_per_device : (i + 1) * samples_per_device],
                train_y[i * samples_per_device : (i + 1) * samples_per_device],
                owner=i,
            )
            for i in range(n_devices)
        ]
    return profiles, shards, test_X, test_y, probe_X


@pytest.fixture
def logistic_task():
    return LearningTask(kind="logistic", input_dim=6, num_classes=4)


@pytest.fixture
def base_cfg():
    return SimConfig(
        n_devices=4,
        participants=4,
        budget_rounds=6,
        batch_size=16,
        eta=0.1,
    )
