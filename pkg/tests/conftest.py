import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from avenas.objective import (
    SyntheticTask, generate_pool, generate_sequence, toy_loss_weights,
)
from avenas.supernet import SampledArch, toy_spec
from avenas.training import TrainConfig, train_encoder

TOY_TASK_SEED = 100
TRAIN_POOL_KW = dict(keyframe_rate=0.05, noise_level=0.005, extreme_fraction=0.03)
STANDARD_TRACE_KW = dict(seed=777, n_frames=600, keyframe_rate=0.04,
                         noise_level=0.003)


def reference_toy_arch(spec):
    """Fixed all-conv full-width architecture used wherever a trained toy
    encoder is needed without running a search first."""
    ops, scales = {}, {}
    for view, branch, i, *_ in spec.blocks():
        ops.setdefault((view, branch), []).append("conv")
        scales.setdefault((view, branch), []).append(1.0)
    return SampledArch(operators=ops, channel_scales=scales,
                       resolutions={v: 16 for v in spec.views}, name="toy-ref")


@pytest.fixture(scope="session")
def toy_task():
    return SyntheticTask(toy_spec(), seed=TOY_TASK_SEED)


@pytest.fixture(scope="session")
def toy_train_frames(toy_task):
    return generate_pool(toy_task, 101, n_sequences=32, frames_per_sequence=32,
                         **TRAIN_POOL_KW)


@pytest.fixture(scope="session")
def toy_test_frames(toy_task):
    return generate_pool(toy_task, 202, n_sequences=4, frames_per_sequence=32,
                         **TRAIN_POOL_KW)


@pytest.fixture(scope="session")
def standard_trace(toy_task):
    return generate_sequence(toy_task, **STANDARD_TRACE_KW)


@pytest.fixture(scope="session")
def trained_toy_encoder(toy_task, toy_train_frames):
    spec = toy_task.spec
    arch = reference_toy_arch(spec)
    cfg = TrainConfig(steps=1600, batch_size=16, lr=4e-3, seed=3, log_every=400)
    enc, _ = train_encoder(spec, arch, toy_task, toy_train_frames, cfg,
                           toy_loss_weights())
    return enc
