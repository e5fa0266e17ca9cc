import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from src.anchorforge import DpgdConfig
from src.duotower import DualTowerModel, ModelConfig, PretrainConfig, pretrain, take_snapshot
from src.protopath import PrototypeBank, estimate_new_prototypes
from src.segp_train import TrainConfig, train_task
from src.streambench import (ExperimentSettings, MethodFlags, RunOptions, StreamSpec, bench_train_config,
                             generate_stream)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config():
    return ModelConfig(input_dim=6, raw_dim=8, joint_dim=5, hidden_dim=7, lora_rank=2, class_token_dim=4)


@pytest.fixture
def tiny_model(tiny_config):
    model = DualTowerModel.initialize(tiny_config, seed=3)
    model.register_classes(range(6))
    return model


@pytest.fixture
def adapted_model(tiny_model):
    """tiny_model with non-zero adapter up-projections."""
    rng = np.random.default_rng(11)
    for adapter in tiny_model.adapters.values():
        adapter.up = 0.3 * rng.normal(size=adapter.up.shape)
    return tiny_model


def make_tiny_settings(**flags) -> ExperimentSettings:
    return ExperimentSettings(
        stream=StreamSpec(num_tasks=3, classes_per_task=2, train_per_class=12, test_per_class=6, input_dim=8,
                          pretrain_classes=4, pretrain_per_class=10, seed=5),
        model=ModelConfig(input_dim=8, raw_dim=12, joint_dim=8, hidden_dim=12, lora_rank=2, class_token_dim=6),
        pretrain=PretrainConfig(steps=30, learning_rate=0.01, batch_size=16),
        train=TrainConfig(epochs=2, batch_size=8, anchor_batch_size=4, learning_rate=0.05, k=3),
        dpgd=DpgdConfig(iterations=3, seeds_per_class=2),
        flags=MethodFlags(**flags),
        run=RunOptions(seed=7),
    )


@pytest.fixture
def tiny_settings():
    return make_tiny_settings


@pytest.fixture(scope="session")
def toy_teacher():
    """A pretrained default-size model fitted to task 0 of a small stream.

    Returns (teacher snapshot, stream, prototype bank for task 0's classes).
    """
    stream = generate_stream(StreamSpec(num_tasks=2, classes_per_task=4, train_per_class=30,
                                        test_per_class=10, seed=0))
    model = DualTowerModel.initialize(ModelConfig(), seed=0)
    pretrain(model, stream.pretrain.x, stream.pretrain.y, PretrainConfig(), seed=0)
    task0 = stream.tasks[0]
    model.register_classes(task0.classes)
    train_task(model, task0.train.x, task0.train.y, task0.classes, bench_train_config(), seed=0, task=0)
    model.register_classes(stream.tasks[1].classes)
    bank = PrototypeBank(estimate_new_prototypes(model, task0.train.x, task0.train.y, task0.classes), 0)
    return take_snapshot(model), stream, bank
