"""Session fixtures shared by the behavioral and acceptance tests.

The desk models are trained once per session; everything downstream
(attack efficacy, backdoor behavior, defense recovery, the matrix) reuses
them. All seeds are fixed, so the session is fully deterministic.
"""

import numpy as np
import pytest

from illusionlab.data import Dataset, SyntheticSpec, generate_synthetic
from illusionlab.defenses import train_denoiser
from illusionlab.harness import build_validation_set
from illusionlab.model import PoisonSpec, TrainConfig, train
from illusionlab.attacks import desk_trigger

MASTER_SEED = 7


@pytest.fixture(scope="session")
def train_data() -> Dataset:
    return generate_synthetic(SyntheticSpec(per_class=500, seed=1))


@pytest.fixture(scope="session")
def test_data() -> Dataset:
    return generate_synthetic(SyntheticSpec(per_class=100, seed=2),
                              split="validation")


@pytest.fixture(scope="session")
def small_data() -> Dataset:
    return generate_synthetic(SyntheticSpec(per_class=20, seed=3))


@pytest.fixture(scope="session")
def clean_model(train_data):
    params, log = train(train_data, TrainConfig(seed=MASTER_SEED))
    return params


@pytest.fixture(scope="session")
def poison_spec():
    return PoisonSpec(target_label=0, rate=0.10, trigger=desk_trigger())


@pytest.fixture(scope="session")
def poisoned_model(train_data, poison_spec):
    params, log = train(train_data, TrainConfig(seed=MASTER_SEED + 1),
                        poison=poison_spec)
    return params


@pytest.fixture(scope="session")
def denoiser(train_data):
    dn, log = train_denoiser(train_data, (0.02, 0.3),
                             TrainConfig(epochs=2, batch_size=32,
                                         learning_rate=0.05,
                                         seed=MASTER_SEED + 2))
    return dn


@pytest.fixture(scope="session")
def valset(clean_model, test_data):
    return build_validation_set(clean_model, test_data, per_class=10,
                                seed=MASTER_SEED)


@pytest.fixture(scope="session")
def exemplar_bank(valset):
    bank = {}
    for image, label in zip(valset.images, valset.labels):
        bank.setdefault(int(label), image.copy())
    return bank


@pytest.fixture(scope="session")
def tiny_model(small_data):
    """A coarser desk model for tests that only need a working classifier."""
    params, _ = train(small_data, TrainConfig(epochs=2, seed=0))
    return params


def make_linear_toy(weights, bias, labels=2):
    """Tiny dense classifier over a 2-pixel image, as desk ModelParams.

    The descriptor-driven forward pass is bypassed: this helper builds a
    minimal compatible parameter set for a flatten -> dense architecture
    over an arbitrary input size.
    """
    from illusionlab.model import ModelParams

    arch = [{"layer": "flatten"},
            {"layer": "dense", "name": "dense", "units": int(weights.shape[1])}]
    return ModelParams(arch=arch,
                       weights={"dense_w": np.asarray(weights, dtype=np.float64),
                                "dense_b": np.asarray(bias, dtype=np.float64)},
                       class_count=int(weights.shape[1]))
