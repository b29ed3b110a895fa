import os

import numpy as np
import pytest

from owsd.cloud import CloudModel, default_cloud_arch
from owsd.encoder import random_encoder
from owsd.experiments import WorldConfig, build_world
from owsd.iin import IINConfig
from owsd.nn import Network
from owsd.pipeline import InProcessCloud, Pipeline
from owsd.scrambler import generate_key, toy_arch


@pytest.fixture(scope="session")
def world(tmp_path_factory):
    """The shared desk-scale world (about two minutes to train).

    Set OWSD_WORLD_CACHE to a directory to reuse it across runs.
    """
    cache = os.environ.get("OWSD_WORLD_CACHE") or tmp_path_factory.mktemp("world")
    return build_world(WorldConfig(), cache_dir=cache)


@pytest.fixture(scope="session")
def tiny_cloud():
    """An untrained cloud model: fast, deterministic, and shape-correct."""
    net = Network(default_cloud_arch(10), (32, 32, 3), seed=3)
    return CloudModel(net, [f"c{i}" for i in range(10)], "tiny-cloud")


@pytest.fixture(scope="session")
def tiny_encoders():
    return [random_encoder(seed=s, encoder_id=f"enc-{s}") for s in (0, 1)]


@pytest.fixture(scope="session")
def key():
    return generate_key(42, toy_arch())


@pytest.fixture
def images():
    return np.random.default_rng(0).uniform(size=(12, 32, 32, 3))


@pytest.fixture
def trained_pipeline(tiny_cloud, tiny_encoders, key):
    """Pipeline with an IIN fitted on random images (correctness of
    plumbing only, not accuracy)."""
    rng = np.random.default_rng(1)
    x = rng.uniform(size=(40, 32, 32, 3))
    y = np.arange(40) % 4
    pipe = Pipeline(tiny_encoders[:1], key, InProcessCloud(tiny_cloud))
    pipe.run_training_phase(x, y, ["a", "b", "c", "d"], IINConfig(max_epochs=2, seed=0))
    return pipe
