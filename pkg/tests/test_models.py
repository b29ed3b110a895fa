"""Cloud classifier and encoder: contracts, containers, and (with the shared
world) the learnability floors."""

import numpy as np
import pytest

from owsd.cloud import CloudConfig, CloudModel, holdout_split, train_cloud
from owsd.datasets import generate_synthetic
from owsd.encoder import (
    EncoderConfig,
    EncoderModel,
    encode,
    paper_shape_encoder,
    random_encoder,
    train_encoder,
)
from owsd.errors import DatasetError, FormatError, ShapeError
from owsd.iin import IINConfig
from owsd.pipeline import InProcessCloud, Pipeline


@pytest.fixture(scope="module")
def small_data():
    return generate_synthetic(4, 20, 32, seed=3)


def test_cloud_vector_is_a_distribution(tiny_cloud):
    noise = np.random.default_rng(0).uniform(size=(32, 32, 3))
    v = tiny_cloud.classify(noise)
    assert len(v) == 10 and v.model_id == "tiny-cloud"
    assert v.probs.min() >= 0 and abs(v.probs.sum() - 1) < 1e-6
    assert np.array_equal(v.probs, tiny_cloud.classify(noise).probs)


def test_cloud_shape_mismatch(tiny_cloud):
    with pytest.raises(ShapeError):
        tiny_cloud.classify(np.zeros((16, 16, 3)))
    with pytest.raises(ShapeError):
        tiny_cloud.classify_batch(np.zeros((2, 32, 32, 1)))


def test_cloud_container_round_trip(tmp_path, tiny_cloud):
    tiny_cloud.save(tmp_path / "c.owsc")
    back = CloudModel.load(tmp_path / "c.owsc")
    assert (tmp_path / "c.owsc").read_bytes()[:4] == b"OWSC"
    assert back.label_names == tiny_cloud.label_names and back.model_id == "tiny-cloud"
    x = np.random.default_rng(1).uniform(size=(3, 32, 32, 3))
    assert np.array_equal(back.classify_batch(x), tiny_cloud.classify_batch(x))
    with pytest.raises(FormatError):
        EncoderModel.from_bytes(tiny_cloud.to_bytes())


def test_train_cloud_runs_and_records_floor(small_data, caplog):
    model = train_cloud(small_data, CloudConfig(epochs=1, accuracy_floor=0.99))
    assert model.n_labels == 4
    assert set(model.meta) >= {"holdout_top1", "floor_met", "epochs_run"}
    if not model.meta["floor_met"]:
        assert "below the floor" in caplog.text


def test_train_cloud_too_small():
    ds = generate_synthetic(2, 20, 32).take(np.r_[0:5, 20:40])
    with pytest.raises(DatasetError):
        train_cloud(ds, CloudConfig(epochs=1))


def test_holdout_split_is_stratified():
    labels = np.repeat(np.arange(3), 20)
    tr, ho = holdout_split(3, labels, 0.1, seed=0)
    assert np.bincount(labels[ho]).tolist() == [2, 2, 2]
    assert not set(tr) & set(ho) and len(tr) + len(ho) == 60


def test_encoder_shape_and_determinism():
    enc = random_encoder(embedding_dim=24, seed=1)
    zero = np.zeros((32, 32, 3))
    a, b = encode(enc, zero), encode(enc, zero)
    assert a.shape == (24,) and np.isfinite(a).all()
    assert np.array_equal(a, b)
    batch = enc.encode_batch(np.random.default_rng(0).uniform(size=(5, 32, 32, 3)))
    assert batch.shape == (5, 24)


def test_encoder_shape_mismatch():
    with pytest.raises(ShapeError):
        encode(random_encoder(), np.zeros((28, 28, 3)))


def test_paper_shape_encoder_dimension():
    assert encode(paper_shape_encoder(), np.zeros((32, 32, 3))).shape == (2048,)


def test_encoder_container_round_trip(tmp_path):
    enc = random_encoder(seed=4, encoder_id="enc-x")
    enc.save(tmp_path / "e.owse")
    back = EncoderModel.load(tmp_path / "e.owse")
    assert back.encoder_id == "enc-x" and back.trained_on == "random"
    img = np.random.default_rng(2).uniform(size=(32, 32, 3))
    assert np.array_equal(encode(back, img), encode(enc, img))


def test_train_encoder_drops_head(small_data):
    enc = train_encoder(small_data, EncoderConfig(embedding_dim=16, width=4, epochs=1))
    assert enc.embedding_dim == 16
    assert enc.net.layers[-1].kind == "relu"
    assert "head_holdout_top1" in enc.meta


def test_train_encoder_artifact_is_checksum_stable(small_data):
    cfg = EncoderConfig(embedding_dim=16, width=4, epochs=1, seed=3)
    a, b = train_encoder(small_data, cfg), train_encoder(small_data, cfg)
    assert "wall_clock_s" in a.meta
    assert a.to_bytes() == b.to_bytes()
    assert "wall_clock_s" not in EncoderModel.from_bytes(a.to_bytes()).meta


def test_train_encoder_too_small():
    ds = generate_synthetic(2, 20, 32).take(np.r_[0:9, 20:40])
    with pytest.raises(DatasetError):
        train_encoder(ds, EncoderConfig(epochs=1))


def test_encoder_and_cloud_untouched_by_iin_training(tiny_cloud, tiny_encoders, key):
    before = (tiny_encoders[0].net.fingerprint(), tiny_cloud.net.fingerprint())
    pipe = Pipeline(tiny_encoders[:1], key, InProcessCloud(tiny_cloud))
    rng = np.random.default_rng(0)
    pipe.run_training_phase(rng.uniform(size=(16, 32, 32, 3)), np.arange(16) % 2, None, IINConfig(max_epochs=2))
    assert (tiny_encoders[0].net.fingerprint(), tiny_cloud.net.fingerprint()) == before


# -- learnability on the shared world -----------------------------------------


@pytest.mark.slow
def test_cloud_meets_accuracy_floor(world):
    ev = world.dataset.split("eval").restrict(world.config.cloud_labels)
    acc = np.mean(world.cloud.classify_batch(ev.images).argmax(1) == ev.labels)
    assert world.cloud.meta["floor_met"]
    assert acc >= 0.7


@pytest.mark.slow
def test_encoder_head_beats_chance(world):
    for enc in world.encoders:
        assert enc.meta["head_holdout_top1"] > 0.5


@pytest.mark.slow
def test_embeddings_of_different_classes_differ(world):
    ev = world.dataset.split("eval")
    a = encode(world.encoders[0], ev.images[ev.labels == 0][0])
    b = encode(world.encoders[0], ev.images[ev.labels == 7][0])
    cos = a @ b / (np.linalg.norm(a) * np.linalg.norm(b))
    assert cos < 1 - 1e-6


@pytest.mark.slow
def test_scrambled_argmax_near_chance(world, key):
    ev = world.dataset.split("eval").restrict(world.config.cloud_labels)
    pipe = Pipeline(world.encoders[:1], key, InProcessCloud(world.cloud))
    _, (vec,) = pipe.query(ev.images)
    assert np.mean(vec.argmax(1) == ev.labels) <= 2 / world.cloud.n_labels
