import hashlib
import time

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from owsd.analysis import dead_relu_fraction
from owsd.errors import FormatError, InvalidArchitectureError, ShapeError
from owsd.iin import IINConfig
from owsd.nn import specs as S
from owsd.nn.specs import arch_to_dict
from owsd.pipeline import InProcessCloud, Pipeline
from owsd.scrambler import (
    ScrambledImage,
    ScramblingKey,
    generate_key,
    generator_arch,
    paper_shape_arch,
    scramble,
    scramble_batch,
    scramble_pixels,
    toy_arch,
)


def sha(path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def test_keygen_is_byte_identical(tmp_path):
    generate_key(42).save(tmp_path / "a.owsk")
    generate_key(42).save(tmp_path / "b.owsk")
    assert sha(tmp_path / "a.owsk") == sha(tmp_path / "b.owsk")


def test_distinct_seeds_give_distinct_weights():
    a, b = generate_key(42), generate_key(43)
    diff = max(np.abs(x - y).max() for x, y in zip(a.weights(), b.weights()))
    assert diff > 0
    assert a.key_id != b.key_id


def test_toy_output_shape_and_range(key):
    emb = np.random.default_rng(0).normal(size=(5, 64))
    px = scramble_pixels(key, emb)
    assert px.shape == (5, 32, 32, 3)
    assert px.min() >= 0.0 and px.max() <= 1.0


def test_paper_shape_preset_forward():
    started = time.perf_counter()
    key = generate_key(0, paper_shape_arch())
    out = scramble(key, np.random.default_rng(0).normal(size=2048))
    assert key.embedding_dim == 2048
    assert out.pixels.shape == (256, 256, 3)
    assert time.perf_counter() - started < 5.0


def test_scramble_is_deterministic(key):
    e = np.random.default_rng(1).normal(size=64)
    a, b = scramble(key, e), scramble(key, e)
    assert isinstance(a, ScrambledImage) and a.key_id == key.key_id
    assert np.array_equal(a.pixels, b.pixels)


def test_batch_matches_single(key):
    e = np.random.default_rng(2).normal(size=(3, 64))
    batch = scramble_batch(key, e)
    for i in range(3):
        # BLAS kernels depend on the batch size, so only round-off may differ
        np.testing.assert_allclose(batch[i].pixels, scramble(key, e[i]).pixels, rtol=0, atol=1e-12)


def test_serialization_round_trip_is_bit_exact(tmp_path, key):
    key.save(tmp_path / "k.owsk")
    back = ScramblingKey.load(tmp_path / "k.owsk")
    assert back.key_id == key.key_id and back.seed == key.seed and back.arch == key.arch
    e = np.random.default_rng(3).normal(size=(4, 64))
    assert np.array_equal(scramble_pixels(back, e), scramble_pixels(key, e))
    assert back.to_bytes() == key.to_bytes()


def test_owsk_header_layout(key):
    data = key.to_bytes()
    assert data[:4] == b"OWSK"
    assert int.from_bytes(data[4:8], "little") == 1
    assert int.from_bytes(data[8:16], "little") == 42
    n = int.from_bytes(data[16:20], "little")
    assert data[20 : 20 + n].decode() == key.key_id


def test_corrupted_key_file(key):
    data = key.to_bytes()
    with pytest.raises(FormatError):
        ScramblingKey.from_bytes(b"OWSE" + data[4:])
    with pytest.raises(FormatError):
        ScramblingKey.from_bytes(data[:-10])


def test_key_unchanged_by_use_and_iin_training(key, tiny_cloud, tiny_encoders):
    before = key.to_bytes()
    rng = np.random.default_rng(0)
    for _ in range(3):
        scramble_pixels(key, rng.normal(size=(2, 64)))
    pipe = Pipeline(tiny_encoders[:1], key, InProcessCloud(tiny_cloud))
    pipe.run_training_phase(rng.uniform(size=(20, 32, 32, 3)), np.arange(20) % 2, None, IINConfig(max_epochs=2))
    assert key.to_bytes() == before


def test_embedding_dimension_mismatch(key):
    with pytest.raises(ShapeError):
        scramble(key, np.zeros(63))


@pytest.mark.parametrize(
    "layers,shape",
    [
        ([S.dense(12), S.tanh()], (4,)),  # output not an image
        ([S.dense(48), S.reshape(4, 4, 3)], (4,)),  # no final tanh
        ([S.dense(48), S.reshape(4, 4, 3), S.batchnorm(), S.tanh()], (4,)),  # not static
        ([S.dense(48), S.reshape(4, 4, 4), S.tanh()], (4,)),  # reshape does not compose
    ],
)
def test_invalid_architectures(layers, shape):
    with pytest.raises(InvalidArchitectureError):
        generate_key(0, arch_to_dict(shape, layers))


def test_default_toy_arch_layout():
    kinds = [l["kind"] for l in toy_arch()["layers"]]
    assert kinds == ["dense", "reshape", "relu", "deconv2d", "relu", "deconv2d", "relu", "deconv2d", "tanh"]
    assert generate_key(0, generator_arch(16, (2, 2, 8), (4,), 1)).image_shape == (8, 8, 1)


@settings(max_examples=25, deadline=None)
@given(arrays(np.float64, 64, elements=st.floats(-1e6, 1e6, allow_nan=False)))
def test_output_in_unit_interval_for_any_finite_embedding(e):
    px = scramble(generate_key(5), e).pixels
    assert px.min() >= 0.0 and px.max() <= 1.0


def test_dead_relu_all_positive_weights_is_zero():
    key = generate_key(0, generator_arch(8, (2, 2, 4), (4,), 3))
    for p in key.net.parameters():
        p.value = np.abs(p.value) + 0.01
    emb = np.random.default_rng(0).uniform(size=(10, 8))
    assert dead_relu_fraction(key, emb) == 0.0


def test_dead_relu_huge_negative_bias_is_one():
    key = generate_key(0, generator_arch(8, (2, 2, 4), (4,), 3))
    for layer in key.net.layers:
        if "b" in layer.params:
            layer.params["b"].value = np.full_like(layer.params["b"].value, -1e6)
    emb = np.random.default_rng(0).normal(size=(10, 8))
    assert dead_relu_fraction(key, emb) == 1.0


def test_dead_relu_on_random_embeddings_is_a_fraction(key):
    frac = dead_relu_fraction(key, np.random.default_rng(0).normal(size=(100, 64)))
    assert 0.0 < frac < 1.0
