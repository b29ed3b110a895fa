import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from owsd.errors import DatasetError, ShapeError
from owsd.iin import (
    IINConfig,
    IINModel,
    assemble_inputs,
    iin_predict,
    topk_accuracy,
    train_iin,
    validation_split,
)


def separable(n_per_class=60, e=8, v=3, seed=0):
    """Two labels, clusters at -2 and +2 along every embedding axis."""
    rng = np.random.default_rng(seed)
    y = np.repeat([0, 1], n_per_class)
    emb = rng.normal(scale=0.5, size=(len(y), e)) + np.where(y[:, None] == 1, 2.0, -2.0)
    vec = rng.dirichlet(np.ones(v), size=len(y))
    return emb, [vec], y


def test_separable_fixture_reaches_perfect_validation():
    emb, vecs, y = separable()
    model = train_iin(emb, vecs, y, IINConfig(max_epochs=40, seed=0))
    _, va = validation_split(y, 0.1, np.random.default_rng(0))
    probs = iin_predict(model, emb[va], [vecs[0][va]])
    assert topk_accuracy(probs, y[va], 1) == 1.0
    assert model.meta["epochs_run"] <= 40


def test_input_dim_formula():
    rng = np.random.default_rng(0)
    y = np.arange(30) % 10
    model = train_iin(rng.normal(size=(30, 64)), [rng.dirichlet(np.ones(10), 30)], y, IINConfig(max_epochs=1))
    assert model.input_dim == 74 and model.n_labels == 10


def test_paper_scale_input_dim():
    rng = np.random.default_rng(0)
    y = np.arange(20) % 2
    model = train_iin(
        rng.normal(size=(20, 2048)),
        [rng.dirichlet(np.ones(1000), 20)],
        y,
        IINConfig(max_epochs=1, hidden_width=8),
    )
    assert model.input_dim == 3048


def test_output_is_distribution_and_deterministic():
    emb, vecs, y = separable()
    model = train_iin(emb, vecs, y, IINConfig(max_epochs=2))
    a = iin_predict(model, emb[0], [vecs[0][0]])
    b = iin_predict(model, emb[0], [vecs[0][0]])
    assert a.shape == (2,) and np.array_equal(a, b)
    assert abs(a.sum() - 1) < 1e-6 and a.min() >= 0


def test_retraining_reproduces_weights():
    emb, vecs, y = separable()
    a = train_iin(emb, vecs, y, IINConfig(max_epochs=3, seed=5))
    b = train_iin(emb, vecs, y, IINConfig(max_epochs=3, seed=5))
    assert a.net.fingerprint() == b.net.fingerprint()
    c = train_iin(emb, vecs, y, IINConfig(max_epochs=3, seed=6))
    assert c.net.fingerprint() != a.net.fingerprint()


def test_best_checkpoint_is_returned():
    emb, vecs, y = separable(seed=1)
    # flip some labels so validation loss is noisy and early stopping matters
    y = y.copy()
    y[::7] = 1 - y[::7]
    model = train_iin(emb, vecs, y, IINConfig(max_epochs=25, patience=3, learning_rate=5e-3))
    losses = model.meta["val_losses"]
    assert model.meta["best_val_loss"] == min(losses)
    _, va = validation_split(y, 0.1, np.random.default_rng(0))
    probs = iin_predict(model, emb[va], [vecs[0][va]])
    loss = -np.mean(np.log(probs[np.arange(len(va)), y[va]]))
    assert loss == pytest.approx(model.meta["best_val_loss"], rel=1e-9)


def test_metrics_log_written(tmp_path):
    emb, vecs, y = separable()
    path = tmp_path / "metrics.json"
    train_iin(emb, vecs, y, IINConfig(max_epochs=2, metrics_path=str(path)))
    log = json.loads(path.read_text())
    assert len(log["history"]) == 2
    assert {"epoch", "train_loss", "val_loss", "val_accuracy"} <= set(log["history"][0])


def test_container_round_trip(tmp_path):
    emb, vecs, y = separable()
    model = train_iin(emb, vecs, y, IINConfig(max_epochs=2), label_names=["neg", "pos"])
    model.save(tmp_path / "m.owsi")
    assert (tmp_path / "m.owsi").read_bytes()[:4] == b"OWSI"
    back = IINModel.load(tmp_path / "m.owsi")
    assert back.label_names == ["neg", "pos"] and back.vector_dims == [3]
    assert np.array_equal(iin_predict(back, emb, vecs), iin_predict(model, emb, vecs))


def test_single_label_rejected():
    emb, vecs, _ = separable()
    with pytest.raises(DatasetError):
        train_iin(emb, vecs, np.zeros(len(emb), dtype=int), IINConfig(max_epochs=1))


def test_inconsistent_dimensions_rejected():
    emb, vecs, y = separable()
    with pytest.raises(ShapeError):
        train_iin(emb, [vecs[0][:-1]], y)
    with pytest.raises(ShapeError):
        train_iin(emb, vecs, y[:-1])
    model = train_iin(emb, vecs, y, IINConfig(max_epochs=1))
    with pytest.raises(ShapeError):
        iin_predict(model, emb[0], [np.ones(4) / 4])


def test_assemble_inputs_order():
    x = assemble_inputs(np.array([[1.0, 2.0]]), [np.array([[3.0]]), np.array([[4.0, 5.0]])])
    assert x.tolist() == [[1.0, 2.0, 3.0, 4.0, 5.0]]


def test_validation_split_is_stratified():
    y = np.repeat(np.arange(4), 10)
    tr, va = validation_split(y, 0.1, np.random.default_rng(0))
    assert np.bincount(y[va], minlength=4).tolist() == [1, 1, 1, 1]
    assert len(set(tr) | set(va)) == 40


def test_invalid_config():
    with pytest.raises(ValueError):
        IINConfig(learning_rate=0)
    with pytest.raises(ValueError):
        IINConfig(max_epochs=0)


# -- top-k -------------------------------------------------------------------


def test_topk_one_hot_is_perfect():
    y = np.array([0, 3, 2, 1])
    assert topk_accuracy(np.eye(4)[y], y, 1) == 1.0


def test_topk_uniform_ties_by_index():
    # ties go to the lower index: labels 0-4 are in the top 5, 5-9 are not
    y = np.repeat(np.arange(10), 30)
    probs = np.full((300, 10), 0.1)
    assert topk_accuracy(probs, y, 5) == 0.5
    assert topk_accuracy(probs[y < 5], y[y < 5], 5) == 1.0
    assert topk_accuracy(probs[y >= 5], y[y >= 5], 5) == 0.0


def test_topk_full_k_is_one():
    probs = np.random.default_rng(0).dirichlet(np.ones(6), 20)
    assert topk_accuracy(probs, np.arange(20) % 6, 6) == 1.0


def test_topk_exact_small_case():
    probs = np.array([[0.1, 0.6, 0.3], [0.5, 0.2, 0.3], [0.2, 0.2, 0.6]])
    truth = np.array([2, 2, 1])
    # ranks of the true label: 2nd, 2nd, 3rd (tie with label 0 goes to 0)
    assert topk_accuracy(probs, truth, 1) == 0.0
    assert topk_accuracy(probs, truth, 2) == pytest.approx(2 / 3)


@pytest.mark.parametrize("k", [0, 4])
def test_topk_k_out_of_range(k):
    with pytest.raises(ValueError):
        topk_accuracy(np.full((2, 3), 1 / 3), np.array([0, 1]), k)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (12, 7), elements=st.floats(0, 1)), st.integers(1, 6))
def test_topk_monotone_in_k(p, k):
    truth = np.arange(12) % 7
    assert topk_accuracy(p, truth, k + 1) >= topk_accuracy(p, truth, k)
