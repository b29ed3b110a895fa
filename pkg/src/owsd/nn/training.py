"""Mini-batch training loop shared by every model in the package."""

from __future__ import annotations

import time
from typing import Callable

import numpy as np

from .network import Network, cross_entropy, half_mse
from .optim import Adam


def one_hot(labels: np.ndarray, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((len(labels), n_classes))
    out[np.arange(len(labels)), labels] = 1.0
    return out


def iterate_minibatches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


def train_classifier(
    net: Network,
    x: np.ndarray,
    y: np.ndarray,
    *,
    epochs: int,
    batch_size: int = 64,
    learning_rate: float = 1e-3,
    decay_rate: float = 0.95,
    seed: int = 0,
    validation: tuple[np.ndarray, np.ndarray] | None = None,
    patience: int | None = None,
    on_epoch: Callable[[dict], None] | None = None,
    loss: str = "cross_entropy",
) -> dict:
    """Fit ``net`` to targets ``y`` with ADAM.

    ``loss`` is ``"cross_entropy"`` (one-hot targets, final softmax) or
    ``"mse"`` (regression targets; the validation loss is then the plain
    mean squared error).

    With ``validation`` the weights with the lowest validation loss are
    restored at the end; ``patience`` stops after that many epochs without
    improvement. Returns a dict with per-epoch history and the best epoch.
    """
    rng = np.random.default_rng(seed)
    opt = Adam(net.parameters(), learning_rate=learning_rate, decay_rate=decay_rate)
    history = []
    best_loss, best_epoch, best_state = np.inf, -1, None
    started = time.perf_counter()
    for epoch in range(epochs):
        opt.set_epoch(epoch)
        losses = []
        for idx in iterate_minibatches(len(x), batch_size, rng):
            if len(idx) < 2 and any(l.kind == "batchnorm" for l in net.layers):
                continue
            net.forward(x[idx], training=True, rng=rng)
            losses.append(net.backward(loss, y[idx]) * len(idx))
            opt.step()
        record = {"epoch": epoch, "train_loss": float(np.sum(losses) / len(x)), "lr": opt.effective_lr}
        if validation is not None:
            out = net.predict(validation[0])
            if loss == "cross_entropy":
                val_loss = cross_entropy(out, validation[1])
                record["val_accuracy"] = float(np.mean(out.argmax(1) == validation[1].argmax(1)))
            else:
                val_loss = 2.0 * half_mse(out, validation[1])
            record["val_loss"] = val_loss
            if val_loss < best_loss:
                best_loss, best_epoch, best_state = val_loss, epoch, [a.copy() for a in net.state_arrays()]
        history.append(record)
        if on_epoch is not None:
            on_epoch(record)
        if patience is not None and validation is not None and epoch - best_epoch >= patience:
            break
    if best_state is not None:
        net.load_state_arrays(best_state)
    return {
        "history": history,
        "epochs_run": len(history),
        "best_epoch": best_epoch,
        "best_val_loss": float(best_loss) if validation is not None else None,
        "wall_clock_s": time.perf_counter() - started,
    }
