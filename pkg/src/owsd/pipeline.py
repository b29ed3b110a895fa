"""End-to-end orchestration: encode, scramble, query the cloud, translate.

Only :class:`~owsd.scrambler.ScrambledImage` values ever cross the cloud
interface; the clients below refuse anything else.
"""

from __future__ import annotations

import json
import os
import tempfile
import threading
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from .cloud import CloudModel
from .encoder import EncoderModel
from .errors import BudgetExhaustedError, ShapeError, StaleIINError
from .iin import IINConfig, IINModel, iin_predict, train_iin
from .scrambler import ScrambledImage, ScramblingKey, generate_key, scramble_batch

DEFAULT_ATTACK_BOUND = 13_500
DEFAULT_IIN_COST = 4_500
DEFAULT_LIMIT = DEFAULT_ATTACK_BOUND - DEFAULT_IIN_COST  # 9000


class KeyBudget:
    """Submission counter for one key with an atomic check-and-reserve.

    ``reserve(n)`` claims ``n`` submissions before they are sent. Leaving
    the context normally commits them; an exception releases the claim, so
    failed submissions are never charged. Committed counts only grow.
    """

    def __init__(
        self,
        key_id: str,
        limit: int = DEFAULT_LIMIT,
        submissions_used: int = 0,
        attack_bound: int = DEFAULT_ATTACK_BOUND,
        iin_cost: int = DEFAULT_IIN_COST,
        state_path: str | os.PathLike | None = None,
    ):
        if limit < 1:
            raise ValueError("limit must be positive")
        if not 0 <= submissions_used <= limit:
            raise ValueError("submissions_used must lie in [0, limit]")
        self.key_id = key_id
        self.limit = limit
        self.submissions_used = submissions_used
        self.attack_bound = attack_bound
        self.iin_cost = iin_cost
        self.state_path = Path(state_path) if state_path else None
        self._reserved = 0
        self._lock = threading.Lock()

    @property
    def remaining(self) -> int:
        return self.limit - self.submissions_used - self._reserved

    @contextmanager
    def reserve(self, n: int):
        """Claim ``n`` submissions; yields a :class:`Reservation`.

        On normal exit all ``n`` are charged. If the block raises, only the
        ``reservation.sent`` submissions that actually reached the cloud are.
        """
        if n < 0:
            raise ValueError("cannot reserve a negative number of submissions")
        with self._lock:
            left = self.limit - self.submissions_used - self._reserved
            if n > left:
                raise BudgetExhaustedError(
                    f"key {self.key_id}: {n} submission(s) requested, {left} of {self.limit} left"
                )
            self._reserved += n
        ticket = Reservation(n)
        try:
            yield ticket
        except BaseException:
            self._settle(n, min(ticket.sent, n))
            raise
        self._settle(n, n)

    def _settle(self, reserved: int, charged: int) -> None:
        with self._lock:
            self._reserved -= reserved
            if charged:
                self.submissions_used += charged
                self._persist()

    def _persist(self) -> None:
        if self.state_path is None:
            return
        payload = json.dumps({"key_id": self.key_id, "submissions_used": self.submissions_used})
        self.state_path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=self.state_path.parent, prefix=".budget-")
        with os.fdopen(fd, "w") as fh:
            fh.write(payload)
        os.replace(tmp, self.state_path)

    @classmethod
    def from_state(cls, key_id: str, state_path, limit: int = DEFAULT_LIMIT) -> "KeyBudget":
        """Resume from a state file if it belongs to ``key_id``; start fresh otherwise."""
        used = 0
        path = Path(state_path)
        if path.exists():
            state = json.loads(path.read_text())
            if state.get("key_id") == key_id:
                used = min(int(state["submissions_used"]), limit)
        return cls(key_id, limit=limit, submissions_used=used, state_path=path)

    def to_dict(self) -> dict:
        return {"key_id": self.key_id, "submissions_used": self.submissions_used, "limit": self.limit}


@dataclass
class Reservation:
    size: int
    sent: int = 0


class CloudClient(Protocol):
    model_id: str
    n_labels: int

    def submit(self, images: Sequence[ScrambledImage]) -> np.ndarray: ...


def _require_scrambled(images) -> np.ndarray:
    for im in images:
        if not isinstance(im, ScrambledImage):
            raise TypeError(f"only ScrambledImage values may be sent to the cloud, got {type(im).__name__}")
    return np.stack([im.pixels for im in images]) if len(images) else np.empty((0,))


class InProcessCloud:
    """Cloud client backed by a local :class:`CloudModel`."""

    def __init__(self, model: CloudModel):
        self.model = model
        self.model_id = model.model_id
        self.n_labels = model.n_labels
        self.request_count = 0
        self._lock = threading.Lock()

    def submit(self, images: Sequence[ScrambledImage]) -> np.ndarray:
        pixels = _require_scrambled(images)
        with self._lock:
            self.request_count += len(images)
        if not len(images):
            return np.empty((0, self.n_labels))
        return self.model.classify_batch(pixels)


@dataclass
class PipelineConfig:
    """Artifact references for a pipeline (the CLI and gateway load these)."""

    encoder_paths: list[str]
    key_path: str
    cloud: str  # model path or http(s) URL
    iin_path: str | None = None
    label_names: list[str] | None = None
    budget_limit: int = DEFAULT_LIMIT
    state_path: str | None = None


class Pipeline:
    """Encoders, a scrambling key (or one per encoder), a cloud client and an IIN.

    Args:
        encoders: ordered ensemble; the first one supplies the IIN embedding.
        key: a shared key, or a list with one key per encoder.
        cloud: a client exposing ``submit``.
        iin: an already-trained inference network, if any.
        budget_limit: per-key submission limit.
    """

    def __init__(
        self,
        encoders: Sequence[EncoderModel],
        key: ScramblingKey | Sequence[ScramblingKey],
        cloud: CloudClient,
        iin: IINModel | None = None,
        budget_limit: int = DEFAULT_LIMIT,
        budgets: dict[str, KeyBudget] | None = None,
    ):
        if not encoders:
            raise ValueError("a pipeline needs at least one encoder")
        ids = [e.encoder_id for e in encoders]
        if len(set(ids)) != len(ids):
            raise ValueError("encoder ids must be distinct")
        if cloud.model_id in ids:
            raise ValueError("the cloud model must not share an id with an encoder")
        self.encoders = list(encoders)
        keys = list(key) if isinstance(key, (list, tuple)) else [key] * len(encoders)
        if len(keys) != len(encoders):
            raise ValueError("give one key, or one key per encoder")
        for enc, k in zip(self.encoders, keys):
            if k.embedding_dim != enc.embedding_dim:
                raise ShapeError(
                    f"key {k.key_id} takes {k.embedding_dim}-d embeddings, encoder {enc.encoder_id} emits {enc.embedding_dim}"
                )
        self.keys = keys
        self.cloud = cloud
        self.iin = iin
        self.budget_limit = budget_limit
        self.budgets = budgets or {}
        for k in keys:
            self.budgets.setdefault(k.key_id, KeyBudget(k.key_id, limit=budget_limit))

    @property
    def n_encoders(self) -> int:
        return len(self.encoders)

    @property
    def key(self) -> ScramblingKey:
        return self.keys[0]

    @property
    def budget(self) -> KeyBudget:
        return self.budgets[self.keys[0].key_id]

    def binding(self) -> dict:
        return {
            "key_ids": [k.key_id for k in self.keys],
            "encoder_ids": [e.encoder_id for e in self.encoders],
            "cloud_model_id": self.cloud.model_id,
        }

    def _charges(self, n_images: int) -> dict[str, int]:
        charges: dict[str, int] = {}
        for k in self.keys:
            charges[k.key_id] = charges.get(k.key_id, 0) + n_images
        return charges

    @contextmanager
    def _reserve(self, n_images: int):
        """Reservations for every key in use, keyed by key id."""
        charges = self._charges(n_images)
        # several keys: nest reservations so a failure settles all of them
        with _nested([self.budgets[k].reserve(n) for k, n in charges.items()]) as tickets:
            yield dict(zip(charges, tickets))

    def query(self, images: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
        """Embed ``images`` with every encoder, scramble, and submit.

        Returns the first encoder's embeddings and one array of cloud
        vectors per encoder. The budget is charged before anything is sent
        and refunded if the submission fails.
        """
        images = np.asarray(images, dtype=np.float64)
        if images.ndim == 3:
            images = images[None]
        embeddings = [enc.encode_batch(images) for enc in self.encoders]
        scrambled = [scramble_batch(k, e) for k, e in zip(self.keys, embeddings)]
        vectors = []
        with self._reserve(len(images)) as tickets:
            for key, batch in zip(self.keys, scrambled):
                try:
                    vectors.append(self.cloud.submit(batch))
                except Exception as exc:
                    tickets[key.key_id].sent += getattr(exc, "delivered", 0)
                    raise
                tickets[key.key_id].sent += len(batch)
        return embeddings[0], vectors

    def run_training_phase(
        self,
        images: np.ndarray,
        labels: np.ndarray,
        label_names: Sequence[str] | None = None,
        config: IINConfig | None = None,
    ) -> IINModel:
        """Scramble the labelled set, collect cloud vectors, and train the IIN."""
        embeddings, vectors = self.query(images)
        self.iin = train_iin(embeddings, vectors, labels, config, label_names, binding=self.binding())
        return self.iin

    def _check_iin(self) -> IINModel:
        if self.iin is None:
            raise StaleIINError("no inference network has been trained for this pipeline")
        if self.iin.meta.get("key_ids") != [k.key_id for k in self.keys]:
            raise StaleIINError("the inference network was trained with a different key; retrain it")
        if self.iin.meta.get("encoder_ids", [e.encoder_id for e in self.encoders]) != [
            e.encoder_id for e in self.encoders
        ]:
            raise StaleIINError("the inference network was trained with a different encoder ensemble")
        expected = self.encoders[0].embedding_dim + self.n_encoders * self.cloud.n_labels
        if self.iin.input_dim != expected:
            raise ShapeError(f"IIN input is {self.iin.input_dim}-d, pipeline produces {expected}")
        return self.iin

    def infer_batch(self, images: np.ndarray) -> np.ndarray:
        iin = self._check_iin()
        embeddings, vectors = self.query(images)
        return iin_predict(iin, embeddings, vectors)

    def infer(self, image: np.ndarray) -> np.ndarray:
        """Label distribution for a single ``H x W x C`` image."""
        return self.infer_batch(np.asarray(image)[None])[0]

    def rotate_key(self, new_seed: int) -> ScramblingKey:
        """Fresh key(s) of the same architecture, fresh budget, IIN marked stale."""
        new_keys = []
        seen: dict[str, ScramblingKey] = {}
        for i, k in enumerate(self.keys):
            if k.key_id not in seen:
                seen[k.key_id] = generate_key(new_seed + len(seen), k.arch)
            new_keys.append(seen[k.key_id])
        old_state = {kid: b.state_path for kid, b in self.budgets.items()}
        state_path = next(iter(old_state.values()), None)
        self.keys = new_keys
        self.budgets = {
            k.key_id: KeyBudget(k.key_id, limit=self.budget_limit, state_path=state_path) for k in new_keys
        }
        self.budget._persist()
        return self.keys[0]


@contextmanager
def _nested(managers):
    if not managers:
        yield []
        return
    with managers[0] as first:
        with _nested(managers[1:]) as rest:
            yield [first, *rest]
