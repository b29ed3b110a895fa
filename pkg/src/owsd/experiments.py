"""Desk-scale experiment harness: a shared "world" and the five use-cases.

The world is everything the organization and the cloud hold before any key
exists: one synthetic dataset, a cloud classifier trained on the first
``n_cloud_labels`` classes, and one or more encoders. Use-cases then vary
the key, the IIN, the confidential label set and the IIN training size per
seed while the world stays fixed.
"""

from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .cloud import CloudConfig, CloudModel, train_cloud
from .datasets import LabeledDataset, generate_synthetic
from .encoder import EncoderConfig, EncoderModel, train_encoder
from .errors import DatasetError
from .iin import IINConfig, topk_accuracy
from .pipeline import InProcessCloud, Pipeline
from .scrambler import generate_key, toy_arch

log = logging.getLogger(__name__)

SPLITS = ("cloud_train", "encoder_train", "iin_train", "eval", "attack")


@dataclass
class WorldConfig:
    n_cloud_labels: int = 10
    n_transfer_labels: int = 10
    image_size: int = 32
    data_seed: int = 7
    split_counts: dict = field(
        default_factory=lambda: {"cloud_train": 200, "encoder_train": 100, "iin_train": 50, "eval": 50, "attack": 100}
    )
    cloud_epochs: int = 12
    encoder_epochs: int = 10
    encoder_widths: tuple = (16, 12)
    embedding_dim: int = 64

    @property
    def n_classes(self) -> int:
        return self.n_cloud_labels + self.n_transfer_labels

    @property
    def cloud_labels(self) -> list[int]:
        return list(range(self.n_cloud_labels))

    @property
    def transfer_labels(self) -> list[int]:
        return list(range(self.n_cloud_labels, self.n_classes))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["encoder_widths"] = list(self.encoder_widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "WorldConfig":
        d = dict(d)
        if "encoder_widths" in d:
            d["encoder_widths"] = tuple(d["encoder_widths"])
        return cls(**d)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def make_dataset(config: WorldConfig) -> LabeledDataset:
    per_class = sum(config.split_counts.values())
    ds = generate_synthetic(config.n_classes, per_class, config.image_size, seed=config.data_seed)
    return ds.assign_splits(dict(config.split_counts), seed=config.data_seed)


@dataclass
class World:
    config: WorldConfig
    dataset: LabeledDataset
    cloud: CloudModel
    encoders: list[EncoderModel]

    def save(self, directory) -> Path:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        self.cloud.save(d / "cloud.owsc")
        for i, enc in enumerate(self.encoders):
            enc.save(d / f"encoder-{i}.owse")
        (d / "world.json").write_text(json.dumps({"config": self.config.to_dict(), "n_encoders": len(self.encoders)}, indent=2))
        return d

    @classmethod
    def load(cls, directory) -> "World":
        d = Path(directory)
        meta_path = d / "world.json"
        if not meta_path.exists():
            raise FileNotFoundError(f"{meta_path} not found; build the world first")
        meta = json.loads(meta_path.read_text())
        config = WorldConfig.from_dict(meta["config"])
        encoders = [EncoderModel.load(d / f"encoder-{i}.owse") for i in range(meta["n_encoders"])]
        return cls(config, make_dataset(config), CloudModel.load(d / "cloud.owsc"), encoders)


def build_world(config: WorldConfig | None = None, cache_dir=None) -> World:
    """Train (or reload from ``cache_dir``) the cloud model and encoders."""
    config = config or WorldConfig()
    if cache_dir is not None:
        cached = Path(cache_dir) / config.digest()
        if (cached / "world.json").exists():
            log.info("reusing world from %s", cached)
            return World.load(cached)
    started = time.perf_counter()
    ds = make_dataset(config)
    cloud_set = ds.split("cloud_train").restrict(config.cloud_labels)
    cloud = train_cloud(cloud_set, CloudConfig(epochs=config.cloud_epochs, seed=0))
    enc_set = ds.split("encoder_train")
    encoders = [
        train_encoder(
            enc_set,
            EncoderConfig(
                embedding_dim=config.embedding_dim,
                width=w,
                epochs=config.encoder_epochs,
                seed=i,
                encoder_id=f"encoder-{i}",
            ),
            tag="encoder_train",
        )
        for i, w in enumerate(config.encoder_widths)
    ]
    world = World(config, ds, cloud, encoders)
    log.info("world built in %.1f s", time.perf_counter() - started)
    if cache_dir is not None:
        world.save(Path(cache_dir) / config.digest())
    return world


@dataclass
class ExperimentConfig:
    seeds: tuple = (0, 1, 2)
    label_counts: tuple = (2, 5, 10)  # use-case 2
    ensemble_sizes: tuple = (1, 2)  # use-case 4
    images_per_label: tuple = (5, 15, 35, 45)  # use-case 5
    iin: IINConfig = field(default_factory=IINConfig)
    out_dir: str | None = None


def _score(probs: np.ndarray, truth: np.ndarray, cloud_targets: np.ndarray | None) -> dict:
    n = probs.shape[1]
    out = {
        "top1_truth": topk_accuracy(probs, truth, 1),
        "top5_truth": topk_accuracy(probs, truth, 5) if n >= 5 else None,
        "top1_cloud": None,
        "top5_cloud": None,
    }
    if cloud_targets is not None:
        out["top1_cloud"] = topk_accuracy(probs, cloud_targets, 1)
        out["top5_cloud"] = topk_accuracy(probs, cloud_targets, 5) if n >= 5 else None
    return out


def run_trial(
    world: World,
    classes: list[int],
    seed: int,
    n_encoders: int = 1,
    images_per_label: int | None = None,
    iin_config: IINConfig | None = None,
) -> dict:
    """One key, one IIN, one evaluation. Returns scores and bookkeeping."""
    if n_encoders > len(world.encoders):
        raise DatasetError(f"world has {len(world.encoders)} encoders, asked for {n_encoders}")
    train = world.dataset.split("iin_train").restrict(classes)
    if images_per_label is not None:
        train = train.per_class(images_per_label, seed=seed)
    test = world.dataset.split("eval").restrict(classes)
    key = generate_key(seed, toy_arch())
    pipe = Pipeline(world.encoders[:n_encoders], key, InProcessCloud(world.cloud))
    cfg = replace(iin_config or IINConfig(), seed=seed)
    started = time.perf_counter()
    iin = pipe.run_training_phase(train.images, train.labels, train.label_names, cfg)
    train_s = time.perf_counter() - started
    probs = pipe.infer_batch(test.images)
    cloud_targets = None
    in_cloud = [c for c in classes if c < world.cloud.n_labels]
    if len(in_cloud) == len(classes):
        # what the cloud says about the plaintext, restricted to the confidential labels
        plain = world.cloud.classify_batch(test.images)[:, classes]
        cloud_targets = plain.argmax(axis=1)
    return {
        **_score(probs, test.labels, cloud_targets),
        "iin_train_s": train_s,
        "iin_epochs": iin.meta["epochs_run"],
        "submissions_used": pipe.budget.submissions_used,
        "input_dim": iin.input_dim,
    }


METRICS = ("top1_truth", "top5_truth", "top1_cloud", "top5_cloud")


def _aggregate(trials: list[dict]) -> dict:
    out = {"per_seed": {m: [t[m] for t in trials] for m in METRICS}}
    for m in METRICS:
        vals = out["per_seed"][m]
        out[m] = None if any(v is None for v in vals) else float(np.mean(vals))
    out["per_seed"]["iin_train_s"] = [t["iin_train_s"] for t in trials]
    return out


def label_subset(n_labels: int, n_cloud: int, seed: int) -> list[int]:
    """Seeded random subset of the cloud labels (all of them if n equals the total)."""
    if not 2 <= n_labels <= n_cloud:
        raise DatasetError(f"label count {n_labels} must lie in [2, {n_cloud}]")
    if n_labels == n_cloud:
        return list(range(n_cloud))
    rng = np.random.default_rng([seed, n_labels])
    return sorted(int(c) for c in rng.choice(n_cloud, n_labels, replace=False))


SWEEP_PARAM = {1: "n_labels", 2: "n_labels", 3: "n_labels", 4: "n_encoders", 5: "images_per_label"}


def run_use_case(uc: int, world: World, config: ExperimentConfig | None = None) -> dict:
    """Run one use-case over every seed and return its JSON-ready report.

    1: confidential labels equal the cloud's. 2: random subsets of the cloud's
    labels, swept over ``label_counts``. 3: labels the cloud never saw.
    4: ensembles of ``ensemble_sizes`` encoders sharing one key. 5: IIN
    training sets of ``images_per_label`` images per label.
    """
    if uc not in SWEEP_PARAM:
        raise ValueError(f"use-case must be one of 1..5, got {uc}")
    config = config or ExperimentConfig()
    wc = world.config
    started = time.perf_counter()
    if uc == 1:
        values = [wc.n_cloud_labels]
        trial = lambda v, s: run_trial(world, wc.cloud_labels, s, iin_config=config.iin)
    elif uc == 2:
        values = list(config.label_counts)
        trial = lambda v, s: run_trial(world, label_subset(v, wc.n_cloud_labels, s), s, iin_config=config.iin)
    elif uc == 3:
        if not wc.transfer_labels:
            raise DatasetError("use-case 3 needs labels outside the cloud's label set")
        values = [wc.n_transfer_labels]
        trial = lambda v, s: run_trial(world, wc.transfer_labels, s, iin_config=config.iin)
    elif uc == 4:
        values = list(config.ensemble_sizes)
        trial = lambda v, s: run_trial(world, wc.cloud_labels, s, n_encoders=v, iin_config=config.iin)
    else:
        values = list(config.images_per_label)
        trial = lambda v, s: run_trial(world, wc.cloud_labels, s, images_per_label=v, iin_config=config.iin)
    sweep = []
    for v in values:
        trials = [trial(v, s) for s in config.seeds]
        sweep.append({"value": v, **_aggregate(trials)})
    report = {
        "use_case": uc,
        "seeds": list(config.seeds),
        "sweep_param": SWEEP_PARAM[uc],
        "sweep_values": values,
        **{m: [entry[m] for entry in sweep] for m in METRICS},
        "sweep": sweep,
        "chance": [1.0 / (v if SWEEP_PARAM[uc] == "n_labels" else wc.n_cloud_labels) for v in values],
        "wall_clock_s": time.perf_counter() - started,
    }
    if config.out_dir is not None:
        out = Path(config.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"use_case_{uc}.json").write_text(json.dumps(report, indent=2))
        if uc == 5:
            report["plot_path"] = plot_training_curve(report, out / "use_case_5.svg")
    return report


def plot_training_curve(report: dict, path) -> str:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    x = report["sweep_values"]
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    ax.plot(x, report["top1_truth"], "o-", label="top-1 (ground truth)")
    for s, seed in enumerate(report["seeds"]):
        ax.plot(x, [e["per_seed"]["top1_truth"][s] for e in report["sweep"]], ":", color="grey", lw=0.8)
    ax.set_xlabel("IIN training images per label")
    ax.set_ylabel("accuracy")
    ax.set_ylim(0, 1)
    ax.grid(alpha=0.3)
    ax.legend(loc="lower right")
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)
    return str(path)


@dataclass
class AnalysisConfig:
    seed: int = 0
    k: int = 1
    pca_labels: tuple = (0, 6)
    pca_per_label: int = 50
    dead_relu_samples: int = 100
    attack_pairs: int | None = None  # all pairs of the attack split
    out_dir: str | None = None


def scrambled_pairs(world: World, key, split: str = "eval", classes=None):
    """Cloud vectors for plaintext and scrambled versions of ``split``."""
    data = world.dataset.split(split)
    if classes is not None:
        data = data.restrict(classes)
    plain = world.cloud.classify_batch(data.images)
    pipe = Pipeline(world.encoders[:1], key, InProcessCloud(world.cloud))
    _, (scr,) = pipe.query(data.images)
    return plain, scr, data.labels


def run_analysis(world: World, config: AnalysisConfig | None = None, parts=None, attack_config=None) -> dict:
    """Confidentiality report for one key (seeded by ``config.seed``).

    ``parts`` picks a subset of ``entropy``, ``intersection``, ``pca``,
    ``dead-relu`` and ``attack``; all of them by default.
    """
    from . import analysis as A
    from .attack import AttackConfig, run_attack
    from .scrambler import scramble_pixels

    config = config or AnalysisConfig()
    parts = set(parts or ("entropy", "intersection", "pca", "dead-relu", "attack"))
    key = generate_key(config.seed, toy_arch())
    out = Path(config.out_dir) if config.out_dir else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
    report: dict = {"seed": config.seed, "key_id": key.key_id}
    if parts & {"entropy", "intersection"}:
        plain, scr, _ = scrambled_pairs(world, key, classes=world.config.cloud_labels)
        if "entropy" in parts:
            hp, hs = A.entropy(plain), A.entropy(scr)
            report["entropy"] = {
                "mean_plain": float(hp.mean()),
                "mean_scrambled": float(hs.mean()),
                "ratio": float(hs.mean() / hp.mean()) if hp.mean() > 0 else None,
                "max_bits": float(np.log2(plain.shape[1])),
                "pairs": int(len(plain)),
            }
        if "intersection" in parts:
            res = A.intersection_and_reduction(plain, scr, config.k)
            report["intersection"] = {"k": config.k, "rate": res["intersection_rate"], "pairs": res["pairs"]}
            report["reduction"] = res["mean_confidence_reduction"]
    if "pca" in parts:
        labels = list(config.pca_labels)
        plain, scr, y = scrambled_pairs(world, key, classes=labels)
        keep = np.concatenate([np.flatnonzero(y == i)[: config.pca_per_label] for i in range(len(labels))])
        sep = A.separation_report(plain[keep], scr[keep], y[keep], seed=config.seed)
        pca = sep.pop("pca")
        report["pca"] = {**sep, "labels": [world.dataset.label_names[c] for c in labels]}
        if out:
            np.savez(out / "pca_points.npz", points=pca.points, groups=pca.groups, labels=np.tile(y[keep], 2))
            report["pca_points_path"] = str(out / "pca_points.npz")
            report["pca_plot_path"] = _plot_pca(pca, np.tile(y[keep], 2), report["pca"]["labels"], out / "pca.svg")
    if "dead-relu" in parts:
        imgs = world.dataset.split("eval").images[: config.dead_relu_samples]
        frac = A.dead_relu_fraction(key, world.encoders[0].encode_batch(imgs))
        report["dead_relu"] = {"fraction": frac, "samples": len(imgs), "reference": A.PAPER_DEAD_RELU_FRACTION}
    if "attack" in parts:
        data = world.dataset.split("attack")
        scr_imgs = scramble_pixels(key, world.encoders[0].encode_batch(data.images))
        ac = attack_config or AttackConfig(seed=config.seed)
        rep = run_attack(scr_imgs, data.images, config.attack_pairs, ac, out_dir=out)
        report["attack"] = rep.to_dict()
    if out:
        (out / "analysis.json").write_text(json.dumps(report, indent=2))
    return report


def _plot_pca(pca, labels, names, path) -> str:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(4.5, 4))
    markers = {0: "o", 1: "x"}
    for g, kind in ((0, "plaintext"), (1, "scrambled")):
        for i, name in enumerate(names):
            m = (pca.groups == g) & (labels == i)
            ax.scatter(*pca.points[m].T, marker=markers[g], s=14, label=f"{kind}: {name}", alpha=0.7)
    ax.set_xlabel("PC1")
    ax.set_ylabel("PC2")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)
    return str(path)
