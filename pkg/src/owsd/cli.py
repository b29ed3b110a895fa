"""Command-line entry point: ``owsd <subcommand> ...``.

Every subcommand accepts ``--seed``, ``--config FILE.json`` (keys are flag
names with dashes or underscores; explicit flags win) and ``--json``.
Exit status is 0 on success, 1 on usage errors (bad flags, missing input
files) and 2 on runtime errors.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

EXIT_USAGE = 1
EXIT_RUNTIME = 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _int_list(text: str) -> list[int]:
    out = []
    for part in text.split(","):
        part = part.strip()
        if "-" in part[1:]:
            lo, hi = part.split("-", 1)
            out.extend(range(int(lo), int(hi) + 1))
        elif part:
            out.append(int(part))
    if not out:
        raise argparse.ArgumentTypeError("expected a comma-separated list of integers")
    return out


def _splits(text: str) -> dict[str, int]:
    out = {}
    for part in text.split(","):
        name, _, n = part.partition("=")
        if not n:
            raise argparse.ArgumentTypeError(f"expected name=count, got {part!r}")
        out[name.strip()] = int(n)
    return out


# -- argument helpers -------------------------------------------------------


def _need_file(args, *flags):
    for flag in flags:
        value = getattr(args, flag.lstrip("-").replace("-", "_"))
        paths = value if isinstance(value, list) else [value]
        for p in paths:
            if p is not None and not str(p).startswith(("http://", "https://")) and not Path(p).exists():
                raise UsageError(f"{flag}: file not found: {p}")


def _need(args, *flags):
    for flag in flags:
        if getattr(args, flag.lstrip("-").replace("-", "_")) is None:
            raise UsageError(f"{flag} is required")


def _emit(args, payload: dict, text: str | None = None):
    if args.json:
        print(json.dumps(payload, indent=2, default=_json_default))
    else:
        print(text if text is not None else json.dumps(payload, indent=2, default=_json_default))


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    return str(o)


def _load_dataset(path):
    from .datasets import LabeledDataset

    return LabeledDataset.load(path)


def _load_cloud(spec: str):
    from .cloud import CloudModel
    from .pipeline import InProcessCloud

    if spec.startswith(("http://", "https://")):
        from .gateway import HttpCloud

        return HttpCloud(spec)
    return InProcessCloud(CloudModel.load(spec))


def _load_image(args) -> np.ndarray:
    if args.image is not None:
        return np.load(args.image).astype(np.float64)
    if args.data is not None:
        ds = _load_dataset(args.data)
        if args.split:
            ds = ds.split(args.split)
        if not 0 <= args.index < len(ds):
            raise UsageError(f"--index {args.index} out of range for {len(ds)} images")
        return ds.images[args.index]
    raise UsageError("give --image FILE.npy or --data FILE.npz [--split NAME] --index I")


def _build_pipeline(args, with_iin: bool):
    from .encoder import EncoderModel
    from .iin import IINModel
    from .pipeline import KeyBudget, Pipeline
    from .scrambler import ScramblingKey

    encoders = [EncoderModel.load(p) for p in args.encoder]
    key = ScramblingKey.load(args.key)
    budgets = None
    if args.state:
        budgets = {key.key_id: KeyBudget.from_state(key.key_id, args.state, limit=args.limit)}
    iin = IINModel.load(args.iin) if with_iin else None
    return Pipeline(encoders, key, _load_cloud(args.cloud), iin, budget_limit=args.limit, budgets=budgets)


# -- subcommands ------------------------------------------------------------


def cmd_gen_data(args):
    from .datasets import generate_synthetic

    _need(args, "--out")
    ds = generate_synthetic(args.n_classes, args.per_class, args.image_size, seed=args.seed, noise=args.noise)
    if args.splits:
        ds.assign_splits(args.splits, seed=args.seed)
    ds.save(args.out)
    payload = {"path": args.out, "images": len(ds), "classes": ds.n_classes, "splits": {k: len(v) for k, v in ds.splits.items()}}
    _emit(args, payload, f"wrote {len(ds)} images ({ds.n_classes} classes) to {args.out}")


def cmd_train_cloud(args):
    from .cloud import CloudConfig, train_cloud

    _need(args, "--data", "--out")
    _need_file(args, "--data")
    ds = _load_dataset(args.data)
    if args.split:
        ds = ds.split(args.split)
    if args.labels:
        ds = ds.restrict(args.labels)
    model = train_cloud(ds, CloudConfig(epochs=args.epochs, learning_rate=args.learning_rate, seed=args.seed, model_id=args.model_id))
    model.save(args.out)
    _emit(args, {"path": args.out, "model_id": model.model_id, **model.meta},
          f"cloud {model.model_id}: holdout top-1 {model.meta['holdout_top1']:.3f} -> {args.out}")


def cmd_train_encoder(args):
    from .encoder import EncoderConfig, train_encoder

    _need(args, "--data", "--out")
    _need_file(args, "--data")
    ds = _load_dataset(args.data)
    if args.split:
        ds = ds.split(args.split)
    cfg = EncoderConfig(embedding_dim=args.embedding_dim, width=args.width, epochs=args.epochs, seed=args.seed, encoder_id=args.encoder_id)
    model = train_encoder(ds, cfg, tag=args.split or "")
    model.save(args.out)
    _emit(args, {"path": args.out, "encoder_id": model.encoder_id, **model.meta},
          f"encoder {model.encoder_id}: head holdout top-1 {model.meta['head_holdout_top1']:.3f} -> {args.out}")


def _arch_for(args):
    from .scrambler import generator_arch, paper_shape_arch, toy_arch

    if args.preset == "paper-shape":
        return paper_shape_arch()
    if args.embedding_dim != 64:
        return generator_arch(args.embedding_dim)
    return toy_arch()


def cmd_keygen(args):
    from .scrambler import generate_key

    _need(args, "--out")
    key = generate_key(args.seed, _arch_for(args))
    key.save(args.out)
    _emit(args, {"path": args.out, "key_id": key.key_id, "seed": key.seed, "fingerprint": key.fingerprint(),
                 "embedding_dim": key.embedding_dim, "image_shape": list(key.image_shape)},
          f"{key.key_id} ({key.embedding_dim} -> {'x'.join(map(str, key.image_shape))}) -> {args.out}")


def cmd_scramble(args):
    from .encoder import EncoderModel, encode
    from .scrambler import ScramblingKey, scramble

    _need(args, "--key", "--encoder", "--out")
    _need_file(args, "--key", "--encoder", "--image", "--data")
    key = ScramblingKey.load(args.key)
    enc = EncoderModel.load(args.encoder[0])
    image = _load_image(args)
    out = scramble(key, encode(enc, image))
    np.save(args.out, out.pixels)
    if args.png:
        from .attack import save_grid

        save_grid(args.png, [image[None], out.pixels[None]], ["original", "scrambled"])
    _emit(args, {"path": args.out, "key_id": out.key_id, "shape": list(out.pixels.shape)},
          f"scrambled image ({out.key_id}) -> {args.out}")


def cmd_train_iin(args):
    from .iin import IINConfig

    _need(args, "--data", "--key", "--encoder", "--cloud", "--out")
    _need_file(args, "--data", "--key", "--encoder", "--cloud")
    ds = _load_dataset(args.data)
    if args.split:
        ds = ds.split(args.split)
    if args.labels:
        ds = ds.restrict(args.labels)
    if args.per_label:
        ds = ds.per_class(args.per_label, seed=args.seed)
    pipe = _build_pipeline(args, with_iin=False)
    cfg = IINConfig(learning_rate=args.learning_rate, max_epochs=args.max_epochs, seed=args.seed, metrics_path=args.metrics)
    iin = pipe.run_training_phase(ds.images, ds.labels, ds.label_names, cfg)
    iin.save(args.out)
    payload = {"path": args.out, "input_dim": iin.input_dim, "labels": iin.label_names, **iin.meta,
               "submissions_used": pipe.budget.submissions_used, "submissions_limit": pipe.budget.limit}
    _emit(args, payload, f"IIN over {iin.n_labels} labels ({iin.meta['epochs_run']} epochs, "
          f"{pipe.budget.submissions_used}/{pipe.budget.limit} submissions) -> {args.out}")


def cmd_infer(args):
    _need(args, "--key", "--encoder", "--cloud", "--iin")
    _need_file(args, "--key", "--encoder", "--cloud", "--iin", "--image", "--data")
    image = _load_image(args)
    pipe = _build_pipeline(args, with_iin=True)
    probs = pipe.infer(image)
    label = pipe.iin.label_names[int(np.argmax(probs))]
    payload = {"label": label, "probabilities": probs, "key_id": pipe.budget.key_id,
               "submissions_used": pipe.budget.submissions_used, "submissions_limit": pipe.budget.limit}
    _emit(args, payload, f"{label} (p={probs.max():.3f}); budget {pipe.budget.submissions_used}/{pipe.budget.limit}")


def _world(args):
    from .experiments import World, WorldConfig, build_world

    if args.world and (Path(args.world) / "world.json").exists():
        return World.load(args.world)
    world = build_world(WorldConfig())
    if args.world:
        world.save(args.world)
    return world


def cmd_run_use_case(args):
    from .experiments import ExperimentConfig, run_use_case
    from .iin import IINConfig

    cfg = ExperimentConfig(seeds=tuple(args.seeds), out_dir=args.out, iin=IINConfig(learning_rate=args.learning_rate))
    if args.labels:
        cfg.label_counts = tuple(args.labels)
    if args.sizes:
        cfg.images_per_label = tuple(args.sizes)
    if args.encoders:
        cfg.ensemble_sizes = tuple(args.encoders)
    report = run_use_case(args.use_case, _world(args), cfg)
    lines = [f"use-case {args.use_case} ({report['sweep_param']}, seeds {report['seeds']})"]
    for v, t1, t5 in zip(report["sweep_values"], report["top1_truth"], report["top5_truth"]):
        lines.append(f"  {v:>4}: top-1 {t1:.3f}" + (f"  top-5 {t5:.3f}" if t5 is not None else ""))
    _emit(args, report, "\n".join(lines))


def cmd_analyze(args):
    from .experiments import AnalysisConfig, run_analysis

    cfg = AnalysisConfig(seed=args.seed, k=args.k, out_dir=args.out, attack_pairs=args.pairs)
    report = run_analysis(_world(args), cfg, parts=[args.what])
    _emit(args, report)


def cmd_rotate_key(args):
    from .pipeline import KeyBudget
    from .scrambler import ScramblingKey, generate_key

    _need(args, "--key", "--out")
    _need_file(args, "--key")
    old = ScramblingKey.load(args.key)
    new = generate_key(args.seed, old.arch)
    if new.key_id == old.key_id:
        raise UsageError("--seed must differ from the current key's seed")
    new.save(args.out)
    if args.state:
        budget = KeyBudget(new.key_id, limit=args.limit, state_path=args.state)
        budget._persist()
    _emit(args, {"old_key_id": old.key_id, "key_id": new.key_id, "path": args.out, "submissions_used": 0,
                 "iin_stale": True},
          f"rotated {old.key_id} -> {new.key_id}; retrain the IIN before inference")


def _serve_forever(service, what: str):
    print(f"{what} listening on {service.url}", flush=True)
    try:
        service.thread.join()
    except KeyboardInterrupt:
        service.stop()


def cmd_serve_cloud(args):
    from .cloud import CloudModel
    from .gateway import serve_cloud

    _need(args, "--model")
    _need_file(args, "--model")
    _serve_forever(serve_cloud(CloudModel.load(args.model), args.port or 0, args.host), "cloud")


def cmd_serve_gateway(args):
    from .gateway import GatewaySettings, serve_gateway

    settings = GatewaySettings.from_env(args.cloud, args.port, args.state)
    if not settings.cloud_url:
        raise UsageError("--cloud or OWSD_CLOUD_URL is required")
    args.cloud, args.state = settings.cloud_url, settings.state_path
    _need(args, "--key", "--encoder", "--iin")
    _need_file(args, "--key", "--encoder", "--iin")
    pipe = _build_pipeline(args, with_iin=True)
    _serve_forever(serve_gateway(pipe, settings.port, args.host), "gateway")


# -- parser -----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    from .experiments import WorldConfig

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="root seed (default 0)")
    common.add_argument("--config", help="JSON file of flag values; explicit flags override it")
    common.add_argument("--json", action="store_true", help="print a JSON result on stdout")
    common.add_argument("--out", help="output path (file or directory, per subcommand)")
    common.add_argument("-v", "--verbose", action="store_true")

    def data_flags(p):
        p.add_argument("--data", help="dataset .npz written by gen-data")
        p.add_argument("--split", help="dataset split to use")

    def pipeline_flags(p):
        p.add_argument("--encoder", action="append", help="encoder .owse (repeat for an ensemble)")
        p.add_argument("--key", help="scrambling key .owsk")
        p.add_argument("--cloud", help="cloud model .owsc or http(s) URL of a /v1/predict service")
        p.add_argument("--state", help="budget state JSON file")
        p.add_argument("--limit", type=int, default=9000, help="submissions per key (default 9000)")

    def image_flags(p):
        p.add_argument("--image", help="H x W x C image as .npy")
        p.add_argument("--index", type=int, default=0, help="image index within --data/--split")

    parser = _Parser(prog="owsd", description="Scrambled inference against a cloud classifier.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", parents=[common], help="render a synthetic dataset")
    p.add_argument("--n-classes", type=int, default=20)
    p.add_argument("--per-class", type=int, default=500)
    p.add_argument("--image-size", type=int, default=32)
    p.add_argument("--noise", type=float, default=0.05)
    p.add_argument("--splits", type=_splits, default=dict(WorldConfig().split_counts),
                   help="name=count per class, comma separated")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train-cloud", parents=[common], help="train the stand-in cloud classifier")
    data_flags(p)
    p.add_argument("--labels", type=_int_list, help="classes the cloud learns, e.g. 0-9")
    p.add_argument("--epochs", type=int, default=12)
    p.add_argument("--learning-rate", type=float, default=2e-3)
    p.add_argument("--model-id", default="cloud-cnn")
    p.set_defaults(func=cmd_train_cloud)

    p = sub.add_parser("train-encoder", parents=[common], help="train an encoder")
    data_flags(p)
    p.add_argument("--embedding-dim", type=int, default=64)
    p.add_argument("--width", type=int, default=16)
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--encoder-id", default="encoder-0")
    p.set_defaults(func=cmd_train_encoder)

    p = sub.add_parser("keygen", parents=[common], help="generate a scrambling key")
    p.add_argument("--preset", choices=["toy", "paper-shape"], default="toy")
    p.add_argument("--embedding-dim", type=int, default=64)
    p.set_defaults(func=cmd_keygen)

    p = sub.add_parser("scramble", parents=[common], help="encode and scramble one image")
    data_flags(p)
    image_flags(p)
    p.add_argument("--encoder", action="append")
    p.add_argument("--key")
    p.add_argument("--png", help="also write a side-by-side PNG")
    p.set_defaults(func=cmd_scramble)

    p = sub.add_parser("train-iin", parents=[common], help="run the training phase and fit the IIN")
    data_flags(p)
    pipeline_flags(p)
    p.add_argument("--labels", type=_int_list, help="confidential classes, e.g. 0,3,7")
    p.add_argument("--per-label", type=int, help="images per label to use")
    p.add_argument("--learning-rate", type=float, default=1e-4)
    p.add_argument("--max-epochs", type=int, default=40)
    p.add_argument("--metrics", help="per-epoch metrics JSON path")
    p.set_defaults(func=cmd_train_iin)

    p = sub.add_parser("infer", parents=[common], help="classify one image through the pipeline")
    data_flags(p)
    pipeline_flags(p)
    image_flags(p)
    p.add_argument("--iin")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("run-use-case", parents=[common], help="run a desk-scale use-case experiment")
    p.add_argument("use_case", type=int, choices=[1, 2, 3, 4, 5])
    p.add_argument("--world", help="world directory (built there on first use)")
    p.add_argument("--seeds", type=_int_list, default=[0, 1, 2])
    p.add_argument("--labels", type=_int_list, help="use-case 2: confidential label counts")
    p.add_argument("--sizes", type=_int_list, help="use-case 5: images per label")
    p.add_argument("--encoders", type=_int_list, help="use-case 4: ensemble sizes")
    p.add_argument("--learning-rate", type=float, default=1e-4)
    p.set_defaults(func=cmd_run_use_case)

    p = sub.add_parser("analyze", parents=[common], help="confidentiality measurements for one key")
    p.add_argument("what", choices=["entropy", "intersection", "pca", "dead-relu", "attack"])
    p.add_argument("--world", help="world directory (built there on first use)")
    p.add_argument("--k", type=int, default=1)
    p.add_argument("--pairs", type=int, help="attack: pair budget (default: the whole attack split)")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("rotate-key", parents=[common], help="replace a key and reset its budget")
    p.add_argument("--key")
    p.add_argument("--state")
    p.add_argument("--limit", type=int, default=9000)
    p.set_defaults(func=cmd_rotate_key)

    p = sub.add_parser("serve-cloud", parents=[common], help="serve a cloud model over HTTP")
    p.add_argument("--model")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int)
    p.set_defaults(func=cmd_serve_cloud)

    p = sub.add_parser("serve-gateway", parents=[common], help="serve the organization-side gateway")
    pipeline_flags(p)
    p.add_argument("--iin")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int)
    p.set_defaults(func=cmd_serve_gateway)
    return parser


def _apply_config(parser, argv) -> argparse.Namespace:
    args = parser.parse_args(argv)
    if not args.config:
        return args
    path = Path(args.config)
    if not path.exists():
        raise UsageError(f"--config: file not found: {path}")
    try:
        values = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise UsageError(f"--config: {path} is not valid JSON: {exc}") from None
    if not isinstance(values, dict):
        raise UsageError("--config: expected a JSON object of flag values")
    defaults = {}
    known = vars(args)
    for name, value in values.items():
        dest = name.lstrip("-").replace("-", "_")
        if dest not in known or dest in ("command", "func", "config"):
            raise UsageError(f"--config: unknown option {name!r} for {args.command}")
        defaults[dest] = value
    sub = parser._subparsers._group_actions[0].choices[args.command]
    sub.set_defaults(**defaults)
    return parser.parse_args(argv)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = _apply_config(parser, argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
        args.func(args)
    except UsageError as exc:
        print(f"owsd: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:
        return int(exc.code or 0)
    except Exception as exc:
        print(f"owsd: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return 0


if __name__ == "__main__":
    sys.exit(main())
