"""Command-line entry point: ``dar-forge {train,evaluate,attack,sweep,report}``.

Exit codes: 0 success, 2 configuration error, 3 I/O or format error,
4 training / attack / sweep failure. Results go to stdout, diagnostics to
stderr.
"""

import argparse
import configparser
import json
import logging
import os
import pathlib
import sys

import numpy as np

from dar_forge import attacks, bench, dar, data, zoo
from dar_forge.autodiff import forward
from dar_forge.errors import DarForgeError, IntegrityError, ParseError, RejectedInputError

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_FAILURE = 0, 2, 3, 4
SEED_ENV = "DAR_FORGE_SEED"

log = logging.getLogger("dar_forge")


class ConfigError(DarForgeError):
    pass


class TrainingFailure(DarForgeError):
    pass


def _ints(v):
    return tuple(int(x) for x in v.split(",") if x.strip())


def _floats(v):
    return tuple(float(x) for x in v.split(",") if x.strip())


def _names(v):
    return tuple(x.strip() for x in v.split(",") if x.strip())


# every accepted key and its parser
CONFIG_SCHEMA = {
    "model": {"name": str},
    "train": {"data": str, "epochs": int, "lr": float, "batch_size": int, "seed": int},
    "attack": {"epsilon": float, "alpha": float, "steps": int, "seed": int, "label": int},
    "dar": {"size": int, "count": int, "method": str, "smooth_kernel": int, "smooth_every": int,
            "color_gains": _floats},
    "sweep": {"sizes": _ints, "counts": _ints, "methods": _names, "source_model": str,
              "eval_models": _names, "image_count": int, "soa_epsilon": float,
              "min_confidence": float, "data": str, "split": str, "checkpoint_dir": str},
}


def parse_config_text(text):
    """Parse ``key = value`` text with [section] headers into nested dicts.

    Unknown sections or keys and unparsable values raise ConfigError.
    """
    cp = configparser.ConfigParser(interpolation=None, delimiters=("=",), comment_prefixes=("#", ";"))
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"config syntax: {exc}") from None
    out = {}
    for section in cp.sections():
        if section not in CONFIG_SCHEMA:
            raise ConfigError(f"unknown config section [{section}]; valid: {', '.join(CONFIG_SCHEMA)}")
        out[section] = {}
        for key, raw in cp.items(section):
            if key not in CONFIG_SCHEMA[section]:
                raise ConfigError(f"unknown key {key!r} in [{section}]")
            try:
                out[section][key] = CONFIG_SCHEMA[section][key](raw.strip())
            except ValueError:
                raise ConfigError(f"bad value {raw!r} for {section}.{key}") from None
    return out


def load_config(path):
    if path is None:
        return {}
    try:
        text = pathlib.Path(path).read_text()
    except OSError as exc:
        raise OSError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config_text(text)


def resolve_seed(flag, section_value=None):
    if flag is not None:
        return flag
    if section_value is not None:
        return section_value
    env = os.environ.get(SEED_ENV)
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise ConfigError(f"{SEED_ENV}={env!r} is not an integer") from None
    return 0


def _pick(flag, conf, key, default):
    if flag is not None:
        return flag
    return conf.get(key, default)


def _ensure_path(path, what):
    if path is None:
        raise ConfigError(f"no {what} given")
    p = pathlib.Path(path)
    if not p.exists():
        raise FileNotFoundError(f"{what} not found: {p}")
    return p


def cmd_train(args):
    conf = load_config(args.config)
    tconf = conf.get("train", {})
    name = _pick(args.model, conf.get("model", {}), "name", None)
    if name is None:
        raise ConfigError(f"no model name given; valid names: {', '.join(zoo.SPEC_NAMES)}")
    if name not in zoo.SPEC_NAMES:
        raise ConfigError(f"unknown model spec {name!r}; valid names: {', '.join(zoo.SPEC_NAMES)}")
    data_path = _ensure_path(_pick(args.data, tconf, "data", None), "data path")
    if args.out is None:
        raise ConfigError("--out checkpoint path is required")
    ds = data.load_dataset(data_path, "train")
    spec = zoo.get_spec(name, ds.images[0].shape, len(ds.class_names))
    cfg = zoo.TrainConfig(epochs=_pick(args.epochs, tconf, "epochs", 3),
                          lr=_pick(args.lr, tconf, "lr", 0.05),
                          batch_size=_pick(args.batch_size, tconf, "batch_size", 16),
                          seed=resolve_seed(args.seed, tconf.get("seed")))
    if cfg.epochs < 1 or not cfg.lr > 0 or cfg.batch_size < 1:
        raise ConfigError("epochs and batch_size must be >= 1 and lr > 0")
    try:
        model, history = zoo.train_model(spec, ds, cfg)
    except (ArithmeticError, ValueError) as exc:
        raise TrainingFailure(str(exc)) from None
    for h in history:
        log.info("epoch %d loss %.4f train accuracy %.4f", h["epoch"], h["loss"], h["accuracy"])
    zoo.save_checkpoint(model, args.out)
    print(f"model={name} params={model.param_count} train_accuracy={history[-1]['accuracy']:.4f} "
          f"checkpoint={args.out}")
    return EXIT_OK


def cmd_evaluate(args):
    ckpt = _ensure_path(args.checkpoint, "checkpoint")
    data_path = _ensure_path(args.data, "data path")
    model = zoo.load_checkpoint(ckpt)
    ds = data.load_dataset(data_path, args.split)
    acc, conf = zoo.evaluate(model, ds)
    print(f"model={model.name} accuracy={acc:.4f} mean_true_class_confidence={conf:.4f} n={len(ds)}")
    return EXIT_OK


def cmd_attack(args):
    conf = load_config(args.config)
    aconf, dconf = conf.get("attack", {}), conf.get("dar", {})
    model = zoo.load_checkpoint(_ensure_path(args.checkpoint, "checkpoint"))
    image_path = _ensure_path(args.image, "image")
    if args.out is None:
        raise ConfigError("--out directory is required")
    image = data.to_channels(data.read_ppm(image_path.read_bytes()), model.input_shape[0])
    if image.shape != model.input_shape:
        raise ConfigError(f"image shape {image.shape} does not match model input {model.input_shape}")
    label = _pick(args.label, aconf, "label", None)
    if label is None:
        label = int(np.argmax(forward(model, image)))
    seed = resolve_seed(args.seed, aconf.get("seed"))
    epsilon = _pick(args.epsilon, aconf, "epsilon", 0.25)
    method = args.method or "dar"
    acfg = attacks.AttackConfig(epsilon=epsilon, alpha=aconf.get("alpha"),
                                steps=aconf.get("steps", 40), seed=seed)
    record = {"image_id": image_path.name, "model": model.name, "method": method, "epsilon": epsilon,
              "label": label}
    if method == "fgsm":
        result = attacks.fgsm(model, image, label, acfg)
    elif method == "pgd":
        result = attacks.pgd(model, image, label, acfg)
    elif method == "uap":
        result = attacks.uap_noise(image, acfg, model, label)
    elif method == "opa":
        result = attacks.one_pixel_attack(model, image, label, seed=seed)
        record["location"] = list(result.location) if result.location else None
        record["color_index"] = result.color_index
    elif method == "dar":
        dcfg = dar.DarConfig(size=_pick(args.size, dconf, "size", 6), count=_pick(args.count, dconf, "count", 1),
                             method=dconf.get("method", "pgd"),
                             epsilon=epsilon, alpha=aconf.get("alpha"), steps=aconf.get("steps", 40),
                             smooth_kernel=dconf.get("smooth_kernel", 3), smooth_every=dconf.get("smooth_every", 1),
                             color_gains=dconf.get("color_gains", (1.0, 1.0, 1.0)), seed=seed)
        out = dar.craft_dar(model, image, label, dcfg)
        result = out.attack
        record.update(out.record(image_path.name, model.name))
        record["method"] = "dar-" + dcfg.method
    else:
        raise ConfigError(f"unknown method {method!r}; valid: fgsm, pgd, uap, opa, dar")
    record["orig_conf"] = result.original_confidence
    record["adv_conf"] = result.adversarial_confidence
    record["queries"] = result.queries
    out_dir = pathlib.Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "adversarial.ppm").write_bytes(data.write_ppm(data.to_channels(result.adversarial, 3)))
    (out_dir / "result.json").write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")
    print(f"orig_conf={result.original_confidence:.6f} adv_conf={result.adversarial_confidence:.6f}")
    return EXIT_OK


def _sweep_config(args, sconf, dconf, aconf):
    sizes = _ints(args.size) if args.size else sconf.get("sizes", dar.CANONICAL_SIZES)
    counts = _ints(args.count) if args.count else sconf.get("counts", dar.CANONICAL_COUNTS)
    methods = _names(args.method) if args.method else sconf.get("methods", ("pgd", "uap"))
    eval_models = sconf.get("eval_models", zoo.SPEC_NAMES)
    return bench.SweepConfig(
        sizes=tuple(sizes), counts=tuple(counts), methods=tuple(methods),
        source_model=_pick(args.model, sconf, "source_model", "dar_small"),
        eval_models=tuple(eval_models),
        image_count=_pick(args.images, sconf, "image_count", 100),
        global_seed=resolve_seed(args.seed, aconf.get("seed")),
        epsilon=_pick(args.epsilon, aconf, "epsilon", 0.25),
        alpha=aconf.get("alpha"), steps=aconf.get("steps", 40),
        smooth_kernel=dconf.get("smooth_kernel", 3), smooth_every=dconf.get("smooth_every", 1),
        color_gains=dconf.get("color_gains", (1.0, 1.0, 1.0)),
        soa_epsilon=sconf.get("soa_epsilon"), min_confidence=sconf.get("min_confidence", 0.5),
    )


def cmd_sweep(args):
    conf = load_config(args.config)
    sconf = conf.get("sweep", {})
    cfg = _sweep_config(args, sconf, conf.get("dar", {}), conf.get("attack", {}))
    if args.out is None:
        raise ConfigError("--out directory is required")
    data_path = _ensure_path(_pick(args.data, sconf, "data", None), "data path")
    ckpt_dir = _ensure_path(_pick(args.checkpoints, sconf, "checkpoint_dir", None), "checkpoint directory")
    models = {}
    for name in cfg.eval_models:
        models[name] = zoo.load_checkpoint(_ensure_path(ckpt_dir / f"{name}.darw", f"checkpoint for {name}"))
    ds = data.load_dataset(data_path, sconf.get("split", "t10k"))
    try:
        run = bench.run_sweep(cfg, models, ds, jobs=args.jobs)
    except (DarForgeError, ValueError) as exc:
        log.error("sweep failed: %s", exc)
        return EXIT_FAILURE
    report = bench.aggregate(run.records)
    out_dir = pathlib.Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "records.jsonl").write_bytes(bench.write_records(run.records))
    (out_dir / "sweep.csv").write_bytes(bench.emit_csv(report))
    (out_dir / "sweep.md").write_bytes(bench.emit_markdown(report))
    meta = {
        "config": {k: list(v) if isinstance(v, tuple) else v for k, v in vars(cfg).items()},
        "checksums": {name: f"{zoo.checkpoint_checksum(m):#010x}" for name, m in models.items()},
        "image_ids": run.image_ids,
        "skipped": run.skipped,
    }
    (out_dir / "sweep_meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    if run.skipped:
        log.warning("%d sweep items skipped (see sweep_meta.json)", len(run.skipped))
    print(f"images={len(run.image_ids)} records={len(run.records)} skipped={len(run.skipped)} out={out_dir}")
    return EXIT_OK


def cmd_report(args):
    path = _ensure_path(args.records, "records file")
    try:
        records = bench.read_records(path.read_bytes())
    except (ValueError, TypeError, KeyError) as exc:
        raise ParseError(f"records file {path}: {exc}", 0) from None
    if not records:
        raise ParseError(f"records file {path} holds no records", 0)
    report = bench.aggregate(records)
    body = bench.emit_csv(report) if args.format == "csv" else bench.emit_markdown(report)
    if args.out:
        pathlib.Path(args.out).write_bytes(body)
    else:
        sys.stdout.buffer.write(body)
        sys.stdout.flush()
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="dar-forge", description="Distributed adversarial region toolkit.")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def common(sp, config=True):
        if config:
            sp.add_argument("--config", metavar="FILE", help="key = value config file (default: none)")
        sp.add_argument("--seed", type=int, help=f"seed for all randomness (default: ${SEED_ENV}, else 0)")
        sp.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr (default: off)")

    t = sub.add_parser("train", help="train a canonical model and write a checkpoint")
    common(t)
    t.add_argument("--model", help=f"spec name: {', '.join(zoo.SPEC_NAMES)} (default: [model] name)")
    t.add_argument("--data", help="IDX directory or CIFAR-10 .bin batch (default: [train] data)")
    t.add_argument("--out", help="checkpoint path to write (required)")
    t.add_argument("--epochs", type=int, help="training epochs (default: 3)")
    t.add_argument("--lr", type=float, help="SGD learning rate (default: 0.05)")
    t.add_argument("--batch-size", type=int, help="minibatch size (default: 16)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="report accuracy and mean true-class confidence")
    common(e, config=False)
    e.add_argument("--checkpoint", help="checkpoint to evaluate (required)")
    e.add_argument("--data", help="IDX directory or CIFAR-10 .bin batch (required)")
    e.add_argument("--split", default="t10k", help="IDX split prefix (default: t10k)")
    e.set_defaults(func=cmd_evaluate)

    a = sub.add_parser("attack", help="attack one PPM image")
    common(a)
    a.add_argument("--checkpoint", help="victim checkpoint (required)")
    a.add_argument("--image", help="input P6 PPM image (required)")
    a.add_argument("--method", choices=("fgsm", "pgd", "uap", "opa", "dar"), help="attack method (default: dar)")
    a.add_argument("--label", type=int, help="true class (default: model's prediction)")
    a.add_argument("--epsilon", type=float, help="L-infinity budget (default: 0.25)")
    a.add_argument("--size", type=int, help="DAR diameter in pixels (default: 6)")
    a.add_argument("--count", type=int, help="number of DARs (default: 1)")
    a.add_argument("--out", help="output directory (required)")
    a.set_defaults(func=cmd_attack)

    s = sub.add_parser("sweep", help="run the size x count x method benchmark")
    common(s)
    s.add_argument("--data", help="evaluation data (default: [sweep] data)")
    s.add_argument("--checkpoints", help="directory holding <model>.darw files (default: [sweep] checkpoint_dir)")
    s.add_argument("--model", help="white-box source model (default: dar_small)")
    s.add_argument("--epsilon", type=float, help="DAR L-infinity budget (default: 0.25)")
    s.add_argument("--size", help="comma-separated diameters (default: 2,6,10,14,18)")
    s.add_argument("--count", help="comma-separated region counts (default: 1,2,3,4)")
    s.add_argument("--method", help="comma-separated fill methods (default: pgd,uap)")
    s.add_argument("--images", type=int, help="number of filtered images (default: 100)")
    s.add_argument("--jobs", type=int, default=1, help="worker processes (default: 1)")
    s.add_argument("--out", help="output directory (required)")
    s.set_defaults(func=cmd_sweep)

    r = sub.add_parser("report", help="re-render CSV or Markdown from raw records")
    r.add_argument("--records", help="records.jsonl written by sweep (required)")
    r.add_argument("--format", choices=("csv", "markdown"), default="markdown", help="output format (default: markdown)")
    r.add_argument("--out", help="output file (default: stdout)")
    r.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr (default: off)")
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (ConfigError, RejectedInputError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, ParseError, IntegrityError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except DarForgeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
