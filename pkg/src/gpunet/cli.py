"""Command-line entry point: ``gpunet <command> [options]``.

Exit codes: 0 success, 1 usage error, 2 data or format error, 3 numerical
failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import checkpoint
from .data import generate_phantom, preprocess
from .detection import detect
from .evaluation import (
    COARSE_METHODS,
    METHODS,
    check_factors,
    combine_intensity,
    evaluate,
    froc,
    make_source,
    write_froc,
    write_metrics,
)
from .io import FormatError, Sample, read_manifest, read_volume, write_manifest, write_volume
from .model import ConfigError, NetworkConfig, build
from .training import NumericalError, TrainConfig, train, write_history

log = logging.getLogger("gpunet")

EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _int_triple(text: str) -> tuple[int, int, int]:
    try:
        dims = tuple(int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected X,Y,Z integers, got {text!r}") from None
    if len(dims) != 3:
        raise argparse.ArgumentTypeError(f"expected 3 extents, got {text!r}")
    return dims


def _float_list(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _existing(path: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise UsageError(f"no such file: {path}")
    return p


def _load_config(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        cfg = json.loads(_existing(path).read_text())
    except json.JSONDecodeError as e:
        raise FormatError(f"{path}: invalid JSON config ({e.msg} at line {e.lineno})") from None
    if not isinstance(cfg, dict):
        raise FormatError(f"{path}: config must be a JSON object")
    return cfg


def _echo_config(out_dir: Path, resolved: dict) -> None:
    (out_dir / "run_config.json").write_text(json.dumps(resolved, indent=2, sort_keys=True) + "\n")


def cmd_gen_data(args) -> int:
    cfg = _load_config(args.config)
    seed = args.seed if args.seed is not None else cfg.get("seed", 42)
    dims = args.dims or tuple(cfg.get("dims", (32, 32, 16)))
    max_count = args.max_count if args.max_count is not None else cfg.get("max_count", 5)
    sizes = {"train": args.n_train, "val": args.n_val, "test": args.n_test}
    for k, default in (("train", 500), ("val", 100), ("test", 50)):
        if sizes[k] is None:
            sizes[k] = cfg.get(f"n_{k}", default)
    levels = cfg.get("levels", 2)
    out = Path(args.out)
    (out / "volumes").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    for split in ("train", "val", "test"):
        samples = []
        for i in range(sizes[split]):
            raw, sample = generate_phantom(dims, (0, max_count), rng)
            pre = preprocess(raw, levels=levels)
            rel = f"volumes/{split}_{i:04d}.gpuv"
            write_volume(out / rel, pre.data)
            centers = None
            if split == "test":
                centers = [tuple(int(c - o) for c, o in zip(ctr, pre.offset)) for ctr in sample.centers]
            samples.append(Sample(rel, sample.count, centers))
        write_manifest(out / f"{split}.jsonl", samples)
    _echo_config(out, {"command": "gen-data", "seed": seed, "dims": list(dims), "max_count": max_count,
                       "levels": levels, **{f"n_{k}": v for k, v in sizes.items()}})
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args.config)
    train_set = read_manifest(_existing(args.train))
    val_set = read_manifest(_existing(args.val))
    if not train_set or not val_set:
        raise UsageError("training and validation manifests must be non-empty")
    net = dict(cfg.get("network", {}))
    if args.no_upsampling:
        net["upsampling"] = False
    if "input_dims" not in net:
        net["input_dims"] = list(train_set[0].load().shape)
    tcfg = dict(cfg.get("train", {}))
    if args.epochs is not None:
        tcfg["epochs"] = args.epochs
    if args.batch_size is not None:
        tcfg["batch_size"] = args.batch_size
    seed = args.seed if args.seed is not None else cfg.get("seed", tcfg.get("seed", 0))
    tcfg["seed"] = seed
    try:
        net_config = NetworkConfig.from_dict(net)
        train_config = TrainConfig(**tcfg)
    except TypeError as e:
        raise UsageError(f"bad config: {e}") from None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _echo_config(out, {"command": "train", "network": net_config.to_dict(),
                       "train": train_config.to_dict(), "seed": seed})
    model = build(net_config, seed)
    result = train(model, train_set, val_set, train_config)
    checkpoint.save(out / "model.gpuc", result.model, result.state)
    write_history(out / "history.csv", result.history)
    log.info("best epoch %d, validation MSE %.4f", result.best_epoch, result.best_val_mse)
    return 0


def _load_volume_arg(path: str) -> np.ndarray:
    return read_volume(_existing(path))


def cmd_predict(args) -> int:
    model = checkpoint.load_model(_existing(args.model))
    count, _ = model.predict(_load_volume_arg(args.volume))
    print(repr(count))
    return 0


def cmd_detect(args) -> int:
    model = checkpoint.load_model(_existing(args.model))
    volume = _load_volume_arg(args.volume)
    count, heatmap = model.predict(volume)
    if args.combine_intensity is not None:
        heatmap = combine_intensity(heatmap, volume, args.combine_intensity)
    dets = detect(heatmap, count, args.factor)
    text = dets.dumps()
    if args.out:
        Path(args.out).write_text(text + "\n")
    else:
        print(text)
    return 0


def _models(args):
    model = checkpoint.load_model(_existing(args.model))
    coarse = checkpoint.load_model(_existing(args.coarse_model)) if args.coarse_model else None
    if coarse is None and not model.config.upsampling:
        coarse = model
    return model, coarse


def _check_methods(methods, coarse) -> list[str]:
    methods = methods or ["gpunet"]
    for m in methods:
        if m in COARSE_METHODS and coarse is None:
            raise UsageError(f"method {m!r} needs --coarse-model (an encoder-only checkpoint)")
    return methods


def cmd_evaluate(args) -> int:
    model, coarse = _models(args)
    methods = _check_methods(args.method, coarse)
    samples = read_manifest(_existing(args.manifest))
    rows = []
    for m in methods:
        rep = evaluate(make_source(m, model, coarse, args.alpha), samples, args.radius, args.factor)
        rows.append(rep.row(m))
        log.info("%s: TPR %.3f FPav %.3f FDR %.3f", m, rep.tpr, rep.fpav, rep.fdr)
    write_metrics(args.out or sys.stdout, rows)
    return 0


def cmd_froc(args) -> int:
    try:
        factors = check_factors(args.factors)
    except ValueError as e:
        raise UsageError(str(e)) from None
    model, coarse = _models(args)
    (method,) = _check_methods([args.method], coarse)
    samples = read_manifest(_existing(args.manifest))
    curve = froc(make_source(method, model, coarse, args.alpha), samples, factors, args.radius)
    write_froc(args.out or sys.stdout, curve)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="gpunet", description="Weak-label 3D lesion detection with GP-Unet.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="write synthetic phantom volumes and manifests")
    g.add_argument("--out", required=True)
    g.add_argument("--n-train", type=int)
    g.add_argument("--n-val", type=int)
    g.add_argument("--n-test", type=int)
    g.add_argument("--dims", type=_int_triple, help="X,Y,Z (default 32,32,16)")
    g.add_argument("--max-count", type=int)
    g.add_argument("--seed", type=int)
    g.add_argument("--config")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="fit a network on count labels")
    t.add_argument("--train", required=True)
    t.add_argument("--val", required=True)
    t.add_argument("--config")
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--no-upsampling", action="store_true",
                   help="encoder-only network, for the coarse baselines")
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    pr = sub.add_parser("predict", help="print the estimated lesion count")
    pr.add_argument("--model", required=True)
    pr.add_argument("--volume", required=True)
    pr.set_defaults(func=cmd_predict)

    d = sub.add_parser("detect", help="count-guided detections as JSON")
    d.add_argument("--model", required=True)
    d.add_argument("--volume", required=True)
    d.add_argument("--out")
    d.add_argument("--combine-intensity", type=float, metavar="ALPHA")
    d.add_argument("--factor", type=float, default=1.0)
    d.set_defaults(func=cmd_detect)

    for name, func, hlp in (("evaluate", cmd_evaluate, "TPR / FPav / FDR per method"),
                            ("froc", cmd_froc, "FROC operating points")):
        e = sub.add_parser(name, help=hlp)
        e.add_argument("--model", required=True)
        e.add_argument("--coarse-model")
        e.add_argument("--manifest", required=True)
        e.add_argument("--radius", type=float, default=3.0)
        e.add_argument("--alpha", type=float, default=0.5)
        e.add_argument("--out")
        if name == "evaluate":
            e.add_argument("--method", action="append", choices=METHODS)
            e.add_argument("--factor", type=float, default=1.0)
        else:
            e.add_argument("--method", default="gpunet", choices=METHODS)
            e.add_argument("--factors", type=_float_list, default=[0.5, 1.0, 1.5, 2.0, 2.5, 3.0])
        e.set_defaults(func=func)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as e:
        print(f"gpunet: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as e:
        print(f"gpunet: numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FormatError, ConfigError, ValueError, OSError) as e:
        print(f"gpunet: data error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
