"""Command-line entry point.

Exit codes: 0 success, 1 usage or configuration error, 2 data error
(missing/corrupt/mismatched files), 3 a check that ran and failed.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import complexity, synthetic
from .config import RunConfig, load_config
from .formats import FormatError, atomic_write, load_checkpoint, read_features, save_checkpoint, write_features
from .mli import ConfigError
from .network import ZERO_GRAD_FLOOR, MlinModel, evaluate, forward, gradcheck, randomize_parameters
from .tensor import Tensor
from .train import train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_CHECK = 0, 1, 2, 3

log = logging.getLogger("mlin")


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _check_dataset(ds, cfg: RunConfig, source: str) -> None:
    if len(ds) == 0:
        raise DataError(f"{source}: dataset is empty")
    if ds.d_in != cfg.d_in:
        raise DataError(f"{source}: feature width {ds.d_in} but the model expects d_in={cfg.d_in}")
    bad = [y for y in ds.labels if y >= cfg.num_classes]
    if bad:
        raise DataError(f"{source}: label {bad[0]} out of range for {cfg.num_classes} classes")


def _datasets(cfg: RunConfig):
    if cfg.train_data:
        train_set = read_features(cfg.train_data)
        test_set = read_features(cfg.test_data) if cfg.test_data else None
        return train_set, test_set, cfg.train_data
    train_set, test_set = synthetic.make_splits(cfg.data_seed, cfg.train_size, cfg.test_size)
    return train_set, test_set, "synthetic task"


def cmd_train(args) -> int:
    cfg = load_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    train_set, test_set, source = _datasets(cfg)
    _check_dataset(train_set, cfg, source)
    if test_set is not None:
        _check_dataset(test_set, cfg, cfg.test_data or source)
    out = Path(args.out)
    model = MlinModel.init(cfg.mli(), cfg.d_in, cfg.num_classes, seed=cfg.seed)
    log_path = out / "train_log.jsonl"
    lines: list[str] = []

    def on_epoch(record: dict) -> None:
        lines.append(json.dumps(record))
        atomic_write(log_path, "".join(line + "\n" for line in lines).encode("utf-8"))
        print(lines[-1], flush=True)

    atomic_write(log_path, b"")
    train(model, train_set, cfg.train_settings(), test_set, on_epoch)
    save_checkpoint(out / "model.mlc", model, cfg)
    print(f"checkpoint written to {out / 'model.mlc'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    model, cfg = load_checkpoint(args.checkpoint)
    ds = read_features(args.data)
    _check_dataset(ds, cfg, args.data)
    print(f"accuracy: {evaluate(model, ds):.6f}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    cfg = load_config(args.config) if args.config else RunConfig()
    cfg = cfg.replace(dropout_rate=0.0)
    model = MlinModel.init(cfg.mli(), cfg.d_in, cfg.num_classes, seed=cfg.seed)
    randomize_parameters(model, cfg.seed)
    rng = np.random.default_rng(cfg.seed + 1)
    R = rng.uniform(-1, 1, size=(args.batch, args.m, cfg.d_in))
    E = rng.uniform(-1, 1, size=(args.batch, args.n, cfg.d_in))
    y = np.arange(args.batch) % cfg.num_classes
    result = gradcheck(model, [(R, E, y)], eps=args.eps)
    width = max(len(name) for name, _ in model.named_parameters())
    for name, _ in model.named_parameters():
        if name in result.zero:
            err = result.zero[name]
            print(f"{name:<{width}}  {err:.3e}  {'ok' if err < ZERO_GRAD_FLOOR else 'FAIL'} (zero gradient, absolute)")
        else:
            err = result.worst[name]
            print(f"{name:<{width}}  {err:.3e}  {'ok' if err < args.tol else 'FAIL'}")
    ok = result.passed(args.tol)
    total = len(result.worst) + len(result.zero)
    print(f"gradcheck {'passed' if ok else 'FAILED'} ({total} groups, relative tol {args.tol:g})")
    return EXIT_OK if ok else EXIT_CHECK


def _k_list(text: str) -> list[int]:
    try:
        ks = [int(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise UsageError(f"--k-list must be comma-separated integers, got {text!r}") from None
    if not ks or min(ks) < 1:
        raise UsageError("--k-list needs at least one positive integer")
    return ks


def cmd_messages(args) -> int:
    if args.m < 1 or args.n < 1:
        raise UsageError("--m and --n must be positive")
    sys.stdout.write(complexity.table_csv(complexity.compare_table(args.m, args.n, _k_list(args.k_list))))
    return EXIT_OK


def cmd_export_attn(args) -> int:
    model, cfg = load_checkpoint(args.checkpoint)
    ds = read_features(args.data)
    _check_dataset(ds, cfg, args.data)
    if not 0 <= args.index < len(ds):
        raise DataError(f"{args.data}: index {args.index} out of range for {len(ds)} records")
    i = args.index
    logits, trace = forward(model, Tensor(ds.R[i]), Tensor(ds.E[i]))
    record = {
        "index": i,
        "label": ds.labels[i],
        "prediction": int(np.argmax(logits.data)),
        **trace.to_json(),
    }
    atomic_write(args.out, (json.dumps(record) + "\n").encode("utf-8"))
    print(f"attention maps for record {i} written to {args.out}")
    return EXIT_OK


def cmd_generate(args) -> int:
    out = Path(args.out)
    if args.random_classes:
        ds = synthetic.random_feature_dataset(args.seed or 0, args.count, args.random_classes)
        write_features(out / "random.mlf", ds)
        print(f"{len(ds)} balanced random records written to {out / 'random.mlf'}")
        return EXIT_OK
    cfg = load_config(args.config) if args.config else RunConfig()
    seed = cfg.data_seed if args.seed is None else args.seed
    train_set, test_set = synthetic.make_splits(seed, cfg.train_size, cfg.test_size)
    write_features(out / "train.mlf", train_set)
    write_features(out / "test.mlf", test_set)
    print(json.dumps({"train": len(train_set), "test": len(test_set),
                      "classes": train_set.class_distribution()}))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mlin", description="Multi-modality latent interaction network tools")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train a model and write checkpoint + per-epoch log")
    p.add_argument("--config", help="run config (key = value)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, help="overrides the config seed")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="accuracy of a checkpoint on a feature file")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of every parameter group")
    p.add_argument("--config")
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--m", type=int, default=5, help="regions per sample")
    p.add_argument("--n", type=int, default=4, help="words per sample")
    p.add_argument("--batch", type=int, default=2)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("messages", help="message-passing counts as CSV")
    p.add_argument("--m", type=int, required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--k-list", default="6")
    p.set_defaults(func=cmd_messages)

    p = sub.add_parser("export-attn", help="dump per-layer attention maps of one record as JSON")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_attn)

    p = sub.add_parser("generate", help="write synthetic train/test feature files")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--random-classes", type=int, default=0,
                   help="instead write a balanced set of random features with this many classes")
    p.add_argument("--count", type=int, default=1000)
    p.set_defaults(func=cmd_generate)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"error: {exc.filename or ''}: {exc.strerror}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
