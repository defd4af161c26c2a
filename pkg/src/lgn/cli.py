"""Command line entry point: ``lgn <subcommand> ...``.

Exit codes: 0 on success, 1 when input or configuration fails validation,
2 on any other error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace

from .checkpoint import load_checkpoint
from .data import DatasetManifest, SyntheticConfig, dataset_stats, generate, load_dataset, prepare_samples
from .errors import ConfigError, ValidationFailure
from .evaluation import MetricSpec, ablation_json, ablation_report, ablation_table, evaluate
from .model import LGNModel, ModelConfig
from .text import Vocabulary
from .training import TrainConfig, train

logger = logging.getLogger("lgn")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(f"{self.prog}: {message}")


def _read_config(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        with open(path, encoding="utf-8") as fh:
            cfg = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from None
    if not isinstance(cfg, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")
    return cfg


def _sections(cfg: dict, *names: str) -> dict:
    """Split a config into named sections; a flat object is the first section."""
    unknown = set(cfg) - set(names)
    if not unknown:
        return {n: dict(cfg.get(n, {})) for n in names}
    if any(n in cfg for n in names):
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    return {names[0]: dict(cfg), **{n: {} for n in names[1:]}}


def _model_train_configs(path: str | None, seed: int | None) -> tuple[ModelConfig, TrainConfig]:
    sec = _sections(_read_config(path), "model", "train")
    mcfg = ModelConfig.from_dict(sec["model"])
    tcfg = TrainConfig.from_dict(sec["train"])
    if seed is not None:
        mcfg = replace(mcfg, seed=seed)
        tcfg = replace(tcfg, seed=seed)
    return mcfg, tcfg


def cmd_synth(args) -> int:
    sec = _sections(_read_config(args.config), "synthetic")["synthetic"]
    if args.seed is not None:
        sec["seed"] = args.seed
    ds = generate(SyntheticConfig.from_dict(sec), args.out)
    print(f"wrote {ds.root}")
    return 0


def cmd_train(args) -> int:
    mcfg, tcfg = _model_train_configs(args.config, args.seed)
    pairs = list(load_dataset(args.data, "train"))
    if not pairs:
        raise ValidationFailure(f"{args.data}: no training annotations")
    vocab = Vocabulary.build(rec.tokens for _, rec in pairs)
    if mcfg.d_v == 0:
        mcfg = replace(mcfg, d_v=pairs[0][0].d_v)
    model = LGNModel(mcfg, vocab)
    samples = prepare_samples(pairs, model)
    res = train(samples, model, tcfg, out=args.out, log_path=args.log)
    print(f"trained {tcfg.epochs} epochs, final mean loss {res.log[-1]['mean_loss']:.6f}; checkpoint {args.out}")
    return 0


def _nms(value: str) -> float | None:
    if value.lower() in ("none", "off"):
        return None
    try:
        v = float(value)
    except ValueError:
        raise argparse.ArgumentTypeError(f"--nms expects a number or 'none', got {value!r}") from None
    if not 0.0 < v <= 1.0:
        raise argparse.ArgumentTypeError(f"--nms must be in (0, 1], got {v}")
    return v


def cmd_eval(args) -> int:
    model, _, _ = load_checkpoint(args.ckpt)
    samples = prepare_samples(load_dataset(args.data, args.split), model)
    if not samples:
        raise ValidationFailure(f"{args.data}: no annotations in split {args.split!r}")
    report = evaluate(samples, model, MetricSpec(nms_iou=args.nms), csv_path=args.csv)
    print(json.dumps(report.to_json(), indent=1) if args.json else report.table())
    return 0


def cmd_ablate(args) -> int:
    if args.seeds < 1:
        raise ConfigError(f"--seeds must be >= 1, got {args.seeds}")
    mcfg, tcfg = _model_train_configs(args.config, None)
    first = args.seed if args.seed is not None else 0
    seeds = list(range(first, first + args.seeds))
    rows = ablation_report(load_dataset(args.data, "train"), load_dataset(args.data, "test"), mcfg, tcfg, seeds)
    print(ablation_json(rows) if args.json else ablation_table(rows))
    return 0


def cmd_gradcheck(args) -> int:
    from .diagnostics import full_loss_gradcheck, op_gradcheck

    first = args.seed if args.seed is not None else 0
    worst = 0.0
    for seed in range(first, first + args.seeds):
        per_op = op_gradcheck(seed)
        name = max(per_op, key=per_op.get)
        err = full_loss_gradcheck(seed, eps=args.eps)
        worst = max(worst, err, per_op[name])
        print(f"seed {seed}: ops {per_op[name]:.3e} (worst: {name}), full loss {err:.3e}")
    ok = worst <= args.tol
    print(f"{'PASS' if ok else 'FAIL'} worst {worst:.3e} (tolerance {args.tol:g})")
    return 0 if ok else 1


def cmd_stats(args) -> int:
    stats = dataset_stats(DatasetManifest.load(args.data), args.split)
    print(json.dumps(stats, indent=1))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="lgn", description="Language guided moment retrieval on 2-D temporal maps.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="generate a synthetic dataset")
    s.add_argument("--config", help="JSON with SyntheticConfig fields")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", help="train on the train split and write a checkpoint")
    s.add_argument("--data", required=True)
    s.add_argument("--config", help='JSON with "model" and "train" sections')
    s.add_argument("--out", required=True)
    s.add_argument("--log", help="append per-epoch JSON lines here")
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="Rank n@tIoU=m of a checkpoint")
    s.add_argument("--data", required=True)
    s.add_argument("--ckpt", required=True)
    s.add_argument("--split", default="test")
    s.add_argument("--nms", type=_nms, default=0.5, help="NMS IoU for Rank n>1, or 'none' (default 0.5)")
    s.add_argument("--csv", help="write per-query predictions here")
    s.add_argument("--json", action="store_true")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("ablate", help="train baseline/early/late/full over several seeds")
    s.add_argument("--data", required=True)
    s.add_argument("--config", help='JSON with "model" and "train" sections')
    s.add_argument("--seeds", type=int, default=3)
    s.add_argument("--seed", type=int, help="first seed (default 0)")
    s.add_argument("--json", action="store_true")
    s.set_defaults(func=cmd_ablate)

    s = sub.add_parser("gradcheck", help="finite-difference check of every core op and of the full loss on a tiny model")
    s.add_argument("--seeds", type=int, default=5)
    s.add_argument("--seed", type=int, help="first seed (default 0)")
    s.add_argument("--eps", type=float, default=1e-5, help="step for the full-loss check")
    s.add_argument("--tol", type=float, default=1e-4)
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("stats", help="dataset statistics")
    s.add_argument("--data", required=True)
    s.add_argument("--split")
    s.set_defaults(func=cmd_stats)
    return p


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
        return args.func(args)
    except ValidationFailure as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - top-level boundary
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
