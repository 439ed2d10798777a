"""Command-line surface tying the engines together.

Exit codes: 0 success, 1 validation/usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from .config import ConfigError, config_from_pairs, parse_config
from .data import DataError, DatasetSource, load_dataset
from .serial import ContainerError, load_checkpoint


class _Parser(argparse.ArgumentParser):
    """argparse exits 2 on usage errors; the contract here is exit 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _build_parser() -> _Parser:
    p = _Parser(prog="minidino", description=__doc__)
    p.add_argument("--config", default=None, help="key=value config file")
    p.add_argument("--seed", type=int, default=None, help="override the run seed")
    p.add_argument("--out-dir", default=None, help="run directory for outputs")
    p.add_argument(
        "-o", "--override", action="append", default=[], metavar="KEY=VALUE",
        help="config override (repeatable)",
    )
    sub = p.add_subparsers(dest="command")

    sp = sub.add_parser("pretrain", help="self-distillation pretraining")
    sp.add_argument("--resume", action="store_true", help="continue an interrupted run")

    sp = sub.add_parser("distill", help="offline distillation from a frozen teacher")
    sp.add_argument("--teacher", required=True, help="teacher checkpoint or logits file")
    sp.add_argument("--augmented", action="store_true", help="distill on augmented views")

    sp = sub.add_parser("export-logits", help="write teacher logits for a dataset")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--which", choices=("student", "teacher"), default="teacher")

    sp = sub.add_parser("export-embeddings", help="write frozen-backbone embeddings")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--which", choices=("student", "teacher"), default="teacher")
    sp.add_argument("--raw", action="store_true", help="skip L2 normalization")

    sp = sub.add_parser("eval-knn", help="KNN accuracy between embedding files")
    sp.add_argument("--train", required=True)
    sp.add_argument("--test", required=True)
    sp.add_argument("--k", type=int, default=None)
    sp.add_argument("--vote-temp", type=float, default=None)
    sp.add_argument("--weighting", choices=("uniform", "temperature-softmax"), default=None)

    sp = sub.add_parser("eval-linear", help="linear probe on frozen embeddings")
    sp.add_argument("--train", required=True)
    sp.add_argument("--test", required=True)
    sp.add_argument("--fraction", type=float, default=None)
    sp.add_argument("--epochs", type=int, default=None)
    sp.add_argument("--lr", type=float, default=None)

    sp = sub.add_parser("count-params", help="parameter totals for the configured backbone")

    sp = sub.add_parser("inspect-checkpoint", help="print checkpoint metadata")
    sp.add_argument("path")

    return p


def _load_cfg(args):
    overrides = list(args.override)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    return parse_config(args.config, overrides)


def _dataset(cfg):
    src = DatasetSource(
        kind=cfg.data.kind,
        root=cfg.data.root,
        class_count=cfg.data.class_count,
        n=cfg.data.n,
        noise=cfg.data.noise,
        image_size=cfg.data.image_size,
    )
    records, errors = load_dataset(src)
    for err in errors:
        print(f"warning: skipped record {err.id}: {err.message}", file=sys.stderr)
    return records


def _require_out_dir(args) -> str:
    if not args.out_dir:
        raise ConfigError("--out-dir is required for this command")
    return args.out_dir


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_usage(sys.stderr)
        print("error: a subcommand is required", file=sys.stderr)
        return 1
    try:
        return _dispatch(args)
    except (ConfigError, DataError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except SystemExit:
        raise
    except Exception as e:  # runtime failure
        print(f"runtime error: {e}", file=sys.stderr)
        return 2


def _dispatch(args) -> int:
    from . import distill as distill_mod
    from . import dino, evaluate
    from .evaluate import KNNConfig, LinearProbeConfig
    from .nets import build_backbone, count_params

    if args.command == "pretrain":
        cfg = _load_cfg(args)
        out_dir = _require_out_dir(args)
        records = _dataset(cfg)
        result = dino.pretrain(cfg, records, out_dir, resume=args.resume)
        print(f"checkpoint={result.checkpoint_path}")
        if result.metrics:
            print(f"final_loss={result.metrics[-1]['loss']!r}")
        return 0

    if args.command == "distill":
        cfg = _load_cfg(args)
        out_dir = _require_out_dir(args)
        records = _dataset(cfg)
        result = distill_mod.run_distill(cfg, records, args.teacher, out_dir, augmented=args.augmented)
        print(f"checkpoint={result.checkpoint_path}")
        print(f"final_kl={result.metrics[-1]['kl']!r}")
        return 0

    if args.command == "export-logits":
        ckpt = load_checkpoint(args.checkpoint)
        cfg = _cfg_for_checkpoint(args, ckpt)
        records = _dataset(cfg)
        out = distill_mod.export_teacher_logits(args.checkpoint, records, args.out, which=args.which)
        print(f"rows={len(out.ids)} dim={out.logits.shape[1]} path={args.out}")
        return 0

    if args.command == "export-embeddings":
        ckpt = load_checkpoint(args.checkpoint)
        cfg = _cfg_for_checkpoint(args, ckpt)
        records = _dataset(cfg)
        es = evaluate.extract_embeddings(ckpt, records, which=args.which, l2_normalize=not args.raw)
        evaluate.save_embeddings(args.out, es)
        print(f"rows={len(es)} dim={es.matrix.shape[1]} path={args.out}")
        return 0

    if args.command == "eval-knn":
        cfg = _load_cfg(args)
        knn_cfg = KNNConfig(
            k=args.k if args.k is not None else cfg.eval.k,
            weighting=args.weighting or cfg.eval.weighting,
            vote_temp=args.vote_temp if args.vote_temp is not None else cfg.eval.vote_temp,
        )
        train = evaluate.load_embeddings(args.train)
        test = evaluate.load_embeddings(args.test)
        report = evaluate.knn_accuracy(train, test, knn_cfg)
        print(f"knn_acc={report.accuracy!r}")
        for c, acc in report.per_class.items():
            print(f"class_acc[{c}]={acc!r}")
        return 0

    if args.command == "eval-linear":
        cfg = _load_cfg(args)
        probe_cfg = LinearProbeConfig(
            epochs=args.epochs if args.epochs is not None else cfg.eval.probe_epochs,
            data_fraction=args.fraction if args.fraction is not None else cfg.eval.data_fraction,
            lr=args.lr if args.lr is not None else cfg.eval.probe_lr,
            seed=cfg.seed,
        )
        train = evaluate.load_embeddings(args.train)
        test = evaluate.load_embeddings(args.test)
        acc = evaluate.linear_probe(train, test, probe_cfg)
        print(f"linear_acc={acc!r}")
        return 0

    if args.command == "count-params":
        cfg = _load_cfg(args)
        ps, backbone = build_backbone(cfg.backbone_config(), np.random.default_rng(0))
        print(f"backbone_params={count_params(ps)}")
        print(f"embed_dim={backbone.embed_dim}")
        return 0

    if args.command == "inspect-checkpoint":
        ckpt = load_checkpoint(args.path)
        from .nets import count_params as cp

        print(f"t={ckpt.t} epoch={ckpt.epoch}")
        print(f"student_params={cp(ckpt.student)} teacher_params={cp(ckpt.teacher)}")
        print(f"center_dim={ckpt.center.shape[0]} center_norm={float(np.linalg.norm(ckpt.center))!r}")
        for key in ("embed_dim", "out_dim", "has_head", "seed"):
            if key in ckpt.meta:
                print(f"{key}={ckpt.meta[key]}")
        return 0

    raise ConfigError(f"unknown command {args.command!r}")


def _cfg_for_checkpoint(args, ckpt):
    """Dataset selection for export commands: checkpoint config + overrides."""
    cfg = config_from_pairs(ckpt.config_pairs)
    if args.override or args.seed is not None or args.config:
        from .config import apply_overrides, _parse_value

        pairs = {}
        if args.config:
            file_cfg = parse_config(args.config)
            return file_cfg
        for item in args.override:
            key, _, text = item.partition("=")
            pairs[key.strip()] = _parse_value(key.strip(), text)
        if args.seed is not None:
            pairs["seed"] = args.seed
        cfg = apply_overrides(cfg, pairs)
        cfg.validate()
    return cfg


if __name__ == "__main__":
    raise SystemExit(main())
