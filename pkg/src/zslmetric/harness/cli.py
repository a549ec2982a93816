"""Command-line entry point: ``zslmetric {train,eval,grid,export-attn,selftest}``.

Exit status is 0 on success, 1 for usage or configuration errors and 2 for
failures at run time (bad files, divergence, protocol violations).
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys

import numpy as np

from ..errors import ConfigError, ZslMetricError
from ..extractor import export_attention
from .checkpoint import load_model, save_model
from .config import ExperimentConfig, apply_env
from .data import Dataset, load_idx, synth_dataset, zsl_split
from .training import evaluate, train

LOSS_ALIASES = {"triplet": "triplet_hinge", "proxy": "proxy_nca"}
GRID_COLUMNS = ["lambda0", "seed", "nmi", "r@1", "r@2", "r@4", "r@8", "knn_acc"]


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def synth_for(cfg: ExperimentConfig) -> Dataset:
    """The synthetic benchmark a config describes; the data seed follows the run seed."""
    return synth_dataset(cfg.synth_classes, cfg.synth_per_class, cfg.synth_noise,
                         np.random.default_rng([cfg.seed, 2]), cfg.synth_input_dim)


def load_data(source: str, cfg: ExperimentConfig) -> Dataset:
    if source == "synth":
        return synth_for(cfg)
    if source.startswith("idx:"):
        paths = source[4:].split(",")
        if len(paths) != 2 or not all(paths):
            raise ConfigError("--data idx: expects idx:IMAGES,LABELS")
        return load_idx(*paths)
    raise ConfigError(f"--data must be 'synth' or 'idx:IMAGES,LABELS', got {source!r}")


def _parse_ks(text: str) -> list[int]:
    try:
        ks = [int(k) for k in text.split(",") if k.strip()]
    except ValueError:
        raise ConfigError(f"--ks must be a comma-separated list of integers, got {text!r}") from None
    if not ks or min(ks) < 1:
        raise ConfigError("--ks needs at least one positive integer")
    return ks


def _resolve_config(args) -> ExperimentConfig:
    # precedence: config file < ZSLMETRIC_SEED < command-line flags
    cfg = ExperimentConfig.from_toml(args.config) if args.config else apply_env(ExperimentConfig())
    changes = {}
    if getattr(args, "mode", None):
        changes["mode"] = args.mode
    if getattr(args, "loss", None):
        changes["loss"] = LOSS_ALIASES.get(args.loss, args.loss)
    if getattr(args, "seed", None) is not None:
        changes["seed"] = args.seed
    if getattr(args, "epochs", None) is not None:
        changes["epochs"] = args.epochs
    return cfg.replace(**changes) if changes else cfg


def cmd_train(args) -> int:
    cfg = _resolve_config(args)
    data = load_data(args.data, cfg)
    cfg = cfg.replace(input_dim=data.input_dim)
    out = args.out
    result = train(cfg, data, out_dir=out, progress=args.verbose)
    report = result.final_report()
    if out is not None:
        save_model(result.model, os.path.join(out, "model.bin"))
        cfg.to_toml(os.path.join(out, "config.toml"))
        if report is not None:
            report.to_json(os.path.join(out, "report.json"))
    if report is not None:
        print(report.to_json())
    return 0


def cmd_eval(args) -> int:
    model = load_model(args.model)
    cfg = model.config
    data = load_data(args.data, cfg)
    split = zsl_split(data, cfg.train_fraction)
    report = evaluate(model, data, split.test_idx, _parse_ks(args.ks), split_id="unseen",
                      epoch=None)
    print(report.to_json())
    if args.out:
        report.to_json(args.out)
    return 0


def cmd_grid(args) -> int:
    base = _resolve_config(args)
    seeds = [base.seed] if args.seeds is None else _parse_seeds(args.seeds)
    out = open(args.out, "w", encoding="utf-8", newline="") if args.out else sys.stdout
    try:
        writer = csv.writer(out, lineterminator="\n")
        writer.writerow(GRID_COLUMNS)
        for lam in base.lambda_grid:
            for seed in seeds:
                cfg = base.replace(lambda0=float(lam), seed=seed)
                data = load_data(args.data, cfg)
                rep = train(cfg.replace(input_dim=data.input_dim), data).final_report()
                writer.writerow([repr(float(lam)), seed, repr(rep.nmi)]
                                + [repr(rep.recall_at.get(k, float("nan"))) for k in (1, 2, 4, 8)]
                                + [repr(rep.knn_acc)])
                out.flush()
    finally:
        if out is not sys.stdout:
            out.close()
    return 0


def _parse_seeds(text: str) -> list[int]:
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise ConfigError(f"--seeds must be comma-separated integers, got {text!r}") from None


def cmd_export_attn(args) -> int:
    model = load_model(args.model)
    if args.input.endswith(".npy"):
        X = np.load(args.input)
    else:
        X = np.loadtxt(args.input, delimiter=",", ndmin=2)
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    os.makedirs(args.out, exist_ok=True)
    shapes = model.config.stage_shapes
    for i, sample in enumerate(X):
        for j, w in enumerate(model.attention_weights(sample)):
            if w.ndim == 2:  # multidim: one weight per location and channel
                w = w.mean(axis=1)
            _, H, V = shapes[j]
            paths = export_attention(w, (H, V), os.path.join(args.out, f"sample{i}_stage{j}"))
            print(*paths)
    return 0


def cmd_selftest(args) -> int:
    from ..selftest import run
    return 0 if run(verbose=not args.quiet) else 2


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="zslmetric", description="Attention-based deep metric learning toolkit.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, data_required=True):
        sp.add_argument("--config", help="TOML experiment config")
        sp.add_argument("--data", default="synth" if not data_required else None,
                        required=data_required, help="'synth' or 'idx:IMAGES,LABELS'")
        sp.add_argument("--mode", choices=["base", "energy", "soft_adv", "adapt_adv"])
        sp.add_argument("--loss", choices=["contrastive", "triplet", "triplet_hinge", "npair",
                                           "angular", "proxy", "proxy_nca"])
        sp.add_argument("--seed", type=int)
        sp.add_argument("--epochs", type=int)

    t = sub.add_parser("train", help="train one model")
    common(t)
    t.add_argument("--out", help="output directory")
    t.add_argument("-v", "--verbose", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on the unseen classes")
    e.add_argument("--model", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--ks", default="1,2,4,8")
    e.add_argument("--out", help="write the report JSON here as well")
    e.set_defaults(func=cmd_eval)

    g = sub.add_parser("grid", help="sweep lambda0 over the configured grid")
    common(g, data_required=False)
    g.add_argument("--seeds", help="comma-separated seeds (default: the config seed)")
    g.add_argument("--out", help="CSV destination (default: stdout)")
    g.set_defaults(func=cmd_grid)

    x = sub.add_parser("export-attn", help="write attention heatmaps for input samples")
    x.add_argument("--model", required=True)
    x.add_argument("--input", required=True, help=".npy array or comma-separated text, one sample per row")
    x.add_argument("--out", required=True, help="output directory")
    x.set_defaults(func=cmd_export_attn)

    s = sub.add_parser("selftest", help="gradient checks and metric oracles")
    s.add_argument("-q", "--quiet", action="store_true")
    s.set_defaults(func=cmd_selftest)
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except (ZslMetricError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
