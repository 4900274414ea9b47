"""Command line: ``oamixer {gen,train,eval,report-kappa,selftest}``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

from .config import RunConfig, load_config
from .data import EVAL_SPLITS, gen_dataset, load_dataset, save_dataset
from .errors import OAMixerError
from .mask import format_kappa_table
from .models import build_model, load_checkpoint, report_mask_scales
from .training import evaluate_all, read_log, train

log = logging.getLogger("oamixer")


def _splits_for(cfg: RunConfig, names=None):
    if cfg.dataset:
        splits, _ = load_dataset(cfg.dataset, names)
        return splits
    splits = gen_dataset(cfg.data)
    return {k: v for k, v in splits.items() if names is None or k in names}


def cmd_gen(args) -> int:
    cfg = load_config(args.config, args.seed) if args.config else None
    if cfg is None:
        from .data import SyntheticSpec

        spec = SyntheticSpec(seed=args.seed if args.seed is not None else 0)
    else:
        spec = cfg.data
    out = save_dataset(gen_dataset(spec), spec, args.out)
    print(f"wrote dataset (seed {spec.seed}) to {out}")
    return 0


def cmd_train(args) -> int:
    cfg = load_config(args.config, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    splits = _splits_for(cfg, ["train"])
    model = build_model(cfg.model, cfg.model_seed)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    _, records = train(model, splits["train"], cfg.train, out / "log.jsonl", out / "checkpoint")
    if not args.no_figures:
        from .plotting import plot_training

        plot_training(records, out / "training.png")
    final = [r for r in records if r.get("event") == "epoch"]
    loss = f"{final[-1]['mean_loss']:.4f}" if final else "n/a"
    print(f"trained {cfg.model.family} (oamix={cfg.model.oamix}); final epoch loss {loss}; "
          f"checkpoint {out / 'checkpoint'}")
    return 0


def cmd_eval(args) -> int:
    cfg = load_config(args.config, args.seed)
    model, _ = load_checkpoint(args.checkpoint)
    splits = _splits_for(cfg, list(EVAL_SPLITS))
    metrics = evaluate_all(model, splits)
    keys = [k for k in (*EVAL_SPLITS, "bg_gap") if k in metrics]
    writer = csv.writer(sys.stdout)
    writer.writerow(["metric", "value"])
    for k in keys:
        writer.writerow([k, f"{metrics[k]:.6f}"])
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "metrics.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["metric", "value"])
            for k in keys:
                w.writerow([k, f"{metrics[k]:.6f}"])
        if not args.no_figures:
            from .plotting import plot_accuracies

            name = f"{model.cfg.family}{' + OAMixer' if model.cfg.oamix else ''}"
            plot_accuracies({name: metrics}, out / "accuracy.png")
    return 0


def _kappa_source(args) -> tuple[list[float], list[float], str]:
    if args.checkpoint:
        model, _ = load_checkpoint(args.checkpoint)
        rep = report_mask_scales(model)
        return rep["per_layer"], rep["quarters"], model.cfg.family
    records = read_log(args.log)
    reports = [r for r in records if r.get("event") == "kappa_report"]
    if not reports:
        raise OAMixerError(f"{args.log} has no kappa_report record (vanilla run?)")
    return reports[-1]["per_layer"], reports[-1]["quarters"], "model"


def cmd_report_kappa(args) -> int:
    if not args.checkpoint and not args.log:
        print("report-kappa needs --checkpoint or --log", file=sys.stderr)
        return 2
    per_layer, quarters, family = _kappa_source(args)
    print("layer\tkappa")
    for i, v in enumerate(per_layer, start=1):
        print(f"{i}\t{v!r}")
    print()
    print(format_kappa_table({family: quarters}))
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "kappa.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["layer", "kappa"])
            w.writerows([[i, repr(v)] for i, v in enumerate(per_layer, start=1)])
            w.writerows([[f"quarter{q}", repr(v)] for q, v in enumerate(quarters, start=1)])
        if not args.no_figures:
            from .plotting import plot_kappa

            plot_kappa(per_layer, quarters, out / "kappa.png", title=family)
    return 0


def cmd_selftest(args) -> int:
    from .selftest import run_selftest

    return 1 if run_selftest() else 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="oamixer", description="Object-aware mixing layers at desk scale.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="write a synthetic benchmark directory")
    g.add_argument("--config", help="JSON config (data section used)")
    g.add_argument("--seed", type=int)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train a model and write log + checkpoint")
    t.add_argument("--config", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--out", required=True)
    t.add_argument("--no-figures", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on every benchmark split")
    e.add_argument("--config", required=True)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--seed", type=int)
    e.add_argument("--out")
    e.add_argument("--no-figures", action="store_true")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("report-kappa", help="print per-layer and quarter-averaged mask scales")
    r.add_argument("--checkpoint")
    r.add_argument("--log")
    r.add_argument("--out")
    r.add_argument("--no-figures", action="store_true")
    r.set_defaults(func=cmd_report_kappa)

    s = sub.add_parser("selftest", help="run the oracle / invariant checks")
    s.set_defaults(func=cmd_selftest)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except OAMixerError as exc:
        print(f"oamixer {args.command}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
