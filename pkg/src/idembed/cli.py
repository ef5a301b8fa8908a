"""Command-line entry points.

Every subcommand writes its results under ``--out`` and nothing to stdout;
diagnostics go to stderr.  Exit status: 0 success, 1 usage error, 2 corrupt
input data or checkpoint.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from collections import defaultdict
from pathlib import Path
from typing import Dict, List, Sequence

import numpy as np

from . import persistence as io
from .datagen import summarize
from .evaluation import detect_one_epoch_overfit
from .pipeline import (
    ARM_ORDER,
    Arm,
    ExperimentConfig,
    PretrainLoss,
    build_corpora,
    run_downstream,
    run_pretrain,
    run_seed,
    run_single_stage,
)

log = logging.getLogger("idembed")

EXIT_OK, EXIT_USAGE, EXIT_CORRUPT = 0, 1, 2

CORPUS_FILES = ("pretrain", "downstream_train", "downstream_holdout", "pretrain_holdout")

_MODES = {
    "baseline": Arm.BASELINE,
    "frozen": Arm.TWO_STAGE_FROZEN,
    "finetune": Arm.TWO_STAGE_FINETUNE,
    "single-stage": Arm.SINGLE_STAGE,
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


def _parser() -> argparse.ArgumentParser:
    p = _Parser(prog="idembed", description="ID-embedding pre-training laboratory")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, seed=True):
        sp.add_argument("--config", type=Path, help="key = value config file (defaults if omitted)")
        sp.add_argument("--out", type=Path, required=True, help="output directory")
        if seed:
            sp.add_argument("--seed", type=int, help="run seed (default: first of seed_list)")

    common(sub.add_parser("gen", help="generate and save the four corpora"))
    sp = sub.add_parser("pretrain", help="stage 1: two-tower pre-training")
    common(sp)
    sp.add_argument("--loss", choices=[x.value for x in PretrainLoss])
    sp = sub.add_parser("downstream", help="stage 2: CTR model training")
    common(sp)
    sp.add_argument("--mode", choices=list(_MODES), required=True)
    sp.add_argument("--init", type=Path, help="pre-trained checkpoint (frozen/finetune)")
    common(sub.add_parser("ablation", help="all four arms for every seed"), seed=False)
    sp = sub.add_parser("report", help="lift table and hit@k chart from metrics files")
    sp.add_argument("metrics", nargs="+", type=Path, help="metrics CSV files or directories")
    sp.add_argument("--out", type=Path, required=True)
    sub.add_parser("config", help="print the default config file").add_argument(
        "--out", type=Path, required=True)
    return p


def _read_cfg(args) -> ExperimentConfig:
    if args.config is None:
        return ExperimentConfig()
    if not args.config.is_file():
        raise UsageError(f"config file not found: {args.config}")
    try:
        return io.load_config(args.config)
    except io.ConfigError as e:
        raise UsageError(f"{args.config}: {e}") from e


def _load_cfg(args) -> ExperimentConfig:
    """The config narrowed to one run seed."""
    cfg = _read_cfg(args)
    seed = getattr(args, "seed", None)
    return cfg.for_seed(cfg.seeds[0] if seed is None else seed)


# ---------------------------------------------------------------- subcommands


def cmd_gen(args) -> None:
    cfg = _load_cfg(args)
    corpora = build_corpora(cfg)
    g = cfg.generator
    args.out.mkdir(parents=True, exist_ok=True)
    lines = []
    for name, ds in zip(CORPUS_FILES, corpora):
        io.save_dataset(ds, args.out / f"{name}.iddat", g.n_users, g.n_items)
        lines.append(f"[{name}]\n" + summarize(ds, g.n_items))
    (args.out / "summary.txt").write_text("\n".join(lines))


def cmd_pretrain(args) -> None:
    cfg = _load_cfg(args)
    if args.loss:
        cfg = dataclasses.replace(cfg, pretrain_loss=PretrainLoss(args.loss))
    corpora = build_corpora(cfg)
    model, metrics = run_pretrain(cfg, corpora, arm=f"pretrain_{cfg.pretrain_loss.value}")
    args.out.mkdir(parents=True, exist_ok=True)
    io.save_checkpoint(model, args.out / "pretrain.ckpt", io.config_digest(cfg))
    io.export_metrics(metrics, args.out / "pretrain_metrics.csv")


def cmd_downstream(args) -> None:
    cfg = _load_cfg(args)
    arm = _MODES[args.mode]
    needs_init = arm in (Arm.TWO_STAGE_FROZEN, Arm.TWO_STAGE_FINETUNE)
    if needs_init and args.init is None:
        raise UsageError(f"--mode {args.mode} requires --init <checkpoint>")
    if not needs_init and args.init is not None:
        raise UsageError(f"--mode {args.mode} trains from scratch; drop --init")
    init = None
    if needs_init:
        if not args.init.is_file():
            raise UsageError(f"--init: file not found: {args.init}")
        g = cfg.generator
        init = io.load_checkpoint(args.init, expect_dim=cfg.dim,
                                  expect_rows=(g.n_users, g.n_items),
                                  expect_digest=io.config_digest(cfg))
    corpora = build_corpora(cfg)
    if arm is Arm.SINGLE_STAGE:
        _, metrics = run_single_stage(cfg, corpora)
    else:
        _, metrics = run_downstream(cfg, corpora, init, arm)
    args.out.mkdir(parents=True, exist_ok=True)
    io.export_metrics(metrics, args.out / f"{arm.value}.csv")


def cmd_ablation(args) -> None:
    cfg = _read_cfg(args)
    seeds = cfg.seeds
    if len(seeds) < 2:
        raise UsageError("ablation needs at least 2 seeds in seed_list")
    args.out.mkdir(parents=True, exist_ok=True)
    pre, finals = [], []
    for seed in seeds:
        scfg = cfg.for_seed(seed)
        r = run_seed(scfg, seed)
        d = args.out / f"seed_{seed}"
        d.mkdir(exist_ok=True)
        for arm in ARM_ORDER:
            io.export_metrics(r.metrics[arm.value], d / f"{arm.value}.csv")
        io.save_checkpoint(r.checkpoint, d / "pretrain.ckpt", io.config_digest(scfg))
        (d / "report.txt").write_text(_seed_report(seed, r.final_hit))
        pre += r.metrics["pretrain"]
        finals.append(r.final_hit)
    io.export_metrics(pre, args.out / "pretrain_metrics.csv")
    (args.out / "summary.txt").write_text(lift_table(finals))
    rows = [r for p in sorted(args.out.glob("seed_*/*.csv")) for r in io.read_metrics(p)]
    (args.out / "hit_curves.svg").write_text(_chart(rows, "downstream"))


def _seed_report(seed: int, final: Dict[str, float]) -> str:
    base = final[Arm.BASELINE.value]
    lines = [f"seed {seed}: final holdout hit@3", f"{'arm':<22}{'hit':>10}{'lift':>10}"]
    for arm in ARM_ORDER:
        h = final[arm.value]
        lines.append(f"{arm.value:<22}{h:>10.5f}{100 * (h - base) / base:>+9.3f}%")
    return "\n".join(lines) + "\n"


def lift_table(finals: Sequence[Dict[str, float]]) -> str:
    """Mean and sample stdev of final hit and of lift over baseline, per arm."""
    arms = [a for a in (x.value for x in ARM_ORDER) if all(a in f for f in finals)]
    base = np.array([f.get(Arm.BASELINE.value, np.nan) for f in finals])
    ddof = 1 if len(finals) > 1 else 0
    lines = [f"{'arm':<22}{'hit mean':>10}{'std':>9}{'lift mean':>11}{'std':>9}{'n':>4}"]
    for a in arms:
        h = np.array([f[a] for f in finals])
        lift = (h - base) / base
        lines.append(f"{a:<22}{h.mean():>10.5f}{h.std(ddof=ddof):>9.5f}"
                     f"{100 * lift.mean():>+10.3f}%{100 * lift.std(ddof=ddof):>8.3f}%{len(h):>4}")
    return "\n".join(lines) + "\n"


def _collect(paths: Sequence[Path]) -> List[dict]:
    files = []
    for p in paths:
        if p.is_dir():
            files += sorted(p.rglob("*.csv"))
        elif p.is_file():
            files.append(p)
        else:
            raise UsageError(f"no such metrics file: {p}")
    if not files:
        raise UsageError("no metrics files found")
    return [r for f in files for r in io.read_metrics(f)]


def _curves(rows: List[dict], stage: str = None) -> Dict[str, Dict[int, Dict[int, float]]]:
    """series name -> seed -> epoch -> holdout hit@k."""
    out: Dict[str, Dict[int, Dict[int, float]]] = defaultdict(lambda: defaultdict(dict))
    for r in rows:
        if r["split"] == "holdout" and r["metric"].startswith("hit_at_"):
            if stage is None or r["stage"] == stage:
                out[r["arm"]][r["seed"]][r["epoch"]] = r["value"]
    return out


def _chart(rows: List[dict], stage: str = None) -> str:
    series = {}
    for name, seeds in sorted(_curves(rows, stage).items()):
        epochs = sorted(set.intersection(*(set(s) for s in seeds.values())))
        series[name] = [(e, float(np.mean([s[e] for s in seeds.values()]))) for e in epochs]
    return io.line_chart_svg(series, "holdout hit@3 by epoch (mean over seeds)")


def cmd_report(args) -> None:
    rows = _collect(args.metrics)
    curves = _curves(rows)
    lines = ["holdout hit@3 per epoch (mean over seeds)"]
    for name, seeds in sorted(curves.items()):
        epochs = sorted(set.intersection(*(set(s) for s in seeds.values())))
        mean = [np.mean([s[e] for s in seeds.values()]) for e in epochs]
        lines.append(f"  {name:<24}" + " ".join(f"e{e}={m:.4f}" for e, m in zip(epochs, mean)))
    lines.append("")
    lines.append("one-epoch overfit check per series and seed")
    for name, seeds in sorted(curves.items()):
        for seed, by_epoch in sorted(seeds.items()):
            vals = [by_epoch[e] for e in sorted(by_epoch) if e >= 1]
            if len(vals) < 2:
                continue
            r = detect_one_epoch_overfit(vals)
            lines.append(f"  {name:<24}seed={seed:<4}peak_epoch={r.peak_epoch} "
                         f"degradation={r.degradation:+.4f} overfit={'yes' if r.verdict else 'no'}")
    finals = defaultdict(dict)
    for name, seeds in curves.items():
        for seed, by_epoch in seeds.items():
            finals[seed][name] = by_epoch[max(by_epoch)]
    if any(Arm.BASELINE.value in f for f in finals.values()):
        lines.append("")
        lines.append("final holdout hit@3 and lift over baseline")
        usable = [f for _, f in sorted(finals.items()) if Arm.BASELINE.value in f]
        lines.append(lift_table(usable).rstrip("\n"))
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "report.txt").write_text("\n".join(lines) + "\n")
    (args.out / "hit_curves.svg").write_text(_chart(rows))


def cmd_config(args) -> None:
    args.out.parent.mkdir(parents=True, exist_ok=True)
    args.out.write_text(io.config_to_text(ExperimentConfig()))


_COMMANDS = {
    "gen": cmd_gen,
    "pretrain": cmd_pretrain,
    "downstream": cmd_downstream,
    "ablation": cmd_ablation,
    "report": cmd_report,
    "config": cmd_config,
}


def cli_main(argv: Sequence[str] = None) -> int:
    try:
        args = _parser().parse_args(argv)
    except UsageError as e:
        print(e, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as e:  # --help
        return EXIT_OK if e.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s", stream=sys.stderr)
    try:
        _COMMANDS[args.command](args)
    except UsageError as e:
        print(f"idembed {args.command}: {e}", file=sys.stderr)
        return EXIT_USAGE
    except io.CorruptCheckpoint as e:
        print(f"idembed {args.command}: corrupt input: {e}", file=sys.stderr)
        return EXIT_CORRUPT
    return EXIT_OK


def main() -> None:
    sys.exit(cli_main())


if __name__ == "__main__":
    main()
