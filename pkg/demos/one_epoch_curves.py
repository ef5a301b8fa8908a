"""Pre-train with both losses on one seed and chart holdout Hit@3 per epoch.

    python demos/one_epoch_curves.py --seed 0 --out curves.svg

``--users`` shrinks the world (items scale with it) for a quick look; the
default is the full-size world used by the acceptance tests.
"""

import argparse
import dataclasses
from pathlib import Path

from idembed import persistence as io
from idembed.datagen import GeneratorConfig
from idembed.evaluation import detect_one_epoch_overfit
from idembed.pipeline import ExperimentConfig, PretrainLoss, build_corpora, run_pretrain


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--users", type=int, default=GeneratorConfig.n_users)
    ap.add_argument("--out", type=Path, default=Path("one_epoch_curves.svg"))
    args = ap.parse_args()

    base = ExperimentConfig()
    gen = dataclasses.replace(base.generator, n_users=args.users,
                              n_items=args.users * base.generator.n_items // base.generator.n_users)
    series = {}
    for loss in PretrainLoss:
        cfg = dataclasses.replace(base, generator=gen, pretrain_loss=loss).for_seed(args.seed)
        _, metrics = run_pretrain(cfg, build_corpora(cfg))
        curve = [m.hit_at_k for m in metrics]
        verdict = detect_one_epoch_overfit(curve[1:], threshold=cfg.overfit_threshold)
        print(f"{loss.value:<12}" + " ".join(f"{h:.4f}" for h in curve)
              + f"   peak epoch {verdict.peak_epoch}, overfit={verdict.verdict}")
        series[loss.value] = list(enumerate(curve))[1:]
    args.out.write_text(io.line_chart_svg(series, "pre-train holdout hit@3"))
    print(f"wrote {args.out}")


if __name__ == "__main__":
    main()
