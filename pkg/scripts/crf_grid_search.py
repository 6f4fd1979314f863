"""Grid-search CRF weights on the validation phantoms of the benchmark cohort.

Writes every grid row to grid.tsv and the best configuration (highest validation
mean Dice) to best_crf.json, ready for ``multiprior segment --crf-config``.

    python3 scripts/crf_grid_search.py --out runs/crf-grid --w-appearance 0.01 0.03 0.1 --w-smooth 0.25 0.5 1
"""
import argparse
import logging
from dataclasses import asdict
from pathlib import Path

from multiprior.architectures import MultipriorConfig
from multiprior.benchmark import CohortConfig, crf_grid, evaluate, make_cohort, train_cached
from multiprior.crf import CrfConfig
from multiprior.inference import SegmentOptions
from multiprior.metrics import write_tsv
from multiprior.training import TrainConfig


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", type=Path, required=True)
    ap.add_argument("--minutes", type=float, default=40.0, help="training CPU budget")
    ap.add_argument("--w-appearance", type=float, nargs="+", default=[0.03, 0.1])
    ap.add_argument("--w-smooth", type=float, nargs="+", default=[0.25, 0.5])
    ap.add_argument("--theta-alpha", type=float, nargs="+", default=[3.0])
    ap.add_argument("--theta-beta", type=float, nargs="+", default=[0.5])
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    args.out.mkdir(parents=True, exist_ok=True)

    cohort = make_cohort(CohortConfig())
    tm = train_cached("multiprior", asdict(MultipriorConfig(seed=0)), cohort,
                      TrainConfig.desk(max_seconds=args.minutes * 60), tag="benchmark-multiprior")
    _, probs = evaluate(tm.model, cohort.val, SegmentOptions(use_crf=False))
    grid = {"w_appearance": args.w_appearance, "w_smooth": args.w_smooth,
            "theta_alpha": args.theta_alpha, "theta_beta": args.theta_beta}
    rows = crf_grid(probs, cohort.val, grid)
    for r in rows:
        print(r)
    write_tsv(rows, args.out / "grid.tsv")
    best = max(rows, key=lambda r: r["mean_dice"])
    CrfConfig(**{k: best[k] for k in grid}).save(args.out / "best_crf.json")
    print(f"best: {best}")


if __name__ == "__main__":
    main()
