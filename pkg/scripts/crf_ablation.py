"""Prohibited tissue adjacencies and Dice on held-out phantoms before and after the CRF.

    python3 scripts/crf_ablation.py --crf-config runs/crf-grid/best_crf.json
"""
import argparse
import logging
from dataclasses import asdict

from multiprior.architectures import MultipriorConfig
from multiprior.benchmark import CohortConfig, evaluate, make_cohort, refine, score, train_cached
from multiprior.crf import CrfConfig
from multiprior.inference import SegmentOptions
from multiprior.training import TrainConfig


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--crf-config", default=None, help="JSON config; built-in defaults if omitted")
    ap.add_argument("--minutes", type=float, default=40.0, help="training CPU budget")
    ap.add_argument("--noise", type=float, default=None, help="override test phantom noise")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    cohort = make_cohort(CohortConfig())
    tm = train_cached("multiprior", asdict(MultipriorConfig(seed=0)), cohort,
                      TrainConfig.desk(max_seconds=args.minutes * 60), tag="benchmark-multiprior")
    test = cohort.test
    if args.noise is not None:
        test = make_cohort(CohortConfig(n_train=0, n_val=0, noise=args.noise)).test
    cfg = CrfConfig.load(args.crf_config) if args.crf_config else CrfConfig()
    before, probs = evaluate(tm.model, test, SegmentOptions(use_crf=False))
    print("scan\tdice_before\tdice_after\tadjacent_before\tadjacent_after")
    for r0, p, s in zip(before, probs, test):
        r1 = score(s.name, s.labels, refine(p, s.image, cfg).argmax())
        print(f"{s.name}\t{r0.mean_dice:.4f}\t{r1.mean_dice:.4f}\t"
              f"{r0.prohibited_adjacency}\t{r1.prohibited_adjacency}")


if __name__ == "__main__":
    main()
