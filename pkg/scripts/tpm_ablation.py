"""Train an architecture with and without its TPM channels and compare held-out phantoms.

    python3 scripts/tpm_ablation.py --kind multiprior --out runs/tpm-multiprior
    python3 scripts/tpm_ablation.py --kind unet --out runs/tpm-unet --noise 0.15 --lesion-radius 5 10

``--noise`` and ``--lesion-radius`` make CSF, air and background harder to tell apart
than the default phantoms do.
"""
import argparse
import json
import logging
from dataclasses import asdict
from pathlib import Path

import numpy as np

from multiprior.architectures import MultipriorConfig, UNetConfig
from multiprior.benchmark import CohortConfig, confusion_delta, evaluate, make_cohort, train_cached
from multiprior.inference import SegmentOptions
from multiprior.stats import wilcoxon_paired
from multiprior.training import TrainConfig
from multiprior.volume_io import BACKGROUND, CLASS_NAMES, CSF

MODELS = {
    "multiprior": lambda zero: MultipriorConfig.reduced(8, (32, 32), seed=0, zero_tpm=zero),
    "unet": lambda zero: UNetConfig(widths=(8, 16, 32), seed=0, zero_tpm=zero),
}


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--kind", choices=sorted(MODELS), default="multiprior")
    ap.add_argument("--out", type=Path, required=True)
    ap.add_argument("--minutes", type=float, default=8.0, help="training CPU budget per model")
    ap.add_argument("--seed", type=int, default=0, help="cohort seed")
    ap.add_argument("--noise", type=float, default=0.05, help="phantom noise sd")
    ap.add_argument("--lesion-radius", type=float, nargs=2, default=(4.0, 8.0))
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    args.out.mkdir(parents=True, exist_ok=True)

    cohort = make_cohort(CohortConfig(seed=args.seed, noise=args.noise,
                                      lesion_radius=tuple(args.lesion_radius)))
    schedule = TrainConfig.desk(max_updates=60, max_epochs=8, max_seconds=args.minutes * 60)
    res = {}
    for zero in (False, True):
        tm = train_cached(args.kind, asdict(MODELS[args.kind](zero)), cohort, schedule,
                          tag=f"ablation-{args.kind}-{int(zero)}")
        res[zero], _ = evaluate(tm.model, cohort.test, SegmentOptions(use_crf=False))
    a = [r.mean_dice for r in res[False]]
    b = [r.mean_dice for r in res[True]]
    delta = confusion_delta(res[False], res[True])
    summary = {"with_tpm": a, "tpm_zeroed": b, "wins": int(sum(x > y for x, y in zip(a, b))),
               "wilcoxon_p": wilcoxon_paired(a, b).p_value,
               "confusion_delta": {"rows_true_cols_pred": list(CLASS_NAMES),
                                   "values": delta.tolist()}}
    (args.out / "summary.json").write_text(json.dumps(summary, indent=1))
    print(f"with TPM {np.mean(a):.4f}, zeroed {np.mean(b):.4f}, wins {summary['wins']}/{len(a)}")
    print(f"CSF->background {int(sum(r.confusion[CSF, BACKGROUND] for r in res[False]))} with TPM, "
          f"{int(sum(r.confusion[CSF, BACKGROUND] for r in res[True]))} zeroed")
    print("confusion delta (with - without), rows true, columns predicted:")
    print(delta)


if __name__ == "__main__":
    main()
