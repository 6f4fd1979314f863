"""``multiprior`` command line: phantom, train, segment, crf, evaluate, stats.

Exit codes: 0 success, 1 usage error, 2 data or format error.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _fmt(prog):
    return argparse.ArgumentDefaultsHelpFormatter(prog, max_help_position=32)


def _write_manifest(path, subcommand, args, inputs, outputs, t0, extra=None):
    manifest = {
        "subcommand": subcommand,
        "config": {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items()
                   if k not in ("func",)},
        "inputs": [str(p) for p in inputs], "outputs": [str(p) for p in outputs],
        "seed": getattr(args, "seed", None), "version": __version__,
        "wall_seconds": time.time() - t0,
    }
    manifest.update(extra or {})
    path = Path(path)
    tmp = path.with_name(path.name + ".part")
    tmp.write_text(json.dumps(manifest, indent=1, default=str))
    os.replace(tmp, path)


def _threads(n):
    from . import kernels
    if kernels.get_backend() == "torch":
        kernels._load_torch().set_num_threads(max(1, n))


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------

def cmd_phantom(args):
    from .phantom import PhantomConfig, generate_phantom, population_tpm
    from .volume_io import write_nifti, write_tpm

    t0 = time.time()
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    base = PhantomConfig(edge=args.edge, noise=args.noise)
    cfg = base.with_lesions(args.lesions) if args.lesions else base
    tpm = population_tpm(base, args.population, args.seed)
    tpm_path = out / "tpm.nii"
    write_tpm(tpm, tpm_path)
    subjects, outputs = [], [tpm_path]
    for i in range(args.n):
        img, lab = generate_phantom(cfg, args.seed * 10007 + i)
        ip, lp = out / f"phantom_{i:03d}_t1.nii", out / f"phantom_{i:03d}_labels.nii"
        write_nifti(img, ip)
        write_nifti(lab, lp)
        subjects.append({"name": f"phantom_{i:03d}", "image": ip.name, "labels": lp.name,
                         "tpm": tpm_path.name})
        outputs += [ip, lp]
    (out / "subjects.json").write_text(json.dumps({"subjects": subjects}, indent=1))
    _write_manifest(out / "manifest.json", "phantom", args, [], outputs, t0)
    print(f"wrote {args.n} phantoms and a TPM to {out}")
    return EXIT_OK


def _load_subjects(path):
    from .sampling import Subject
    from .volume_io import read_labels, read_nifti, read_tpm

    path = Path(path)
    entries = json.loads(path.read_text())["subjects"]
    tpms, subjects = {}, []
    for e in entries:
        r = lambda k: path.parent / e[k]
        if e["tpm"] not in tpms:
            tpms[e["tpm"]] = read_tpm(r("tpm"))
        subjects.append(Subject(read_nifti(r("image")), read_labels(r("labels")),
                                tpms[e["tpm"]], e.get("name", "")))
    return subjects


def cmd_train(args):
    from .architectures import build_model, read_model_spec, save_checkpoint
    from .training import TrainConfig, train

    t0 = time.time()
    _threads(args.threads)
    subjects = _load_subjects(args.subjects)
    if len(subjects) <= args.val:
        raise ValueError(f"need more than {args.val} subjects, got {len(subjects)}")
    kind, model_cfg = args.kind, {}
    if args.model_config:
        kind, model_cfg = read_model_spec(args.model_config, args.kind)
    model_cfg.setdefault("seed", args.seed)
    if args.zero_tpm:
        model_cfg["zero_tpm"] = True
    model = build_model(kind, model_cfg)
    overrides = json.loads(Path(args.train_config).read_text()) if args.train_config else {}
    overrides["seed"] = args.seed
    if args.max_minutes:
        overrides["max_seconds"] = 60.0 * args.max_minutes
    tcfg = TrainConfig.desk(**overrides) if args.preset == "desk" else TrainConfig.from_dict(overrides)
    rng = np.random.default_rng(args.seed)
    order = rng.permutation(len(subjects))
    val = [subjects[i] for i in order[:args.val]]
    tr = [subjects[i] for i in order[args.val:]]
    log_path = Path(str(args.out) + ".log.jsonl")
    with open(log_path, "w") as fh:
        run = train(model, tr, val, tcfg,
                    on_epoch=lambda r: (fh.write(json.dumps(r.__dict__) + "\n"), fh.flush()))
    save_checkpoint(model, args.out)
    _write_manifest(str(args.out) + ".manifest.json", "train", args, [args.subjects],
                    [args.out, log_path], t0,
                    {"model_hash": model.content_hash(), "run": run.to_dict(),
                     "train_config": json.loads(tcfg.to_json())})
    print(f"best epoch {run.best_epoch} val loss {run.best_val_loss:.4f} ({run.stop_reason})")
    return EXIT_OK


def _crf_config(path):
    from .crf import CrfConfig
    return CrfConfig.load(path) if path else CrfConfig()


def cmd_segment(args):
    from .inference import SegmentOptions, segment_file

    opts = SegmentOptions(tile_edge=args.tile_edge, use_crf=not args.no_crf,
                          crf_config=_crf_config(args.crf_config), threads=args.threads,
                          precision=args.precision)
    labels, manifest = segment_file(args.model, args.image, args.tpm, args.out, opts,
                                    args.crf_config)
    print(f"segmented {args.image} -> {args.out} in {manifest['timings']['segment_s']:.1f}s")
    return EXIT_OK


def cmd_crf(args):
    from .crf import crf_refine
    from .volume_io import ProbabilityVolume, read_nifti, read_nifti_4d, write_nifti, zscore_normalize

    t0 = time.time()
    cfg = _crf_config(args.crf_config)
    if args.write_config:
        cfg.save(args.write_config)
        print(f"wrote CRF config to {args.write_config}")
        if not args.probs:
            return EXIT_OK
    if not (args.probs and args.image and args.out):
        raise UsageError("crf: --probs, --image and --out are required")
    data, spacing = read_nifti_4d(args.probs)[:2]
    image = zscore_normalize(read_nifti(args.image))
    labels = crf_refine(ProbabilityVolume(data, spacing), image, cfg)
    write_nifti(labels, args.out)
    _write_manifest(str(args.out) + ".manifest.json", "crf", args, [args.probs, args.image],
                    [args.out], t0, {"crf": cfg.to_dict()})
    return EXIT_OK


def cmd_evaluate(args):
    from .metrics import (CLASS_NAMES, confusion, dice_report, dice_rows, volume_fractions,
                          write_tsv)
    from .volume_io import read_labels

    t0 = time.time()
    if len(args.pred) != len(args.truth):
        raise UsageError("evaluate: --pred and --truth need the same number of files")
    rows, conf_rows, vol_rows = [], [], []
    for p, t in zip(args.pred, args.truth):
        pred, truth = read_labels(p), read_labels(t)
        scan = Path(p).name
        rows += dice_rows(scan, dice_report(truth, pred))
        cm = confusion(truth, pred)
        for i, name in enumerate(CLASS_NAMES):
            conf_rows.append({"scan": scan, "truth": name,
                              **{n: int(cm[i, j]) for j, n in enumerate(CLASS_NAMES)}})
        for which, lab in (("pred", pred), ("truth", truth)):
            vols, fracs = volume_fractions(lab)
            for name in CLASS_NAMES:
                vol_rows.append({"scan": scan, "source": which, "class": name,
                                 "volume_mm3": f"{vols[name]:.3f}",
                                 "fraction": "" if name not in fracs else f"{fracs[name]:.6f}"})
    if args.out:
        out = Path(args.out)
        write_tsv(rows, out)
        write_tsv(conf_rows, out.with_name(out.stem + "_confusion.tsv"))
        write_tsv(vol_rows, out.with_name(out.stem + "_volumes.tsv"))
        _write_manifest(str(out) + ".manifest.json", "evaluate", args,
                        list(args.pred) + list(args.truth), [out], t0)
    else:
        write_tsv(rows, sys.stdout)
    return EXIT_OK


def _scores(path, cls):
    from .metrics import read_tsv
    out = {}
    for r in read_tsv(path):
        if r["class"] == cls and r["dice"] != "absent":
            out[r["scan"]] = float(r["dice"])
    if not out:
        raise ValueError(f"no '{cls}' rows in {path}")
    return out


def cmd_stats(args):
    from . import stats

    a, b = _scores(args.a, args.cls), _scores(args.b, args.cls)
    if args.test in ("wilcoxon", "tost"):
        common = sorted(set(a) & set(b))
        if len(common) < 3:
            raise ValueError("paired tests need scans present in both reports")
        xa, xb = [a[k] for k in common], [b[k] for k in common]
    else:
        xa, xb = list(a.values()), list(b.values())
    m = args.comparisons
    alpha = args.alpha
    rows = []
    if args.test == "wilcoxon":
        res = [stats.wilcoxon_paired(xa, xb)]
    elif args.test == "mann-whitney":
        res = [stats.mann_whitney_u(xa, xb)]
    elif args.test == "rank-sum":
        res = [stats.wilcoxon_rank_sum(xa, xb)]
    else:
        if args.margin is None:
            raise UsageError("stats: --margin is required for tost")
        t = stats.tost_paired(xa, xb, args.margin, alpha)
        res = [t.lower, t.upper]
    bon = stats.bonferroni([r.p_value for r in res] + [1.0] * (m - len(res)), alpha) \
        if m >= len(res) else stats.bonferroni([r.p_value for r in res], alpha)
    for r in res:
        rows.append({"test": r.test, "method": r.method, "n": r.n,
                     "statistic": f"{r.statistic:.6g}", "p_value": f"{r.p_value:.6g}",
                     "alpha_corrected": f"{bon.threshold:.6g}",
                     "significant": str(r.p_value < bon.threshold).lower()})
    from .metrics import write_tsv
    write_tsv(rows, args.out if args.out else sys.stdout)
    return EXIT_OK


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------

def build_parser():
    p = _Parser(prog="multiprior", description=__doc__.splitlines()[0], formatter_class=_fmt)
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    def add(name, func, help_):
        sp = sub.add_parser(name, help=help_, description=help_, formatter_class=_fmt)
        sp.set_defaults(func=func)
        sp.add_argument("--seed", type=int, default=0, help="master RNG seed")
        return sp

    sp = add("phantom", cmd_phantom, "generate synthetic head phantoms and a population TPM")
    sp.add_argument("--n", type=int, default=10, help="number of phantoms")
    sp.add_argument("--edge", type=int, default=96, help="volume edge in voxels")
    sp.add_argument("--lesions", type=int, default=0, help="CSF lesions per phantom")
    sp.add_argument("--noise", type=float, default=0.05, help="intensity noise sd")
    sp.add_argument("--population", type=int, default=20, help="subjects behind the TPM")
    sp.add_argument("--out-dir", required=True, help="output directory")

    sp = add("train", cmd_train, "train a model on a subjects.json listing")
    sp.add_argument("--subjects", required=True, help="subjects.json written by 'phantom'")
    sp.add_argument("--kind", choices=("multiprior", "unet"), default="multiprior",
                    help="architecture")
    sp.add_argument("--model-config", default=None, help="JSON architecture overrides")
    sp.add_argument("--train-config", default=None, help="JSON training overrides")
    sp.add_argument("--preset", choices=("paper", "desk"), default="desk",
                    help="training schedule preset")
    sp.add_argument("--val", type=int, default=3, help="validation subjects")
    sp.add_argument("--zero-tpm", action="store_true", help="ablation: feed zeros as TPM")
    sp.add_argument("--max-minutes", type=float, default=None, help="CPU time budget")
    sp.add_argument("--threads", type=int, default=1, help="kernel threads")
    sp.add_argument("--out", required=True, help="checkpoint path")

    sp = add("segment", cmd_segment, "segment a T1 volume")
    sp.add_argument("--model", required=True, help="checkpoint")
    sp.add_argument("--image", required=True, help="T1 NIfTI")
    sp.add_argument("--tpm", required=True, help="coregistered 6-channel TPM NIfTI")
    sp.add_argument("--out", required=True, help="label NIfTI to write")
    sp.add_argument("--no-crf", action="store_true", help="skip CRF refinement")
    sp.add_argument("--crf-config", default=None, help="CRF JSON config")
    sp.add_argument("--tile-edge", type=int, default=105, help="target tile edge (multiple of 3)")
    sp.add_argument("--threads", type=int, default=1, help="kernel threads")
    sp.add_argument("--precision", choices=("float32", "float64"), default="float32",
                    help="network arithmetic; float64 makes labels independent of tiling")

    sp = add("crf", cmd_crf, "refine a probability volume with the dense CRF")
    sp.add_argument("--probs", default=None, help="4-D probability NIfTI (7 channels)")
    sp.add_argument("--image", default=None, help="T1 NIfTI")
    sp.add_argument("--out", default=None, help="label NIfTI to write")
    sp.add_argument("--crf-config", default=None, help="CRF JSON config")
    sp.add_argument("--write-config", default=None, help="write the active CRF config here")

    sp = add("evaluate", cmd_evaluate, "Dice, confusion and tissue volumes against ground truth")
    sp.add_argument("--pred", nargs="+", required=True, help="predicted label NIfTIs")
    sp.add_argument("--truth", nargs="+", required=True, help="ground-truth label NIfTIs")
    sp.add_argument("--out", default=None, help="Dice TSV (confusion/volume TSVs alongside)")

    sp = add("stats", cmd_stats, "compare two Dice reports")
    sp.add_argument("--a", required=True, help="Dice TSV of method A")
    sp.add_argument("--b", required=True, help="Dice TSV of method B")
    sp.add_argument("--test", choices=("wilcoxon", "mann-whitney", "rank-sum", "tost"),
                    default="wilcoxon", help="test")
    sp.add_argument("--class", dest="cls", default="mean", help="row of the report to compare")
    sp.add_argument("--margin", type=float, default=None, help="TOST equivalence bound")
    sp.add_argument("--alpha", type=float, default=0.05, help="family-wise alpha")
    sp.add_argument("--comparisons", type=int, default=1, help="Bonferroni family size")
    sp.add_argument("--out", default=None, help="TSV output (default stdout)")
    return p


def main(argv=None) -> int:
    from .architectures import CheckpointError, GeometryError
    from .volume_io import NiftiFormatError, NiftiUnsupportedError

    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(str(e), file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except UsageError as e:
        print(str(e), file=sys.stderr)
        return EXIT_USAGE
    except (NiftiFormatError, NiftiUnsupportedError, CheckpointError, GeometryError,
            OSError, ValueError, KeyError) as e:
        print(f"multiprior {args.command}: {type(e).__name__}: {e}".splitlines()[0],
              file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
