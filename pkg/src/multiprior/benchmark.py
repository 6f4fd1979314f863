"""Phantom cohorts, cached training runs and the evaluation behind the benchmark scripts."""
from __future__ import annotations

import hashlib
import itertools
import json
import os
import time
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from .architectures import build_model, checkpoint_bytes, checkpoint_from_bytes
from .inference import SegmentOptions, segment_volume
from .metrics import adjacency_count, confusion, dice_report
from .phantom import PhantomConfig, generate_phantom, population_tpm
from .crf import PROHIBITED_PAIRS, CrfConfig, CrfProblem, _mean_field_fast
from .sampling import Subject
from .training import TrainConfig, train
from .volume_io import ProbabilityVolume, zscore_normalize

# modules whose code determines a training run; edits invalidate cached checkpoints
_RUN_MODULES = ("architectures", "tensor_core", "kernels", "training", "sampling",
                "phantom", "metrics", "volume_io")


def default_cache():
    return Path(os.environ.get("MULTIPRIOR_CACHE", Path.home() / ".cache" / "multiprior"))


def code_digest() -> str:
    h = hashlib.sha256()
    here = Path(__file__).parent
    for name in _RUN_MODULES:
        h.update((here / f"{name}.py").read_bytes())
    return h.hexdigest()[:16]


@dataclass
class CohortConfig:
    n_train: int = 20          # training phantoms, validation subjects included
    n_val: int = 3
    n_test: int = 5
    edge: int = 96
    n_lesions: int = 2
    lesion_radius: tuple = (4.0, 8.0)
    noise: float = 0.05
    population: int = 20
    seed: int = 0

    def phantom(self, lesions=True):
        base = PhantomConfig(edge=self.edge, noise=self.noise)
        return base.with_lesions(self.n_lesions, tuple(self.lesion_radius)) if lesions else base

    def key(self):
        return asdict(self)


@dataclass
class Cohort:
    config: CohortConfig
    train: list
    val: list
    test: list            # Subjects with labels, held out

    @property
    def tpm(self):
        return self.test[0].tpm


def make_cohort(cfg: CohortConfig) -> Cohort:
    """Train, validation and test phantoms from disjoint seed ranges; one shared TPM."""
    tpm = population_tpm(cfg.phantom(lesions=False), cfg.population, cfg.seed)
    pc = cfg.phantom(lesions=cfg.n_lesions > 0)
    base = cfg.seed * 10_000
    subj = lambda s, tag: Subject(*generate_phantom(pc, s), tpm, f"{tag}{s}")
    fit = [subj(base + i, "train") for i in range(cfg.n_train)]
    test = [subj(base + 5_000 + i, "test") for i in range(cfg.n_test)]
    return Cohort(cfg, fit[cfg.n_val:], fit[:cfg.n_val], test)


# --------------------------------------------------------------------------
# cached training
# --------------------------------------------------------------------------

@dataclass
class TrainedModel:
    model: object
    run: dict
    cpu_seconds: float
    cached: bool = False


def _digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:16]


def train_cached(kind, model_config: dict, cohort: Cohort, tcfg: TrainConfig,
                 cache_dir="default", tag="") -> TrainedModel:
    """Train once per (architecture, cohort, schedule, code); later calls reload the checkpoint.

    ``cache_dir=None`` disables caching; the default honours ``MULTIPRIOR_CACHE``.
    """
    key = _digest({"kind": kind, "model": model_config, "cohort": cohort.config.key(),
                   "train": asdict(tcfg), "code": code_digest()})
    if cache_dir == "default":
        cache_dir = default_cache()
    cache_dir = Path(cache_dir) if cache_dir else None
    if cache_dir is not None:
        ckpt = cache_dir / f"{tag or kind}-{key}.ckpt"
        meta = ckpt.with_suffix(".json")
        if ckpt.exists() and meta.exists():
            info = json.loads(meta.read_text())
            model = checkpoint_from_bytes(ckpt.read_bytes())
            return TrainedModel(model, info["run"], info["cpu_seconds"], cached=True)
    model = build_model(kind, model_config)
    t0 = time.process_time()
    run = train(model, cohort.train, cohort.val, tcfg)
    cpu = time.process_time() - t0
    if cache_dir is not None:
        cache_dir.mkdir(parents=True, exist_ok=True)
        ckpt.write_bytes(checkpoint_bytes(model))
        meta.write_text(json.dumps({"run": run.to_dict(), "cpu_seconds": cpu, "kind": kind,
                                    "model": model_config, "train": asdict(tcfg),
                                    "cohort": cohort.config.key()}, indent=1, default=str))
    return TrainedModel(model, run.to_dict(), cpu)


# --------------------------------------------------------------------------
# evaluation
# --------------------------------------------------------------------------

@dataclass
class ScanResult:
    name: str
    dice: list                 # per class, None when absent
    mean_dice: float           # over present classes, background excluded
    confusion: np.ndarray
    prohibited_adjacency: int
    cpu_seconds: float

    def to_dict(self):
        d = asdict(self)
        d["confusion"] = self.confusion.tolist()
        return d


def prohibited_adjacency(labels) -> int:
    return sum(adjacency_count(labels, a, b) for a, b in PROHIBITED_PAIRS)


def score(name, truth, labels, seconds=0.0) -> ScanResult:
    rep = dice_report(truth, labels)
    return ScanResult(name, rep.per_class, rep.mean_without_background,
                      confusion(truth, labels), prohibited_adjacency(labels), seconds)


def evaluate(model, subjects, opts: SegmentOptions | None = None):
    """Segment and score each subject; returns ``(results, probability volumes)``."""
    opts = opts or SegmentOptions()
    results, probs = [], []
    for s in subjects:
        t0 = time.process_time()
        pv, lv = segment_volume(model, s.image, s.tpm, opts)
        results.append(score(s.name, s.labels, lv, time.process_time() - t0))
        probs.append(pv)
    return results, probs


def refine(probs: ProbabilityVolume, image, config: CrfConfig):
    """CRF marginals for a stored network output (the image is z-scored here)."""
    z = zscore_normalize(image).data
    q = _mean_field_fast(CrfProblem.from_probabilities(probs.data, z, config.unary_floor), config)
    return ProbabilityVolume(q.astype(np.float32), probs.spacing)


def confusion_delta(a_results, b_results):
    """Summed confusion of ``a`` minus that of ``b``; every row sums to zero."""
    return (sum(r.confusion for r in a_results) - sum(r.confusion for r in b_results))


def crf_grid(probs, subjects, grid: dict, base: CrfConfig | None = None):
    """Mean Dice and prohibited adjacencies for every combination in ``grid``.

    ``grid`` maps CrfConfig field names to candidate values.
    """
    base = base or CrfConfig()
    names = sorted(grid)
    rows = []
    for values in itertools.product(*(grid[n] for n in names)):
        cfg = replace(base, **dict(zip(names, values)))
        res = [score(s.name, s.labels, refine(p, s.image, cfg).argmax())
               for p, s in zip(probs, subjects)]
        rows.append({**dict(zip(names, values)),
                     "mean_dice": float(np.mean([r.mean_dice for r in res])),
                     "prohibited_adjacency": int(sum(r.prohibited_adjacency for r in res))})
    return rows
