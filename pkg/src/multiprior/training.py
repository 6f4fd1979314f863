"""Training loop, early stopping and cross-validation splits."""
from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import tensor_core as tc
from .architectures import (MultipriorModel, UNetModel, checkpoint_bytes,
                            checkpoint_from_bytes, patch_geometry)
from .metrics import generalized_dice_loss
from .phantom import substream
from .sampling import CenterSampler, PaddedSubject, Subject, target_start

log = logging.getLogger(__name__)

PAPER_LR = {"multiprior": 5e-5, "unet": 1e-4}
PAPER_DECAY = {"multiprior": 1e-5, "unet": 0.0}


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 32
    patches_per_subject: int = 250
    max_updates: int = 220
    learning_rate: float | None = None   # None: per-architecture default
    weight_decay: float | None = None
    delta: float = 0.001
    patience: int = 4
    max_epochs: int = 100
    n_val: int = 3
    val_patches_per_subject: int = 32
    target_size: int = 9                 # Multiprior target edge during training
    sampling: str = "balanced"
    dice_norm: str = "l2"
    max_seconds: float | None = None
    seed: int = 0

    def __post_init__(self):
        for name in ("batch_size", "patches_per_subject", "max_updates", "patience",
                     "max_epochs", "n_val", "val_patches_per_subject", "target_size"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.patience > self.max_epochs:
            raise ValueError("patience cannot exceed max_epochs")
        if self.delta < 0:
            raise ValueError("delta must be non-negative")
        if self.learning_rate is not None and self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")

    def lr_for(self, kind):
        return PAPER_LR[kind] if self.learning_rate is None else self.learning_rate

    def decay_for(self, kind):
        return PAPER_DECAY[kind] if self.weight_decay is None else self.weight_decay

    @classmethod
    def desk(cls, **kw):
        """CPU-budget schedule: larger target boxes, small batches, higher LR."""
        base = dict(batch_size=4, target_size=21, patches_per_subject=24, max_updates=120,
                    learning_rate=1e-3, max_epochs=12, patience=4,
                    val_patches_per_subject=8)
        base.update(kw)
        return cls(**base)

    def to_json(self):
        return json.dumps(asdict(self), indent=1)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown training options: {sorted(unknown)}")
        return cls(**d)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    seconds: float
    updates: int


@dataclass
class TrainingRun:
    epochs: list = field(default_factory=list)
    best_epoch: int = 0
    best_val_loss: float = float("inf")
    stop_reason: str = ""
    checkpoint: bytes = b""

    @property
    def val_losses(self):
        return [e.val_loss for e in self.epochs]

    def to_dict(self):
        return {"epochs": [asdict(e) for e in self.epochs], "best_epoch": self.best_epoch,
                "best_val_loss": self.best_val_loss, "stop_reason": self.stop_reason}


class EarlyStopping:
    """Stop once ``patience`` consecutive epochs improve the best loss by < ``delta``.

    The first epoch always counts as an improvement.
    """

    def __init__(self, delta=0.001, patience=4):
        self.delta = delta
        self.patience = patience
        self.best = float("inf")
        self.stale = 0

    def update(self, loss) -> bool:
        """Record one validation loss; True means stop now."""
        if self.best - loss > self.delta or self.best == float("inf"):
            self.stale = 0
        else:
            self.stale += 1
        self.best = min(self.best, loss)
        return self.stale >= self.patience


def early_stop_epoch(val_losses, delta=0.001, patience=4):
    """1-based epoch at which the rule fires, or None."""
    es = EarlyStopping(delta, patience)
    for i, v in enumerate(val_losses, 1):
        if es.update(v):
            return i
    return None


# --------------------------------------------------------------------------
# batches
# --------------------------------------------------------------------------

def _extent(model, cfg):
    if model.kind == "unet":
        return model.config.patch_size
    patch_geometry(cfg.target_size, model.config.context_downsample, model.config.n_detail_layers)
    return cfg.target_size


def make_batch(model, items, extent):
    """Stack inputs and one-hot truth for ``items = [(PaddedSubject, centre), ...]``."""
    ext = (extent,) * 3
    ins, truths = [], []
    for ps, c in items:
        start = target_start(c, extent)
        ins.append(ps.box(start, ext) if model.kind == "unet" else ps.windows(start, ext))
        truths.append(ps.truth(start, ext))
    arrays = [np.stack(a) for a in zip(*ins)]
    return arrays, np.stack(truths)


def forward(model, arrays, mode):
    if model.kind == "unet":
        return model.forward(arrays[0], arrays[1], mode=mode)
    return model.forward(arrays[0], arrays[1], arrays[2], mode=mode)


def evaluate_loss(model, batches, norm="l2"):
    preds, truths = [], []
    with tc.no_grad():
        for arrays, truth in batches:
            preds.append(forward(model, arrays, "infer").data)
            truths.append(truth)
    loss, _ = generalized_dice_loss(np.concatenate(preds), np.concatenate(truths), norm=norm)
    return loss


def _prepare(subjects):
    return [s if isinstance(s, PaddedSubject) else PaddedSubject(s) for s in subjects]


# --------------------------------------------------------------------------
# loop
# --------------------------------------------------------------------------

def train(model, train_subjects, val_subjects, config: TrainConfig | None = None,
          on_epoch=None) -> TrainingRun:
    """Adam on generalized Dice loss with early stopping on a fixed validation set.

    The model ends up holding the weights of the best validation epoch.
    """
    cfg = config or TrainConfig()
    if not train_subjects or not val_subjects:
        raise ValueError("need at least one training and one validation subject")
    t_start = time.process_time()
    extent = _extent(model, cfg)
    lr, wd = cfg.lr_for(model.kind), cfg.decay_for(model.kind)
    train_ps, val_ps = _prepare(train_subjects), _prepare(val_subjects)
    samplers = [CenterSampler(p.labels[(slice(p.low, p.low + p.dims[0]),
                                        slice(p.low, p.low + p.dims[1]),
                                        slice(p.low, p.low + p.dims[2]))],
                              extent, cfg.sampling) for p in train_ps]

    val_rng = substream(cfg.seed, "validation")
    val_items = []
    for p in val_ps:
        lab = p.labels[p.low:p.low + p.dims[0], p.low:p.low + p.dims[1], p.low:p.low + p.dims[2]]
        val_items += [(p, c) for c in CenterSampler(lab, extent, cfg.sampling)(
            cfg.val_patches_per_subject, val_rng)]
    val_batches = [make_batch(model, val_items[i:i + cfg.batch_size], extent)
                   for i in range(0, len(val_items), cfg.batch_size)]

    epoch_rng = substream(cfg.seed, "epochs")
    stopper = EarlyStopping(cfg.delta, cfg.patience)
    run = TrainingRun()
    params = model.parameters()
    for epoch in range(1, cfg.max_epochs + 1):
        t0 = time.process_time()
        pool = [(p, c) for p, s in zip(train_ps, samplers)
                for c in s(cfg.patches_per_subject, epoch_rng)]
        order = epoch_rng.permutation(len(pool))
        n_updates = min(cfg.max_updates, len(pool) // cfg.batch_size)
        losses = []
        for u in range(n_updates):
            items = [pool[i] for i in order[u * cfg.batch_size:(u + 1) * cfg.batch_size]]
            arrays, truth = make_batch(model, items, extent)
            out = forward(model, arrays, "train")
            loss, grad = generalized_dice_loss(out.data, truth, norm=cfg.dice_norm)
            if not np.isfinite(loss):
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch}, update {u}; "
                    f"output range [{np.nanmin(out.data)}, {np.nanmax(out.data)}]")
            out.backward(grad)
            tc.adam_step(params, lr=lr, weight_decay=wd)
            losses.append(loss)
            if cfg.max_seconds and time.process_time() - t_start > cfg.max_seconds:
                break
        val_loss = evaluate_loss(model, val_batches, cfg.dice_norm)
        rec = EpochRecord(epoch, float(np.mean(losses)) if losses else float("nan"),
                          val_loss, time.process_time() - t0, len(losses))
        run.epochs.append(rec)
        log.info("epoch %d train %.4f val %.4f (%.1fs, %d updates)", epoch, rec.train_loss,
                 val_loss, rec.seconds, rec.updates)
        if val_loss < run.best_val_loss:
            run.best_val_loss, run.best_epoch = val_loss, epoch
            run.checkpoint = checkpoint_bytes(model)
        if on_epoch is not None:
            on_epoch(rec)
        if stopper.update(val_loss):
            run.stop_reason = "patience"
            break
        if cfg.max_seconds and time.process_time() - t_start > cfg.max_seconds:
            run.stop_reason = "time_budget"
            break
    else:
        run.stop_reason = "max_epochs"
    restore(model, run.checkpoint)
    return run


def restore(model, blob: bytes):
    """Copy weights and running statistics from checkpoint bytes into ``model``."""
    best = checkpoint_from_bytes(blob)
    src = best.named_parameters()
    for name, p in model.named_parameters().items():
        p.data = src[name].data.astype(p.data.dtype)
    bufs = best.named_buffers()
    for name, arr in model.named_buffers().items():
        arr[...] = bufs[name]


# --------------------------------------------------------------------------
# cross-validation
# --------------------------------------------------------------------------

def crossval_split(subjects, k=4, rng=None, n_val=3):
    """``k`` folds of ``(train, val, test)`` index lists; tests partition the subjects."""
    n = len(subjects) if not isinstance(subjects, int) else subjects
    if n < k + n_val:
        raise ValueError(f"need at least {k + n_val} subjects for {k} folds, got {n}")
    rng = rng if rng is not None else np.random.default_rng(0)
    perm = rng.permutation(n)
    sizes = [n // k + (1 if i < n % k else 0) for i in range(k)]
    folds, pos = [], 0
    for size in sizes:
        test = sorted(perm[pos:pos + size].tolist())
        rest = [int(i) for i in perm if i not in set(test)]
        val_idx = rng.choice(len(rest), size=n_val, replace=False)
        val = sorted(rest[i] for i in val_idx)
        train_ = sorted(set(rest) - set(val))
        folds.append((train_, val, test))
        pos += size
    return folds


def build_subjects(images, labels, tpms, names=None):
    names = names or [f"s{i:03d}" for i in range(len(images))]
    if isinstance(tpms, (list, tuple)):
        return [Subject(i, l, t, n) for i, l, t, n in zip(images, labels, tpms, names)]
    return [Subject(i, l, tpms, n) for i, l, n in zip(images, labels, names)]


def model_for(kind, **config):
    from .architectures import build_model
    return build_model(kind, config)


__all__ = ["TrainConfig", "TrainingRun", "EpochRecord", "EarlyStopping", "early_stop_epoch",
           "train", "restore", "crossval_split", "make_batch", "evaluate_loss", "forward",
           "TrainingDivergedError", "build_subjects", "MultipriorModel", "UNetModel"]
