"""Padded subject arrays, patch-centre sampling and training-example extraction."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .architectures import GeometryError, patch_geometry
from .tensor_core import antialias_blur
from .volume_io import (N_CLASSES, LabelVolume, TissueProbabilityMap, Volume3D, one_hot,
                        zscore_normalize)

MARGIN = 24  # half of the 48-voxel context shrink; every window fits after this pad


@dataclass
class Subject:
    image: Volume3D
    labels: LabelVolume | None
    tpm: TissueProbabilityMap
    name: str = ""

    def __post_init__(self):
        if self.tpm.dims != self.image.dims:
            raise ValueError(f"TPM dims {self.tpm.dims} vs image {self.image.dims}")
        if self.labels is not None and self.labels.dims != self.image.dims:
            raise ValueError(f"label dims {self.labels.dims} vs image {self.image.dims}")


class PaddedSubject:
    """Z-scored image, its anti-aliased copy, TPM and labels on a padded grid.

    ``low`` voxels are added before and ``high`` after each axis. Padding is
    zero for the image (after z-scoring), the TPM and the labels.
    """

    def __init__(self, subject: Subject, low=MARGIN, high=None, factor=3):
        high = low if high is None else high
        self.low = low
        self.dims = subject.image.dims
        self.factor = factor
        pad = lambda a, lead=0: np.pad(a, [(0, 0)] * lead + [(low, h) for h in _per_axis(high)])
        img = zscore_normalize(subject.image).data
        self.image = pad(img).astype(np.float32)
        self.blurred = antialias_blur(self.image, factor).astype(np.float32)
        self.tpm = _padded_tpm(subject.tpm.data, low, _per_axis(high))
        self.labels = None if subject.labels is None else pad(subject.labels.labels)
        self.name = subject.name

    def windows(self, start, extent):
        """Inputs for the target box ``[start, start + extent)`` (unpadded coords).

        Returns ``(detail, context_lowres, tpm)`` with a leading channel axis.
        """
        f = self.factor
        s = np.asarray(start) + self.low
        e = np.asarray(extent)
        if np.any(e % f):
            raise GeometryError(f"target extent {tuple(e)} not divisible by {f}")
        d0, d1 = s - 8, s + e + 8
        c0 = s - 8 * f
        cn = e // f + 16
        if np.any(c0 < 0) or np.any(c0 + 1 + f * (cn - 1) >= self.image.shape):
            raise GeometryError(f"window at {tuple(start)} leaves the padded volume")
        if np.any(d0 < 0) or np.any(d1 > self.image.shape):
            raise GeometryError(f"window at {tuple(start)} leaves the padded volume")
        detail = self.image[d0[0]:d1[0], d0[1]:d1[1], d0[2]:d1[2]]
        ctx = self.blurred[c0[0] + 1:c0[0] + f * cn[0]:f,
                           c0[1] + 1:c0[1] + f * cn[1]:f,
                           c0[2] + 1:c0[2] + f * cn[2]:f]
        t1 = s + e
        tpm = self.tpm[:, s[0]:t1[0], s[1]:t1[1], s[2]:t1[2]]
        return detail[None], ctx[None], tpm

    def truth(self, start, extent):
        s = np.asarray(start) + self.low
        t1 = s + np.asarray(extent)
        return one_hot(self.labels[s[0]:t1[0], s[1]:t1[1], s[2]:t1[2]], N_CLASSES)

    def box(self, start, extent):
        """Image and TPM over the box itself (used by same-padding models)."""
        s = np.asarray(start) + self.low
        t1 = s + np.asarray(extent)
        sl = (slice(s[0], t1[0]), slice(s[1], t1[1]), slice(s[2], t1[2]))
        return self.image[sl][None], self.tpm[(slice(None),) + sl]


_TPM_CACHE = {}


def _padded_tpm(tpm, low, high):
    """Subjects usually share one atlas; pad it once per geometry."""
    key = (id(tpm), low, high)
    hit = _TPM_CACHE.get(key)
    if hit is not None and hit[0] is tpm:
        return hit[1]
    padded = np.pad(tpm, [(0, 0)] + [(low, h) for h in high]).astype(np.float32)
    padded.flags.writeable = False
    if len(_TPM_CACHE) >= 4:
        _TPM_CACHE.pop(next(iter(_TPM_CACHE)))
    _TPM_CACHE[key] = (tpm, padded)
    return padded


def _per_axis(v):
    return tuple(v) if np.ndim(v) else (v, v, v)


def target_start(center, target_size):
    return np.asarray(center) - target_size // 2


def eligible_mask(dims, target_size):
    """Centres whose target box lies inside the volume."""
    lo = target_size // 2
    hi = target_size - lo  # box is [c - lo, c - lo + t)
    mask = np.zeros(dims, dtype=bool)
    if any(d < target_size for d in dims):
        return mask
    mask[lo:dims[0] - hi + 1, lo:dims[1] - hi + 1, lo:dims[2] - hi + 1] = True
    return mask


class CenterSampler:
    """Draws distinct patch centres, class-balanced over present labels by default."""

    def __init__(self, labels, target_size=9, mode="balanced"):
        lab = labels.labels if isinstance(labels, LabelVolume) else np.asarray(labels)
        if mode not in ("balanced", "uniform"):
            raise ValueError(f"unknown sampling mode {mode!r}")
        self.dims = lab.shape
        self.mode = mode
        mask = eligible_mask(lab.shape, target_size)
        self.flat = np.flatnonzero(mask)
        vals = lab.ravel()[self.flat]
        self.by_class = [self.flat[vals == c] for c in range(N_CLASSES)]
        self.by_class = [ix for ix in self.by_class if len(ix)]

    def __call__(self, n, rng):
        if n > len(self.flat):
            raise ValueError(f"asked for {n} centres but only {len(self.flat)} are eligible")
        if self.mode == "uniform":
            picked = rng.choice(self.flat, size=n, replace=False)
        else:
            k = len(self.by_class)
            quota = np.full(k, n // k)
            quota[rng.permutation(k)[: n % k]] += 1
            chosen = []
            short = 0
            for ix, q in zip(self.by_class, quota):
                take = min(q, len(ix))
                short += q - take
                chosen.append(rng.choice(ix, size=take, replace=False))
            picked = np.concatenate(chosen)
            if short:
                rest = np.setdiff1d(self.flat, picked, assume_unique=True)
                picked = np.concatenate([picked, rng.choice(rest, size=short, replace=False)])
        return [tuple(int(v) for v in np.unravel_index(i, self.dims)) for i in picked]


def sample_patch_centers(labels, n, rng, target_size=9, mode="balanced"):
    return CenterSampler(labels, target_size, mode)(n, rng)


def extract_example(image, labels, tpm, center, target_size=9):
    """``(detail, context_lowres, tpm, truth)`` for one target box around ``center``."""
    patch_geometry(target_size)
    ps = PaddedSubject(Subject(image, labels, tpm))
    start = target_start(center, target_size)
    if np.any(start < 0) or np.any(start + target_size > np.asarray(image.dims)):
        raise GeometryError(f"target box around {center} leaves the volume")
    ext = (target_size,) * 3
    detail, ctx, tp = ps.windows(start, ext)
    return detail, ctx, tp, ps.truth(start, ext)
