"""Synthetic T1-like head phantoms with ground-truth labels and a population TPM.

Heads are nested ellipsoidal shells (skin, bone, CSF, GM, WM) with a small
air cavity in the bone band. Lesions are CSF-filled spheres carved out of
the brain. Intensity conventions are synthetic, not measurements: CSF, the
air cavity and background are dark and mutually confusable.
"""
from __future__ import annotations

import zlib
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import ndimage

from .volume_io import (AIR, BACKGROUND, BONE, CSF, GM, N_CLASSES, SKIN, TPM_CLASSES, WM,
                        LabelVolume, TissueProbabilityMap, Volume3D)


def substream(seed: int, name: str) -> np.random.Generator:
    """Independent named RNG stream derived from one integer seed."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), zlib.crc32(name.encode())]))


class PhantomGeometryError(ValueError):
    pass


@dataclass
class PhantomConfig:
    edge: int = 96
    head_radius: float = 0.40          # fraction of the edge
    axes: tuple = (1.0, 0.92, 0.86)    # ellipsoid semi-axis scales
    # outer boundary of each shell as a fraction of the head radius
    shells: dict = field(default_factory=lambda: {
        "skin": 1.0, "bone": 0.9, "csf": 0.8, "gm": 0.72, "wm": 0.55})
    # air cavity: centre and semi-axes in head-normalised units
    cavity_center: tuple = (0.0, 0.88, 0.0)
    cavity_axes: tuple = (0.25, 0.1, 0.18)
    intensities: dict = field(default_factory=lambda: {
        "background": 0.0, "air": 0.0, "csf": 0.15, "bone": 0.2,
        "gm": 0.5, "skin": 0.7, "wm": 0.8})
    noise: float = 0.05
    smoothing: float = 0.5
    n_lesions: int = 0
    lesion_radius: tuple = (4.0, 8.0)  # voxels
    jitter: float = 0.03               # relative scale/shape variation, cut at 2 sd
    shift_jitter: float = 1.5          # voxels, cut at 2 sd

    def __post_init__(self):
        order = ("skin", "bone", "csf", "gm", "wm")
        radii = [self.shells[k] for k in order]
        if any(a <= b for a, b in zip(radii, radii[1:])) or radii[-1] <= 0:
            raise ValueError("shell radii must strictly decrease from skin inward")
        if any(not 0 <= v <= 1 for v in self.intensities.values()):
            raise ValueError("class intensities must lie in [0, 1]")
        if self.edge < 8 or self.noise < 0 or self.n_lesions < 0:
            raise ValueError("invalid edge, noise or lesion count")
        lo, hi = self.lesion_radius
        if not 0 < lo <= hi:
            raise ValueError("lesion radius range must be positive and ordered")

    def with_lesions(self, n=2, radius=(4.0, 8.0)):
        return replace(self, n_lesions=n, lesion_radius=radius)


_SHELL_LABELS = (("skin", SKIN), ("bone", BONE), ("csf", CSF), ("gm", GM), ("wm", WM))
_INTENSITY_KEYS = {BACKGROUND: "background", AIR: "air", SKIN: "skin", BONE: "bone",
                   CSF: "csf", GM: "gm", WM: "wm"}


def _shape_params(config, rng):
    """Per-subject head centre and semi-axes (voxels)."""
    z = lambda size=None: np.clip(rng.standard_normal(size), -2.0, 2.0)
    j = config.jitter
    r = config.head_radius * config.edge * (1 + j * z())
    axes = np.array(config.axes) * r * (1 + j * z(3))
    centre = (config.edge - 1) / 2 + config.shift_jitter * z(3)
    return centre, axes


def phantom_labels(config: PhantomConfig, rng) -> np.ndarray:
    """Lesion-free label array for one jittered subject."""
    n = config.edge
    centre, axes = _shape_params(config, rng)
    grid = np.ogrid[:n, :n, :n]
    u = [(g - c) / a for g, c, a in zip(grid, centre, axes)]
    rad = np.sqrt(u[0] ** 2 + u[1] ** 2 + u[2] ** 2)
    lab = np.full((n, n, n), BACKGROUND, dtype=np.uint8)
    for name, cls in _SHELL_LABELS:
        lab[rad <= config.shells[name]] = cls
    if config.cavity_axes is not None:
        cav = sum(((ui - c) / a) ** 2 for ui, c, a in zip(u, config.cavity_center, config.cavity_axes))
        lab[(cav <= 1.0) & ((lab == BONE) | (lab == SKIN))] = AIR
    if lab.max() == BACKGROUND or np.count_nonzero(lab == WM) == 0:
        raise PhantomGeometryError("head does not fit the volume")
    outside = rad > config.shells["skin"]
    if not outside[[0, -1]].all() or not outside[:, [0, -1]].all() or not outside[:, :, [0, -1]].all():
        raise PhantomGeometryError("head touches the volume border")
    return lab


def add_lesions(labels: np.ndarray, config: PhantomConfig, rng) -> np.ndarray:
    """Carve CSF spheres fully inside the GM/WM mask."""
    lab = labels.copy()
    brain = (labels == GM) | (labels == WM)
    depth = ndimage.distance_transform_edt(brain)
    n = lab.shape[0]
    grid = np.ogrid[:n, :n, :n]
    for _ in range(config.n_lesions):
        radius = rng.uniform(*config.lesion_radius)
        cand = np.argwhere(depth > radius + 1.0)
        if len(cand) == 0:
            raise PhantomGeometryError(f"no room for a lesion of radius {radius:.1f}")
        c = cand[rng.integers(len(cand))]
        ball = sum((g - ci) ** 2 for g, ci in zip(grid, c)) <= radius**2
        lab[ball] = CSF
    return lab


def render(labels: np.ndarray, config: PhantomConfig, rng) -> np.ndarray:
    means = np.array([config.intensities[_INTENSITY_KEYS[c]] for c in range(N_CLASSES)])
    img = means[labels] + config.noise * rng.standard_normal(labels.shape)
    if config.smoothing > 0:
        img = ndimage.gaussian_filter(img, config.smoothing, mode="nearest")
    return img.astype(np.float32)


def generate_phantom(config: PhantomConfig, seed: int):
    """Return ``(Volume3D, LabelVolume)``; deterministic per seed."""
    base = phantom_labels(config, substream(seed, "shape"))
    lab = add_lesions(base, config, substream(seed, "lesions")) if config.n_lesions else base
    img = render(lab, config, substream(seed, "noise"))
    return Volume3D(img), LabelVolume(lab)


def analytic_class_volumes(config: PhantomConfig) -> dict:
    """Continuous volumes (voxels) of each class for the un-jittered head."""
    r = config.head_radius * config.edge
    scale = np.prod(np.array(config.axes) * r)
    ball = lambda f: 4.0 / 3.0 * np.pi * f**3 * scale
    names = [n for n, _ in _SHELL_LABELS]
    out = {}
    for i, (name, cls) in enumerate(_SHELL_LABELS):
        inner = config.shells[names[i + 1]] if i + 1 < len(names) else 0.0
        out[cls] = ball(config.shells[name]) - ball(inner)
    return out


def generate_tpm(labels, smoothing: float = 1.0) -> TissueProbabilityMap:
    """Per-voxel class frequencies over a population of label volumes.

    Channels follow ``TPM_CLASSES``; background is the implicit remainder.
    Each channel is Gaussian-smoothed and the channel sum clipped back to 1.
    """
    labels = [l.labels if isinstance(l, LabelVolume) else np.asarray(l) for l in labels]
    if len(labels) < 2:
        raise ValueError("a population TPM needs at least two subjects")
    shape = labels[0].shape
    counts = np.zeros((len(TPM_CLASSES),) + shape, dtype=np.int64)
    for lab in labels:
        if lab.shape != shape:
            raise ValueError("population label volumes must share dims")
        for ch, cls in enumerate(TPM_CLASSES):
            counts[ch] += lab == cls
    freq = counts / len(labels)
    if smoothing > 0:
        freq = np.stack([ndimage.gaussian_filter(f, smoothing, mode="nearest") for f in freq])
    freq = np.clip(freq, 0.0, 1.0)
    total = freq.sum(axis=0)
    freq /= np.maximum(total, 1.0)[None]
    return TissueProbabilityMap(freq.astype(np.float32))


def population_tpm(config: PhantomConfig, n: int = 20, seed: int = 0) -> TissueProbabilityMap:
    """TPM from ``n`` jittered lesion-free subjects (seeds ``seed*100003 + i``)."""
    labs = [phantom_labels(config, substream(seed * 100003 + i, "tpm-shape")) for i in range(n)]
    return generate_tpm(labs)
