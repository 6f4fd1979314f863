"""Whole-volume dense inference by exact tiling, plus optional CRF refinement."""
from __future__ import annotations

import copy

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels
from . import tensor_core as tc
from .architectures import GeometryError, load_checkpoint
from .crf import CrfConfig, CrfProblem, _mean_field_fast
from .sampling import MARGIN, PaddedSubject, Subject
from .training import forward
from .volume_io import (LabelVolume, ProbabilityVolume, TissueProbabilityMap, Volume3D,
                        read_nifti, read_tpm, write_nifti, write_nifti_4d, zscore_normalize)


@dataclass
class Tile:
    origin: tuple
    extent: tuple

    @property
    def detail_window(self):
        return tuple(o - 8 for o in self.origin), tuple(e + 16 for e in self.extent)

    @property
    def context_window(self):
        return tuple(o - 24 for o in self.origin), tuple(e + 48 for e in self.extent)


@dataclass
class TilePlan:
    dims: tuple
    covered: tuple
    tiles: list
    margin_low: int = MARGIN
    margin_high: tuple = (MARGIN, MARGIN, MARGIN)


def plan_tiles(dims, target_edge=105, factor=3) -> TilePlan:
    """Target boxes on a grid of ``target_edge``; the last box per axis shrinks.

    Extents are rounded up to a multiple of ``factor`` so every box has a
    whole number of low-resolution context voxels; the overhang (at most
    ``factor - 1`` voxels) is padded and cropped after stitching.
    """
    if target_edge <= 0 or target_edge % factor:
        raise GeometryError(f"tile edge {target_edge} must be a positive multiple of {factor}")
    dims = tuple(int(d) for d in dims)
    covered = tuple(-(-d // factor) * factor for d in dims)
    starts = [list(range(0, c, target_edge)) for c in covered]
    tiles = []
    for x in starts[0]:
        for y in starts[1]:
            for z in starts[2]:
                o = (x, y, z)
                tiles.append(Tile(o, tuple(min(target_edge, c - s) for s, c in zip(o, covered))))
    high = tuple(MARGIN + c - d for c, d in zip(covered, dims))
    return TilePlan(dims, covered, tiles, MARGIN, high)


@dataclass
class SegmentOptions:
    tile_edge: int = 105
    use_crf: bool = True
    crf_config: CrfConfig = field(default_factory=CrfConfig)
    threads: int = 1
    unet_tile: int = 32
    unet_margin: int = 16
    precision: str = "float32"     # "float64" runs the network on a double-precision copy

    def __post_init__(self):
        if self.precision not in ("float32", "float64"):
            raise ValueError(f"precision must be float32 or float64, got {self.precision!r}")


def _set_threads(n):
    if kernels.get_backend() == "torch":
        kernels._load_torch().set_num_threads(max(1, int(n)))


def _stitch_multiprior(model, subject, opts, order=None):
    plan = plan_tiles(subject.image.dims, opts.tile_edge, model.config.context_downsample)
    ps = PaddedSubject(subject, plan.margin_low, plan.margin_high, model.config.context_downsample)
    probs = np.zeros((model.config.n_classes,) + plan.covered, dtype=model.out_dtype)
    tiles = plan.tiles if order is None else [plan.tiles[i] for i in order]
    with tc.no_grad():
        for tile in tiles:
            d, c, t = ps.windows(tile.origin, tile.extent)
            out = model.forward(d, c, t, mode="infer").data[0]
            o, e = tile.origin, tile.extent
            probs[:, o[0]:o[0] + e[0], o[1]:o[1] + e[1], o[2]:o[2] + e[2]] = out
    x, y, z = subject.image.dims
    return probs[:, :x, :y, :z]


def _stitch_unet(model, subject, opts):
    t, m = opts.unet_tile, opts.unet_margin
    if t % 8 or (t + 2 * m) % 8:
        raise GeometryError("U-Net tiles and margins must keep extents divisible by 8")
    dims = subject.image.dims
    covered = tuple(-(-d // t) * t for d in dims)
    ps = PaddedSubject(subject, m, tuple(m + c - d for c, d in zip(covered, dims)))
    probs = np.zeros((model.config.n_classes,) + covered, dtype=model.out_dtype)
    with tc.no_grad():
        for x in range(0, covered[0], t):
            for y in range(0, covered[1], t):
                for z in range(0, covered[2], t):
                    img, tpm = ps.box((x - m, y - m, z - m), (t + 2 * m,) * 3)
                    out = forward(model, (img[None], tpm[None]), "infer").data[0]
                    probs[:, x:x + t, y:y + t, z:z + t] = out[:, m:m + t, m:m + t, m:m + t]
    return probs[:, :dims[0], :dims[1], :dims[2]]


def segment_volume(model, image: Volume3D, tpm: TissueProbabilityMap,
                   opts: SegmentOptions | None = None, tile_order=None):
    """Return ``(ProbabilityVolume, LabelVolume)``; labels are the argmax of the probabilities.

    With CRF enabled the returned probabilities are the mean-field marginals.
    """
    opts = opts or SegmentOptions()
    if tpm.dims != image.dims:
        raise ValueError(f"TPM dims {tpm.dims} vs image {image.dims}")
    _set_threads(opts.threads)
    if np.dtype(opts.precision) != model.out_dtype:
        model = copy.deepcopy(model).astype(np.dtype(opts.precision))
    subject = Subject(image, None, tpm)
    if model.kind == "unet":
        probs = _stitch_unet(model, subject, opts)
    else:
        probs = _stitch_multiprior(model, subject, opts, tile_order)
    if opts.use_crf:
        z = zscore_normalize(image).data
        problem = CrfProblem.from_probabilities(probs, z, opts.crf_config.unary_floor)
        probs = _mean_field_fast(problem, opts.crf_config).astype(probs.dtype)
    pv = ProbabilityVolume(probs, image.spacing)
    return pv, pv.argmax()


def segment_file(model_path, image_path, tpm_path, out_path, opts: SegmentOptions | None = None,
                 crf_config_path=None, write_probabilities=True):
    """Segment NIfTI inputs; writes labels, probabilities and a JSON run manifest."""
    opts = opts or SegmentOptions()
    t0 = time.time()
    model = load_checkpoint(model_path)
    image = read_nifti(image_path)
    tpm = read_tpm(tpm_path)
    t_load = time.time()
    probs, labels = segment_volume(model, image, tpm, opts)
    t_seg = time.time()
    out_path = Path(out_path)
    write_nifti(labels, out_path)
    prob_path = None
    if write_probabilities:
        prob_path = out_path.with_name(out_path.name.replace(".nii", "") + "_probs.nii")
        write_nifti_4d(probs.data, image.spacing, prob_path)
    manifest = {
        "model": str(model_path), "model_hash": model.content_hash(),
        "image": str(image_path), "tpm": str(tpm_path),
        "labels": str(out_path), "probabilities": None if prob_path is None else str(prob_path),
        "crf": opts.crf_config.to_dict() if opts.use_crf else None,
        "crf_config_file": None if crf_config_path is None else str(crf_config_path),
        "tile_edge": opts.tile_edge, "threads": opts.threads, "backend": kernels.get_backend(),
        "timings": {"load_s": t_load - t0, "segment_s": t_seg - t_load,
                    "write_s": time.time() - t_seg},
        "finished": time.strftime("%Y-%m-%dT%H:%M:%S"),
    }
    Path(str(out_path) + ".manifest.json").write_text(json.dumps(manifest, indent=1))
    return labels, manifest
