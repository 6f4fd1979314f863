"""Fully connected 3-D CRF with a tissue-pair penalty matrix.

Energy of a labelling ``x``::

    E(x) = sum_i psi_i(x_i) + sum_{i<j} mu(x_i, x_j) k(i, j)
    k(i, j) = w_app exp(-|p_i-p_j|^2 / 2 theta_a^2 - (I_i-I_j)^2 / 2 theta_b^2)
            + w_smooth exp(-|p_i-p_j|^2 / 2 theta_g^2)

Mean-field inference runs synchronous sweeps
``Q_i(l) ~ exp(-psi_i(l) - sum_l' mu(l, l') sum_{j != i} k(i, j) Q_j(l'))``.
:func:`mean_field_bruteforce` evaluates the double sum exactly (tiny volumes
only); :func:`mean_field_fast` filters with a separable Gaussian for the
smoothness term and a bilateral grid over ``(x, y, z, I)`` for the
appearance term.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage, sparse

from .volume_io import (AIR, BACKGROUND, BONE, CSF, GM, N_CLASSES, SKIN, WM,
                        LabelVolume, ProbabilityVolume, Volume3D)

BRUTE_FORCE_LIMIT = 1000

POSSIBLE, PROHIBITED = 0.5, 2.0
PROHIBITED_PAIRS = ((CSF, AIR), (CSF, BACKGROUND), (GM, SKIN), (WM, SKIN),
                    (GM, BACKGROUND), (WM, BACKGROUND))


def default_penalty() -> np.ndarray:
    mu = np.full((N_CLASSES, N_CLASSES), POSSIBLE)
    np.fill_diagonal(mu, 0.0)
    for a, b in PROHIBITED_PAIRS:
        mu[a, b] = mu[b, a] = PROHIBITED
    return mu


@dataclass
class CrfConfig:
    penalty: np.ndarray = field(default_factory=default_penalty)
    w_appearance: float = 3.0
    w_smooth: float = 1.0
    theta_alpha: float = 3.0
    theta_beta: float = 0.5
    theta_gamma: float = 1.0
    n_iterations: int = 5
    unary_floor: float = 1e-10
    grid_budget_mb: float = 200.0

    def __post_init__(self):
        mu = np.asarray(self.penalty, dtype=np.float64)
        self.penalty = mu
        if mu.ndim != 2 or mu.shape[0] != mu.shape[1]:
            raise ValueError("penalty matrix must be square")
        if not np.allclose(mu, mu.T) or mu.min() < 0:
            raise ValueError("penalty matrix must be symmetric and non-negative")
        off = mu + np.diag(np.full(len(mu), np.inf))
        if np.any(np.diag(mu) > off.min(axis=1)):
            raise ValueError("diagonal penalties must not exceed off-diagonal ones in their row")
        for name in ("theta_alpha", "theta_beta", "theta_gamma", "unary_floor"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.w_appearance < 0 or self.w_smooth < 0 or self.n_iterations < 0:
            raise ValueError("weights and iteration count must be non-negative")

    def to_dict(self):
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d["penalty"] = self.penalty.tolist()
        return d

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def load(cls, path):
        return cls(**json.loads(Path(path).read_text()))


@dataclass
class CrfProblem:
    unaries: np.ndarray      # (C, X, Y, Z) -log(max(Q0, eps))
    intensities: np.ndarray  # (X, Y, Z), z-scored

    def __post_init__(self):
        self.unaries = np.asarray(self.unaries, dtype=np.float64)
        self.intensities = np.asarray(self.intensities, dtype=np.float64)
        if self.unaries.shape[1:] != self.intensities.shape:
            raise ValueError(f"unary dims {self.unaries.shape[1:]} vs image {self.intensities.shape}")
        if not np.all(np.isfinite(self.unaries)):
            raise ValueError("unaries must be finite")

    @classmethod
    def from_probabilities(cls, probs, image, floor=1e-10):
        q = probs.data if isinstance(probs, ProbabilityVolume) else np.asarray(probs)
        img = image.data if isinstance(image, Volume3D) else np.asarray(image)
        return cls(-np.log(np.maximum(q.astype(np.float64), floor)), img)

    @property
    def dims(self):
        return self.intensities.shape

    @property
    def n_classes(self):
        return self.unaries.shape[0]


def pairwise_kernel(p_i, p_j, i_i, i_j, config: CrfConfig) -> float:
    d2 = float(np.sum((np.asarray(p_i, float) - np.asarray(p_j, float)) ** 2))
    di2 = (float(i_i) - float(i_j)) ** 2
    return (config.w_appearance * np.exp(-d2 / (2 * config.theta_alpha**2)
                                         - di2 / (2 * config.theta_beta**2))
            + config.w_smooth * np.exp(-d2 / (2 * config.theta_gamma**2)))


def _kernel_matrix(problem, config):
    n = int(np.prod(problem.dims))
    if n > BRUTE_FORCE_LIMIT:
        raise ValueError(f"brute force limited to {BRUTE_FORCE_LIMIT} voxels, got {n}")
    pos = np.stack(np.meshgrid(*[np.arange(s) for s in problem.dims], indexing="ij"),
                   axis=-1).reshape(-1, 3).astype(np.float64)
    inten = problem.intensities.reshape(-1)
    d2 = ((pos[:, None, :] - pos[None, :, :]) ** 2).sum(-1)
    di2 = (inten[:, None] - inten[None, :]) ** 2
    k = (config.w_appearance * np.exp(-d2 / (2 * config.theta_alpha**2)
                                      - di2 / (2 * config.theta_beta**2))
         + config.w_smooth * np.exp(-d2 / (2 * config.theta_gamma**2)))
    np.fill_diagonal(k, 0.0)
    return k


def crf_energy(problem: CrfProblem, labeling, config: CrfConfig) -> float:
    lab = labeling.labels if isinstance(labeling, LabelVolume) else np.asarray(labeling)
    if lab.shape != problem.dims:
        raise ValueError("labeling dims do not match the problem")
    k = _kernel_matrix(problem, config)
    x = lab.reshape(-1).astype(np.int64)
    un = problem.unaries.reshape(problem.n_classes, -1)
    unary = un[x, np.arange(x.size)].sum()
    pair = config.penalty[x[:, None], x[None, :]] * k
    return float(unary + np.triu(pair, 1).sum())


def _normalize(logits):
    z = logits - logits.max(axis=0, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=0, keepdims=True)


def mean_field_bruteforce(problem: CrfProblem, config: CrfConfig) -> ProbabilityVolume:
    """Exact O(N^2 C^2) mean field in float64."""
    k = _kernel_matrix(problem, config)
    c = problem.n_classes
    psi = problem.unaries.reshape(c, -1)
    q = _normalize(-psi)
    mu = config.penalty[:c, :c]
    for _ in range(config.n_iterations):
        msg = q @ k            # (C, N): sum_j k(i, j) Q_j(l')
        q = _normalize(-psi - mu @ msg)
    return ProbabilityVolume(q.reshape(problem.unaries.shape))


# --------------------------------------------------------------------------
# fast filtering
# --------------------------------------------------------------------------

def _gauss_matrix(n_in, n_out, step, sigma, truncate, amplitude=1.0):
    """Dense matrix of ``amplitude * exp(-(step*(i-j))^2 / 2 sigma^2)``, cut at ``truncate``."""
    d = step * (np.arange(n_out)[:, None] - np.arange(n_in)[None, :])
    m = amplitude * np.exp(-0.5 * (d / sigma) ** 2)
    m[np.abs(d) > truncate] = 0.0
    return m


def _apply_along(a, m, axis):
    moved = np.moveaxis(a, axis, -1)
    return np.moveaxis(moved @ m.T, -1, axis)


def gaussian_filter_sum(values, sigma, truncate=3.0):
    """``out_i = sum_j exp(-|p_i - p_j|^2 / 2 sigma^2) v_j`` over the voxel grid.

    Separable, unnormalised, truncated at ``truncate * sigma`` voxels and
    zero outside the volume. ``values`` has shape ``(C, X, Y, Z)``.
    """
    radius = int(np.floor(truncate * sigma))
    taps = np.exp(-0.5 * (np.arange(-radius, radius + 1) / sigma) ** 2)
    out = np.asarray(values, dtype=np.float64)
    for ax in (1, 2, 3):
        out = ndimage.correlate1d(out, taps, axis=ax, mode="constant", cval=0.0)
    return out


class BilateralGrid:
    """Splat/blur/slice approximation of a 4-D Gaussian over ``(x, y, z, I)``.

    Voxels are splatted with multilinear weights onto a regular lattice with
    spatial stride ``step`` (voxels) and intensity stride ``h`` (intensity
    units). The lattice blur uses a narrowed Gaussian whose variance plus the
    variance of the splat and slice tents equals the target, and is rescaled
    so the kernel keeps its mass. With ``step == 1`` the spatial part is exact.
    """

    def __init__(self, intensities, theta_spatial, theta_intensity, n_channels=N_CLASSES,
                 budget_mb=200.0, truncate=np.inf):
        img = np.asarray(intensities, dtype=np.float64)
        self.shape = img.shape
        self.n_voxels = img.size
        lo, hi = float(img.min()), float(img.max())
        self.step, self.h = self._choose(img.shape, hi - lo, theta_spatial, theta_intensity,
                                         n_channels, budget_mb)
        s, h = self.step, self.h

        axes_idx, axes_w, self.grid_shape = [], [], []
        for n in img.shape:
            x = np.arange(n, dtype=np.float64) / s
            base = np.floor(x).astype(np.int64)
            frac = x - base
            axes_idx.append(base)
            axes_w.append(frac)
            self.grid_shape.append(int(base[-1]) + 2)
        gi = (img - lo) / h
        ibase = np.floor(gi).astype(np.int64)
        ifrac = gi - ibase
        self.grid_shape.append(int(ibase.max()) + 2)
        self.grid_shape = tuple(self.grid_shape)

        bx, by, bz = np.meshgrid(*axes_idx, indexing="ij")
        fx, fy, fz = np.meshgrid(*axes_w, indexing="ij")
        gs = self.grid_shape
        rows, cols, vals = [], [], []
        vox = np.arange(img.size)
        corners = (0, 1) if s > 1 else (0,)
        for cx in corners:
            for cy in corners:
                for cz in corners:
                    for ci in (0, 1):
                        w = (np.where(cx, fx, 1 - fx) * np.where(cy, fy, 1 - fy)
                             * np.where(cz, fz, 1 - fz) * np.where(ci, ifrac, 1 - ifrac))
                        node = (((bx + cx) * gs[1] + by + cy) * gs[2] + bz + cz) * gs[3] + ibase + ci
                        keep = w.ravel() > 0
                        rows.append(node.ravel()[keep])
                        cols.append(vox[keep])
                        vals.append(w.ravel()[keep])
        self.splat = sparse.csr_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(int(np.prod(gs)), img.size))
        self.slice = self.splat.T.tocsr()

        # tent variance per axis: splat and slice each add E[f(1-f)] step^2
        if s > 1:
            f = np.arange(s) / s
            var_sp = 2 * np.mean(f * (1 - f)) * s**2
        else:
            var_sp = 0.0
        var_in = 2 * h**2 / 6.0
        sig_sp = np.sqrt(theta_spatial**2 - var_sp)
        sig_in = np.sqrt(theta_intensity**2 - var_in)
        self.blur = []
        for ax, n in enumerate(gs[:3]):
            self.blur.append(_gauss_matrix(n, n, s, sig_sp, truncate * theta_spatial,
                                           theta_spatial / sig_sp))
        self.blur.append(_gauss_matrix(gs[3], gs[3], h, sig_in, truncate * theta_intensity,
                                       theta_intensity / sig_in))

    @staticmethod
    def _choose(shape, irange, theta_s, theta_i, n_channels, budget_mb):
        # tent variance of a stride is (step^2 - 1) / 3; it must stay below the target
        budget = budget_mb * 2**20
        steps = [s for s in (1, 2, 3, 4) if (s * s - 1) / 3 <= 0.6 * theta_s**2]
        for step in steps:
            for k in (16, 8, 4, 2):
                h = theta_i / k
                nodes = np.prod([n // step + 2 for n in shape]) * (int(irange / h) + 2)
                if nodes * n_channels * 8 * 2 <= budget:
                    return step, h
        raise ValueError(f"bilateral grid for {shape} with theta_alpha={theta_s}, "
                         f"theta_beta={theta_i} exceeds {budget_mb} MB; raise grid_budget_mb "
                         "or the bandwidths")

    def filter(self, values):
        """Apply to ``values`` of shape ``(C, X, Y, Z)``; includes the ``j == i`` term."""
        c = values.shape[0]
        v = values.reshape(c, -1).T                      # (N, C)
        g = (self.splat @ v).reshape(self.grid_shape + (c,))
        for ax, m in enumerate(self.blur):
            g = _apply_along(g, m, ax)
        out = self.slice @ g.reshape(-1, c)
        return out.T.reshape(values.shape)


def mean_field_fast(problem: CrfProblem, config: CrfConfig, callback=None) -> ProbabilityVolume:
    """Filtered mean field; same update rule as the brute-force path."""
    return ProbabilityVolume(_mean_field_fast(problem, config, callback))


def _mean_field_fast(problem, config, callback=None):
    c = problem.n_classes
    psi = problem.unaries
    q = _normalize(-psi)
    mu = config.penalty[:c, :c]
    w_a, w_s = config.w_appearance, config.w_smooth
    if config.n_iterations == 0 or (w_a == 0 and w_s == 0):
        return q
    grid = None
    if w_a > 0:
        grid = BilateralGrid(problem.intensities, config.theta_alpha, config.theta_beta,
                             c, config.grid_budget_mb)
    for it in range(config.n_iterations):
        msg = -(w_a + w_s) * q
        if w_a > 0:
            msg += w_a * grid.filter(q)
        if w_s > 0:
            msg += w_s * gaussian_filter_sum(q, config.theta_gamma)
        pen = np.tensordot(mu, msg, axes=([1], [0]))
        q = _normalize(-psi - pen)
        if callback is not None:
            callback(it, q)
    return q


def crf_refine(seg_probs, image, config: CrfConfig | None = None) -> LabelVolume:
    """Mean-field refinement of a softmax segmentation; returns argmax labels."""
    config = config or CrfConfig()
    probs = seg_probs.data if isinstance(seg_probs, ProbabilityVolume) else np.asarray(seg_probs)
    img = image.data if isinstance(image, Volume3D) else np.asarray(image)
    if probs.shape[1:] != img.shape:
        raise ValueError(f"probability dims {probs.shape[1:]} vs image {img.shape}")
    problem = CrfProblem.from_probabilities(probs, img, config.unary_floor)
    q = _mean_field_fast(problem, config)
    spacing = getattr(seg_probs, "spacing", (1.0, 1.0, 1.0))
    return LabelVolume(np.argmax(q, axis=0).astype(np.uint8), spacing)
