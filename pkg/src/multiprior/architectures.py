"""Multiprior (Detail + Context + TPM + classifier) and a volumetric U-Net with TPM fusion.

Both models are plain collections of named :class:`Parameter` objects plus
batch-norm running statistics; ``forward`` builds an autodiff graph on the
fly. Checkpoints are a small self-describing binary format (see
:func:`save_checkpoint`).
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor_core as tc
from .tensor_core import BatchNormState, Parameter, Tensor


class GeometryError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


def patch_geometry(target_size: int, context_downsample: int = 3, n_layers: int = 8):
    """Input edges ``(detail, context)`` that yield a ``target_size**3`` output.

    Each valid 3x3x3 layer trims one voxel per side, so the detail path needs
    ``target + 2 * n_layers``. The context path runs the same stack at
    1/``context_downsample`` resolution, so its full-resolution window is
    ``target + 2 * n_layers * context_downsample``.
    """
    if target_size < 1:
        raise GeometryError("target size must be positive")
    if target_size % context_downsample:
        raise GeometryError(
            f"target size {target_size} is not a multiple of {context_downsample}")
    shrink = 2 * n_layers
    return target_size + shrink, target_size + shrink * context_downsample


def _he_normal(rng, shape, fan_in, slope, dtype=np.float32):
    std = np.sqrt(2.0 / ((1.0 + slope**2) * fan_in))
    return (rng.standard_normal(shape) * std).astype(dtype)


# --------------------------------------------------------------------------
# Multiprior
# --------------------------------------------------------------------------

@dataclass
class MultipriorConfig:
    n_detail_layers: int = 8
    kernel: int = 3
    detail_features: tuple = (30, 30, 30, 30, 40, 40, 50, 50)
    context_features: tuple = (30, 30, 30, 30, 40, 40, 50, 50)
    context_downsample: int = 3
    n_tpm_channels: int = 6
    n_classes: int = 7
    classifier_hidden: tuple = (100, 60)
    leaky_slope: float = 0.3
    use_context: bool = True
    zero_tpm: bool = False
    bn_momentum: float = 0.9
    bn_eps: float = 1e-5
    seed: int = 0

    def __post_init__(self):
        self.detail_features = tuple(int(f) for f in self.detail_features)
        self.context_features = tuple(int(f) for f in self.context_features)
        self.classifier_hidden = tuple(int(f) for f in self.classifier_hidden)
        if self.kernel != 3:
            raise ValueError("only 3x3x3 kernels are supported")
        if len(self.detail_features) != self.n_detail_layers or \
                len(self.context_features) != self.n_detail_layers:
            raise ValueError("feature schedules must have one entry per layer")
        if self.use_context and self.detail_features[-1] != self.context_features[-1]:
            raise ValueError("final detail and context feature counts must match")

    @property
    def detail_receptive_field(self):
        return 1 + 2 * self.n_detail_layers

    @property
    def context_receptive_field(self):
        return self.context_downsample * self.detail_receptive_field

    @property
    def classifier_inputs(self):
        n = self.detail_features[-1] + self.n_tpm_channels
        return n + (self.context_features[-1] if self.use_context else 0)

    def geometry(self, target_size):
        return patch_geometry(target_size, self.context_downsample, self.n_detail_layers)

    @classmethod
    def reduced(cls, width=2, hidden=(4, 4), **kw):
        """Width-reduced variant used for gradient checks and quick experiments."""
        n = kw.pop("n_detail_layers", 8)
        return cls(n_detail_layers=n, detail_features=(width,) * n,
                   context_features=(width,) * n, classifier_hidden=hidden, **kw)


class _ConvStack:
    """``n`` x (valid conv -> batch norm -> LeakyReLU)."""

    def __init__(self, prefix, in_ch, features, slope, rng, momentum, eps, padding=0):
        self.layers = []
        self.slope = slope
        self.padding = padding
        c = in_ch
        for i, f in enumerate(features):
            name = f"{prefix}.conv{i + 1}"
            w = Parameter(_he_normal(rng, (f, c, 3, 3, 3), c * 27, slope), f"{name}.weight")
            b = Parameter(np.zeros(f, np.float32), f"{name}.bias", decay=False)
            bn = BatchNormState.create(f, f"{prefix}.bn{i + 1}", momentum, eps)
            self.layers.append((w, b, bn))
            c = f

    def __call__(self, x, mode):
        for w, b, bn in self.layers:
            x = tc.conv3d(x, w, b, padding=self.padding)
            x = tc.batch_norm(x, bn, mode)
            x = tc.leaky_relu(x, self.slope)
        return x


class _Model:
    kind = "model"

    def named_parameters(self):
        out = {}
        for p in self._params:
            if p.name in out:
                raise RuntimeError(f"duplicate parameter name {p.name}")
            out[p.name] = p
        return out

    def parameters(self):
        return list(self._params)

    def named_buffers(self):
        out = {}
        for bn in self._bns:
            out[bn.gamma.name.rsplit(".", 1)[0] + ".running_mean"] = bn.running_mean
            out[bn.gamma.name.rsplit(".", 1)[0] + ".running_var"] = bn.running_var
        return out

    def n_parameters(self):
        return int(sum(p.data.size for p in self._params))

    @property
    def out_dtype(self):
        return self._params[0].data.dtype

    def astype(self, dtype):
        for p in self._params:
            p.astype(dtype)
        for bn in self._bns:
            bn.running_mean = bn.running_mean.astype(dtype)
            bn.running_var = bn.running_var.astype(dtype)
        return self

    def zero_grad(self):
        for p in self._params:
            p.grad = None

    def state_arrays(self):
        """Ordered ``name -> array`` for every parameter and buffer."""
        out = {n: p.data for n, p in self.named_parameters().items()}
        out.update(self.named_buffers())
        return out

    def descriptor(self):
        return {"kind": self.kind, "config": _config_to_dict(self.config)}

    def content_hash(self):
        h = hashlib.sha256(json.dumps(self.descriptor(), sort_keys=True).encode())
        for name, arr in self.state_arrays().items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(arr, dtype="<f4").tobytes())
        return h.hexdigest()

    def _collect(self, stacks, extra_params=(), extra_bns=()):
        self._params, self._bns = [], []
        for s in stacks:
            for w, b, bn in s.layers:
                self._params += [w, b, bn.gamma, bn.beta]
                self._bns.append(bn)
        self._params += list(extra_params)
        self._bns += list(extra_bns)


class MultipriorModel(_Model):
    kind = "multiprior"

    def __init__(self, config: MultipriorConfig | None = None):
        cfg = config or MultipriorConfig()
        self.config = cfg
        rng = np.random.default_rng(cfg.seed)
        args = (cfg.leaky_slope, rng, cfg.bn_momentum, cfg.bn_eps)
        self.detail = _ConvStack("detail", 1, cfg.detail_features, *args)
        stacks = [self.detail]
        self.context = None
        if cfg.use_context:
            self.context = _ConvStack("context", 1, cfg.context_features, *args)
            stacks.append(self.context)
        self.head = []
        widths = (cfg.classifier_inputs,) + cfg.classifier_hidden + (cfg.n_classes,)
        head_params, head_bns = [], []
        for i in range(len(widths) - 1):
            name = f"classifier.fc{i + 1}"
            last = i == len(widths) - 2
            w = Parameter(_he_normal(rng, (widths[i + 1], widths[i]), widths[i],
                                     1.0 if last else cfg.leaky_slope), f"{name}.weight")
            b = Parameter(np.zeros(widths[i + 1], np.float32), f"{name}.bias", decay=False)
            bn = None if last else BatchNormState.create(
                widths[i + 1], f"classifier.bn{i + 1}", cfg.bn_momentum, cfg.bn_eps)
            self.head.append((w, b, bn))
            head_params += [w, b] + ([] if bn is None else [bn.gamma, bn.beta])
            if bn is not None:
                head_bns.append(bn)
        self._collect(stacks, head_params, head_bns)

    def forward(self, detail_patch, context_patch, tpm_patch, mode="infer") -> Tensor:
        """Class probabilities ``(N, 7, t, t, t)`` for the target region.

        ``context_patch`` is the already-downsampled context window; 4-D
        inputs ``(C, X, Y, Z)`` get a batch axis of one.
        """
        cfg = self.config
        detail_patch, context_patch, tpm_patch = (
            None if a is None else _batched(a, self.out_dtype) for a in (detail_patch, context_patch, tpm_patch))
        feats = [self.detail(detail_patch, mode)]
        t = feats[0].shape[2:]
        if self.context is not None:
            ctx = self.context(context_patch, mode)
            ctx = tc.upsample_replicate(ctx, cfg.context_downsample)
            if ctx.shape[2:] != t:
                raise GeometryError(f"context features {ctx.shape[2:]} vs detail {t}")
            feats.append(ctx)
        if tpm_patch.shape[2:] != t or tpm_patch.shape[1] != cfg.n_tpm_channels:
            raise GeometryError(f"TPM patch {tpm_patch.shape[1:]} does not match target {t}")
        feats.append(_maybe_zero(tpm_patch, cfg.zero_tpm))
        h = tc.concat(feats, axis=1)
        for w, b, bn in self.head:
            h = tc.pointwise_dense(h, w, b)
            if bn is None:
                break
            h = tc.batch_norm(h, bn, mode)
            h = tc.leaky_relu(h, cfg.leaky_slope)
        return tc.softmax_channels(h)

    __call__ = forward


def _batched(a, dtype=None):
    if not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=dtype))
    if a.data.ndim == 4:
        return Tensor(a.data[None]) if not a.requires_grad else _unsqueeze(a)
    if a.data.ndim != 5:
        raise GeometryError(f"expected 4-D or 5-D patch, got shape {a.shape}")
    return a


def _maybe_zero(tpm, zero):
    """Ablation switch: the TPM channels stay in the graph but carry zeros."""
    return Tensor(np.zeros_like(tpm.data)) if zero else tpm


def _unsqueeze(a):
    out = tc._make(a.data[None], (a,), lambda g: (g[0],))
    return out


# --------------------------------------------------------------------------
# U-Net
# --------------------------------------------------------------------------

@dataclass
class UNetConfig:
    widths: tuple = (38, 76, 152)
    n_tpm_channels: int = 6
    n_classes: int = 7
    leaky_slope: float = 0.3
    patch_size: int = 32
    zero_tpm: bool = False
    bn_momentum: float = 0.9
    bn_eps: float = 1e-5
    seed: int = 0

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        if len(self.widths) != 3:
            raise ValueError("U-Net needs three encoder widths")
        if self.patch_size % 8:
            raise ValueError("patch size must be divisible by 8 (three 2x poolings)")


class UNetModel(_Model):
    """Three pooling blocks down, three transposed-conv blocks up, concat skips.

    The TPM channels join the decoder output right before the final 1x1x1
    classification layer.
    """

    kind = "unet"

    def __init__(self, config: UNetConfig | None = None):
        cfg = config or UNetConfig()
        self.config = cfg
        rng = np.random.default_rng(cfg.seed)
        args = (cfg.leaky_slope, rng, cfg.bn_momentum, cfg.bn_eps)
        c1, c2, c3 = cfg.widths
        self.enc = [_ConvStack("enc1", 1, (c1, c1), *args, padding=1),
                    _ConvStack("enc2", c1, (c2, c2), *args, padding=1),
                    _ConvStack("enc3", c2, (c3, c3), *args, padding=1)]
        self.up, up_params = [], []
        for name, cin, cout in (("up3", c3, c3), ("up2", c3, c2), ("up1", c2, c1)):
            w = Parameter(_he_normal(rng, (cin, cout, 2, 2, 2), cin, cfg.leaky_slope),
                          f"{name}.weight")
            b = Parameter(np.zeros(cout, np.float32), f"{name}.bias", decay=False)
            self.up.append((w, b))
            up_params += [w, b]
        self.dec = [_ConvStack("dec3", 2 * c3, (c3, c3), *args, padding=1),
                    _ConvStack("dec2", 2 * c2, (c2, c2), *args, padding=1),
                    _ConvStack("dec1", 2 * c1, (c1, c1), *args, padding=1)]
        nin = c1 + cfg.n_tpm_channels
        self.out_w = Parameter(_he_normal(rng, (cfg.n_classes, nin), nin, 1.0), "classifier.weight")
        self.out_b = Parameter(np.zeros(cfg.n_classes, np.float32), "classifier.bias", decay=False)
        self._collect(self.enc + self.dec, up_params + [self.out_w, self.out_b])

    def forward(self, patch, tpm_patch, mode="infer") -> Tensor:
        cfg = self.config
        x, tpm = _batched(patch, self.out_dtype), _batched(tpm_patch, self.out_dtype)
        if x.shape[2:] != tpm.shape[2:]:
            raise GeometryError(f"image patch {x.shape[2:]} vs TPM patch {tpm.shape[2:]}")
        if any(s % 8 for s in x.shape[2:]):
            raise GeometryError(f"U-Net extents must be multiples of 8, got {x.shape[2:]}")
        skips = []
        for block in self.enc:
            x = block(x, mode)
            skips.append(x)
            x = tc.avg_pool(x, 2)
        for (w, b), block, skip in zip(self.up, self.dec, reversed(skips)):
            x = tc.conv_transpose2(x, w, b)
            x = tc.leaky_relu(x, cfg.leaky_slope)
            x = block(tc.concat([x, skip], axis=1), mode)
        x = tc.concat([x, _maybe_zero(tpm, cfg.zero_tpm)], axis=1)
        return tc.softmax_channels(tc.pointwise_dense(x, self.out_w, self.out_b))

    __call__ = forward


# --------------------------------------------------------------------------
# configs and checkpoints
# --------------------------------------------------------------------------

_KINDS = {"multiprior": (MultipriorConfig, MultipriorModel), "unet": (UNetConfig, UNetModel)}

MAGIC = b"MPRCKPT\x00"
VERSION = 1


def _config_to_dict(cfg):
    return {k: list(v) if isinstance(v, tuple) else v for k, v in dataclasses.asdict(cfg).items()}


def build_model(kind: str, config: dict | None = None):
    if kind not in _KINDS:
        raise CheckpointError(f"unknown model kind {kind!r}")
    cfg_cls, model_cls = _KINDS[kind]
    try:
        cfg = cfg_cls(**(config or {}))
    except TypeError as exc:
        raise CheckpointError(f"bad {kind} config: {exc}") from None
    return model_cls(cfg)


def read_model_spec(path, default_kind="multiprior"):
    """``(kind, config dict)`` from ``{"kind": ..., "config": {...}}`` or a bare config dict."""
    spec = json.loads(Path(path).read_text())
    if "config" in spec:
        return spec.get("kind", default_kind), dict(spec["config"])
    return default_kind, dict(spec)


def load_model_config(path):
    """Build a freshly initialised model from a JSON architecture file."""
    return build_model(*read_model_spec(path))


def checkpoint_bytes(model) -> bytes:
    desc = json.dumps(model.descriptor(), sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", VERSION, len(desc)), desc]
    arrays = model.state_arrays()
    parts.append(struct.pack("<I", len(arrays)))
    for name, arr in arrays.items():
        nb = name.encode("utf-8")
        parts.append(struct.pack("<H", len(nb)) + nb)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def save_checkpoint(model, path) -> None:
    """Layout (little endian): magic, u32 version, u32 len + JSON descriptor,
    u32 count, then per tensor: u16 len + name, u8 ndim, u32 dims, f32 data."""
    tmp = Path(str(path) + ".part")
    tmp.write_bytes(checkpoint_bytes(model))
    tmp.replace(path)


class _Reader:
    def __init__(self, buf):
        self.buf, self.pos = buf, 0

    def take(self, n):
        if self.pos + n > len(self.buf):
            raise CheckpointError("checkpoint truncated")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path):
    return checkpoint_from_bytes(Path(path).read_bytes())


def checkpoint_from_bytes(buf: bytes):
    r = _Reader(buf)
    if r.take(len(MAGIC)) != MAGIC:
        raise CheckpointError("not a multiprior checkpoint (bad magic)")
    version, dlen = r.unpack("<II")
    if version != VERSION:
        raise CheckpointError(f"checkpoint version {version}, expected {VERSION}")
    try:
        desc = json.loads(r.take(dlen).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt descriptor: {exc}") from None
    model = build_model(desc.get("kind"), desc.get("config"))
    params = model.named_parameters()
    buffers = model.named_buffers()
    (count,) = r.unpack("<I")
    if count != len(params) + len(buffers):
        raise CheckpointError(f"checkpoint holds {count} tensors, model expects "
                              f"{len(params) + len(buffers)}")
    seen = set()
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode("utf-8")
        (ndim,) = r.unpack("<B")
        dims = r.unpack(f"<{ndim}I")
        data = np.frombuffer(r.take(4 * int(np.prod(dims))), dtype="<f4").reshape(dims)
        target = params[name].data if name in params else buffers.get(name)
        if target is None:
            raise CheckpointError(f"unexpected tensor {name!r}")
        if tuple(target.shape) != tuple(dims):
            raise CheckpointError(f"shape mismatch for {name}: file {dims}, model {target.shape}")
        target[...] = data
        seen.add(name)
    if r.pos != len(buf):
        raise CheckpointError("trailing bytes after checkpoint payload")
    return model
