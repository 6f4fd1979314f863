"""Volumetric containers, NIfTI-1 / raw-sidecar I/O and intensity preprocessing.

Arrays are held in memory indexed ``[x, y, z]``; on disk the data is stored
x-fastest (Fortran order), as NIfTI requires.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

N_CLASSES = 7
CLASS_NAMES = ("background", "air", "skin", "bone", "csf", "gm", "wm")
BACKGROUND, AIR, SKIN, BONE, CSF, GM, WM = range(N_CLASSES)

# TPM channel order; the TPM has no background channel.
TPM_NAMES = ("skin", "bone", "csf", "gm", "wm", "air")
TPM_CLASSES = (SKIN, BONE, CSF, GM, WM, AIR)
N_TPM = len(TPM_NAMES)

HEADER_SIZE = 348
VOX_OFFSET = 352
DT_UINT8, DT_INT16, DT_FLOAT32 = 2, 4, 16
_DTYPES = {DT_UINT8: ("u1", 8), DT_INT16: ("i2", 16), DT_FLOAT32: ("f4", 32)}


class NiftiFormatError(ValueError):
    """Malformed NIfTI header or magic."""


class NiftiUnsupportedError(ValueError):
    """Valid NIfTI that falls outside the supported subset."""


class DegenerateInputError(ValueError):
    """Input with no usable variation (e.g. constant intensity)."""


def _check_spacing(spacing):
    spacing = tuple(float(s) for s in spacing)
    if len(spacing) != 3 or not all(s > 0 and np.isfinite(s) for s in spacing):
        raise ValueError(f"spacing must be three positive numbers, got {spacing}")
    return spacing


@dataclass
class Volume3D:
    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)
    header: bytes | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 3 or min(self.data.shape) < 1:
            raise ValueError(f"Volume3D needs a 3-D array, got shape {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("Volume3D data must be finite")
        self.spacing = _check_spacing(self.spacing)

    @property
    def dims(self):
        return self.data.shape


@dataclass
class LabelVolume:
    labels: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)
    header: bytes | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.ndim != 3:
            raise ValueError(f"LabelVolume needs a 3-D array, got shape {labels.shape}")
        if labels.size and (labels.min() < 0 or labels.max() >= N_CLASSES):
            raise ValueError("labels must lie in 0..6")
        self.labels = labels.astype(np.uint8)
        self.spacing = _check_spacing(self.spacing)

    @property
    def dims(self):
        return self.labels.shape


@dataclass
class TissueProbabilityMap:
    """Six prior channels ``(skin, bone, csf, gm, wm, air)`` on the image grid."""

    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 4 or self.data.shape[0] != N_TPM:
            raise ValueError(f"TPM must have shape (6, X, Y, Z), got {self.data.shape}")
        if self.data.min() < 0 or self.data.max() > 1:
            raise ValueError("TPM values must lie in [0, 1]")
        if self.data.sum(axis=0).max() > 1 + 1e-4:
            raise ValueError("TPM channel sums must not exceed 1")
        self.spacing = _check_spacing(self.spacing)

    @property
    def dims(self):
        return self.data.shape[1:]


@dataclass
class ProbabilityVolume:
    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.dtype != np.float64:
            self.data = self.data.astype(np.float32)
        if self.data.ndim != 4 or self.data.shape[0] != N_CLASSES:
            raise ValueError(f"expected shape (7, X, Y, Z), got {self.data.shape}")
        if self.data.min() < 0 or self.data.max() > 1 + 1e-6:
            raise ValueError("probabilities must lie in [0, 1]")
        if np.abs(self.data.sum(axis=0, dtype=np.float64) - 1).max() > 1e-5:
            raise ValueError("per-voxel probabilities must sum to 1")
        self.spacing = _check_spacing(self.spacing)

    @property
    def dims(self):
        return self.data.shape[1:]

    def argmax(self) -> LabelVolume:
        # np.argmax returns the first maximum, i.e. ties go to the lower class
        return LabelVolume(np.argmax(self.data, axis=0).astype(np.uint8), self.spacing)


# --------------------------------------------------------------------------
# NIfTI-1 single file (.nii)
# --------------------------------------------------------------------------

def _parse_header(raw: bytes):
    if len(raw) < HEADER_SIZE:
        raise NiftiFormatError("file shorter than a NIfTI-1 header")
    if struct.unpack("<i", raw[:4])[0] == HEADER_SIZE:
        bo = "<"
    elif struct.unpack(">i", raw[:4])[0] == HEADER_SIZE:
        bo = ">"
    else:
        raise NiftiFormatError("sizeof_hdr is not 348 in either byte order")
    if raw[344:348] != b"n+1\x00":
        raise NiftiFormatError(f"bad magic {raw[344:348]!r}")
    dim = struct.unpack(bo + "8h", raw[40:56])
    datatype, bitpix = struct.unpack(bo + "2h", raw[70:74])
    pixdim = struct.unpack(bo + "8f", raw[76:108])
    vox_offset, slope, inter = struct.unpack(bo + "3f", raw[108:120])
    if not 1 <= dim[0] <= 7:
        raise NiftiFormatError(f"dim[0]={dim[0]} out of range")
    if vox_offset < VOX_OFFSET:
        raise NiftiFormatError(f"vox_offset {vox_offset} < 352")
    return dict(byteorder=bo, dim=dim, datatype=datatype, bitpix=bitpix,
                pixdim=pixdim, vox_offset=int(vox_offset), slope=slope, inter=inter)


def _read_any(path, ndim):
    raw = Path(path).read_bytes()
    h = _parse_header(raw)
    if h["dim"][0] != ndim:
        raise NiftiUnsupportedError(f"expected dim[0]={ndim}, file has {h['dim'][0]}")
    if h["datatype"] not in _DTYPES:
        raise NiftiUnsupportedError(f"unsupported datatype code {h['datatype']}")
    shape = tuple(int(d) for d in h["dim"][1:1 + ndim])
    if min(shape) < 1:
        raise NiftiFormatError(f"non-positive dims {shape}")
    code, _ = _DTYPES[h["datatype"]]
    dtype = np.dtype(h["byteorder"] + code)
    count = int(np.prod(shape))
    if len(raw) < h["vox_offset"] + count * dtype.itemsize:
        raise NiftiFormatError("file truncated before end of voxel data")
    flat = np.frombuffer(raw, dtype=dtype, count=count, offset=h["vox_offset"])
    data = flat.reshape(shape, order="F").astype(np.float32)
    if h["slope"] != 0 and np.isfinite(h["slope"]):
        data = (data * np.float32(h["slope"]) + np.float32(h["inter"])).astype(np.float32)
    spacing = tuple(float(abs(p)) if p else 1.0 for p in h["pixdim"][1:4])
    header = raw[:HEADER_SIZE]
    if h["byteorder"] == ">":
        header = None  # the preserved-header path only handles little endian
    return data, spacing, header, h


def read_nifti(path) -> Volume3D:
    """Read a 3-D NIfTI-1 file into a float32 :class:`Volume3D`."""
    data, spacing, header, _ = _read_any(path, 3)
    return Volume3D(data, spacing, header)


def read_labels(path) -> LabelVolume:
    data, spacing, header, _ = _read_any(path, 3)
    labels = np.rint(data)
    if not np.array_equal(labels, data):
        raise NiftiUnsupportedError("label file holds non-integer values")
    return LabelVolume(labels.astype(np.int64), spacing, header)


def read_nifti_4d(path):
    """Read a 4-D NIfTI (x, y, z, channel); returns ``(array[c, x, y, z], spacing)``."""
    data, spacing, _, _ = _read_any(path, 4)
    return np.ascontiguousarray(np.moveaxis(data, 3, 0)), spacing


def read_tpm(path) -> TissueProbabilityMap:
    data, spacing = read_nifti_4d(path)
    return TissueProbabilityMap(np.clip(data, 0, 1), spacing)


def _build_header(shape, spacing, datatype, template=None):
    if template is not None and len(template) == HEADER_SIZE:
        hdr = bytearray(template)
    else:
        hdr = bytearray(HEADER_SIZE)
        struct.pack_into("<i", hdr, 0, HEADER_SIZE)
        struct.pack_into("<B", hdr, 123, 2)  # xyzt_units: mm
    dim = [len(shape), *shape] + [1] * (7 - len(shape))
    struct.pack_into("<8h", hdr, 40, *dim)
    struct.pack_into("<2h", hdr, 70, datatype, _DTYPES[datatype][1])
    pixdim = list(struct.unpack_from("<8f", hdr, 76))
    pixdim[0] = pixdim[0] if pixdim[0] in (-1.0, 1.0) else 1.0
    pixdim[1:4] = spacing
    for i in range(4, 1 + len(shape)):
        pixdim[i] = pixdim[i] or 1.0
    struct.pack_into("<8f", hdr, 76, *pixdim)
    struct.pack_into("<3f", hdr, 108, float(VOX_OFFSET), 1.0, 0.0)
    hdr[344:348] = b"n+1\x00"
    return bytes(hdr)


def _write(path, array, spacing, datatype, template=None):
    code, _ = _DTYPES[datatype]
    hdr = _build_header(array.shape, spacing, datatype, template)
    payload = np.asarray(array).astype("<" + code).tobytes(order="F")
    tmp = Path(str(path) + ".part")
    tmp.write_bytes(hdr + b"\x00" * (VOX_OFFSET - HEADER_SIZE) + payload)
    tmp.replace(path)


def write_nifti(vol, path) -> None:
    """Write a :class:`Volume3D` (float32) or :class:`LabelVolume` (uint8)."""
    if isinstance(vol, LabelVolume):
        _write(path, vol.labels, vol.spacing, DT_UINT8, vol.header)
    elif isinstance(vol, Volume3D):
        _write(path, vol.data, vol.spacing, DT_FLOAT32, vol.header)
    else:
        raise TypeError(f"cannot write {type(vol).__name__}")


def write_nifti_4d(array, spacing, path) -> None:
    """Write ``array[c, x, y, z]`` as a float32 4-D NIfTI."""
    array = np.asarray(array, dtype=np.float32)
    _write(path, np.moveaxis(array, 0, 3), _check_spacing(spacing), DT_FLOAT32)


def write_tpm(tpm: TissueProbabilityMap, path) -> None:
    write_nifti_4d(tpm.data, tpm.spacing, path)


# --------------------------------------------------------------------------
# raw + JSON sidecar
# --------------------------------------------------------------------------

_RAW_DTYPES = {"uint8": "<u1", "int16": "<i2", "float32": "<f4"}


def write_raw(vol, json_path) -> None:
    """Write ``<name>.json`` ({dims, spacing, dtype}) and ``<name>.raw`` next to it."""
    json_path = Path(json_path)
    if isinstance(vol, LabelVolume):
        array, dtype = vol.labels, "uint8"
    else:
        array, dtype = vol.data, "float32"
    meta = {"dims": list(array.shape), "spacing": list(vol.spacing), "dtype": dtype}
    json_path.write_text(json.dumps(meta, indent=1))
    json_path.with_suffix(".raw").write_bytes(
        array.astype(_RAW_DTYPES[dtype]).tobytes(order="F"))


def read_raw(json_path) -> Volume3D:
    json_path = Path(json_path)
    meta = json.loads(json_path.read_text())
    if meta["dtype"] not in _RAW_DTYPES:
        raise NiftiUnsupportedError(f"unsupported raw dtype {meta['dtype']}")
    dims = tuple(meta["dims"])
    flat = np.fromfile(json_path.with_suffix(".raw"), dtype=_RAW_DTYPES[meta["dtype"]])
    if flat.size != int(np.prod(dims)):
        raise NiftiFormatError("raw payload size does not match dims")
    return Volume3D(flat.reshape(dims, order="F"), meta["spacing"])


# --------------------------------------------------------------------------
# preprocessing
# --------------------------------------------------------------------------

def zscore_normalize(vol: Volume3D) -> Volume3D:
    """Zero-mean, unit-variance (population) scaling over all voxels."""
    x = vol.data.astype(np.float64)
    if x.size < 2:
        raise DegenerateInputError("z-scoring needs at least two voxels")
    mean = x.mean()
    std = np.sqrt(np.mean((x - mean) ** 2))
    if not std > 0:
        raise DegenerateInputError("volume has zero standard deviation")
    return Volume3D(((x - mean) / std).astype(np.float32), vol.spacing, vol.header)


def zero_pad(vol, margin: int):
    """Pad every face with ``margin`` zero voxels (works on Volume3D or ndarray)."""
    if margin < 0:
        raise ValueError("margin must be non-negative")
    if isinstance(vol, Volume3D):
        return Volume3D(np.pad(vol.data, margin), vol.spacing)
    arr = np.asarray(vol)
    widths = [(0, 0)] * (arr.ndim - 3) + [(margin, margin)] * 3
    return np.pad(arr, widths)


def one_hot_encode(labels: LabelVolume, n_classes: int = N_CLASSES) -> ProbabilityVolume:
    if n_classes != N_CLASSES:
        raise ValueError("ProbabilityVolume is fixed at 7 classes; use one_hot() for others")
    return ProbabilityVolume(one_hot(labels.labels), labels.spacing)


def one_hot(lab: np.ndarray, n_classes: int = N_CLASSES) -> np.ndarray:
    """Array-level one-hot: ``(...spatial) -> (n_classes, ...spatial)`` float32."""
    lab = np.asarray(lab)
    shape = (n_classes,) + (1,) * lab.ndim
    return (np.arange(n_classes).reshape(shape) == lab[None]).astype(np.float32)
