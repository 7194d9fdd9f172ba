"""Bit-exact volume file format: a JSON header plus a raw little-endian payload.

A volume named `vol` is stored as `vol.json` (UTF-8 header) and `vol.raw`
(payload). Voxels are laid out x-fastest (index = x + nx*(y + ny*z)); for
multi-channel volumes the channels of one voxel are interleaved. Supported
kinds: "scalar" (1 channel, f32/f64), "labels" (1 channel, u16, with a class
count), "field" (3 channels, f32/f64).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from .errors import FormatError
from .volumes import LabelVolume, ScalarVolume
from .warp import DisplacementField

_DTYPES = {"f32": "<f4", "f64": "<f8", "u16": "<u2"}
_KIND_CHANNELS = {"scalar": 1, "labels": 1, "field": 3}
_KIND_DTYPES = {"scalar": ("f32", "f64"), "labels": ("u16",), "field": ("f32", "f64")}
_HEADER_KEYS = {"dims", "kind", "dtype", "order", "channels", "classes"}


@dataclass(frozen=True)
class VolumeHeader:
    """On-disk description of one volume payload."""

    dims: tuple[int, int, int]
    kind: str
    dtype: str
    order: str = "x-fastest"
    channels: int = 1
    classes: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        if len(self.dims) != 3 or any(d < 1 for d in self.dims):
            raise FormatError(f"dims must be three positive integers, got {self.dims}")
        if self.kind not in _KIND_CHANNELS:
            raise FormatError(f"unknown volume kind {self.kind!r}")
        if self.dtype not in _KIND_DTYPES[self.kind]:
            raise FormatError(f"kind {self.kind!r} does not allow dtype {self.dtype!r}")
        if self.order != "x-fastest":
            raise FormatError(f"unsupported order {self.order!r}")
        if self.channels != _KIND_CHANNELS[self.kind]:
            raise FormatError(f"kind {self.kind!r} requires {_KIND_CHANNELS[self.kind]} channels, "
                              f"got {self.channels}")
        if self.kind == "labels":
            if self.classes is None or int(self.classes) < 1:
                raise FormatError("labels volumes need a positive 'classes' entry")
            object.__setattr__(self, "classes", int(self.classes))
        elif self.classes is not None:
            raise FormatError(f"kind {self.kind!r} does not take 'classes'")

    @property
    def payload_bytes(self) -> int:
        nx, ny, nz = self.dims
        return nx * ny * nz * self.channels * np.dtype(_DTYPES[self.dtype]).itemsize


def _base(path) -> Path:
    p = Path(path)
    if p.suffix in (".json", ".raw"):
        p = p.with_suffix("")
    return p


def _to_payload_order(data: np.ndarray) -> np.ndarray:
    """(nx, ny, nz[, C]) array -> flat x-fastest, channel-interleaved."""
    if data.ndim == 3:
        return data.transpose(2, 1, 0).ravel()
    return data.transpose(2, 1, 0, 3).ravel()


def _from_payload_order(flat: np.ndarray, dims, channels: int) -> np.ndarray:
    nx, ny, nz = dims
    if channels == 1:
        return flat.reshape(nz, ny, nx).transpose(2, 1, 0)
    return flat.reshape(nz, ny, nx, channels).transpose(2, 1, 0, 3)


def write_volume(path, header: VolumeHeader, data: np.ndarray) -> Path:
    """Write header + payload; returns the base path (without extension)."""
    arr = np.asarray(data)
    expected = header.dims if header.channels == 1 else header.dims + (header.channels,)
    if arr.shape != expected:
        raise FormatError(f"payload shape {arr.shape} does not match header {expected}")
    if header.dtype in ("f32", "f64") and not np.isfinite(arr).all():
        raise FormatError("refusing to write non-finite float payload")
    if header.kind == "labels" and arr.size and (arr.min() < 0 or arr.max() >= header.classes):
        raise FormatError(f"label ids exceed declared class count {header.classes}")
    base = _base(path)
    base.parent.mkdir(parents=True, exist_ok=True)
    payload = _to_payload_order(arr).astype(_DTYPES[header.dtype])
    hdr = {k: v for k, v in asdict(header).items() if v is not None}
    hdr["dims"] = list(header.dims)
    base.with_suffix(".json").write_text(json.dumps(hdr, indent=2, sort_keys=True) + "\n",
                                         encoding="utf-8")
    base.with_suffix(".raw").write_bytes(payload.tobytes())
    return base


def read_volume(path) -> tuple[VolumeHeader, np.ndarray]:
    """Read and validate a volume; returns (header, in-memory (nx,ny,nz[,C]) array)."""
    base = _base(path)
    try:
        raw_hdr = json.loads(base.with_suffix(".json").read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise FormatError(f"missing header file {base.with_suffix('.json')}")
    except json.JSONDecodeError as e:
        raise FormatError(f"malformed header {base.with_suffix('.json')}: {e}")
    if not isinstance(raw_hdr, dict):
        raise FormatError("volume header must be a JSON object")
    unknown = set(raw_hdr) - _HEADER_KEYS
    if unknown:
        raise FormatError(f"unknown header keys: {sorted(unknown)}")
    for key in ("dims", "kind", "dtype", "channels"):
        if key not in raw_hdr:
            raise FormatError(f"header missing required key {key!r}")
    header = VolumeHeader(dims=tuple(raw_hdr["dims"]), kind=raw_hdr["kind"],
                          dtype=raw_hdr["dtype"], order=raw_hdr.get("order", "x-fastest"),
                          channels=int(raw_hdr["channels"]), classes=raw_hdr.get("classes"))
    try:
        blob = base.with_suffix(".raw").read_bytes()
    except FileNotFoundError:
        raise FormatError(f"missing payload file {base.with_suffix('.raw')}")
    if len(blob) != header.payload_bytes:
        raise FormatError(f"payload length mismatch: expected {header.payload_bytes} bytes, "
                          f"got {len(blob)}")
    flat = np.frombuffer(blob, dtype=_DTYPES[header.dtype])
    if header.dtype in ("f32", "f64") and not np.isfinite(flat).all():
        raise FormatError("payload contains non-finite values")
    return header, _from_payload_order(flat, header.dims, header.channels)


# typed convenience wrappers ------------------------------------------------

def save_scalar(path, vol: ScalarVolume, dtype: str = "f64") -> Path:
    hdr = VolumeHeader(dims=vol.shape.dims, kind="scalar", dtype=dtype, channels=1)
    return write_volume(path, hdr, vol.data)


def load_scalar(path) -> ScalarVolume:
    header, data = read_volume(path)
    if header.kind != "scalar":
        raise FormatError(f"expected a scalar volume, found kind {header.kind!r}")
    return ScalarVolume(data.astype(np.float64))


def save_labels(path, vol: LabelVolume) -> Path:
    hdr = VolumeHeader(dims=vol.shape.dims, kind="labels", dtype="u16", channels=1,
                       classes=vol.num_classes)
    return write_volume(path, hdr, vol.data.astype(np.uint16))


def load_labels(path) -> LabelVolume:
    header, data = read_volume(path)
    if header.kind != "labels":
        raise FormatError(f"expected a labels volume, found kind {header.kind!r}")
    return LabelVolume(data, header.classes)


def save_field(path, f: DisplacementField, dtype: str = "f64") -> Path:
    hdr = VolumeHeader(dims=f.shape.dims, kind="field", dtype=dtype, channels=3)
    return write_volume(path, hdr, f.data)


def load_field(path) -> DisplacementField:
    header, data = read_volume(path)
    if header.kind != "field":
        raise FormatError(f"expected a field volume, found kind {header.kind!r}")
    return DisplacementField(data.astype(np.float64))
