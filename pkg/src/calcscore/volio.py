"""Volume types, the CTV two-file on-disk format, and HU to 8-bit windowing.

Arrays are held in numpy C order with shape ``(nz, ny, nx)`` so that the flat
buffer is x-fastest, matching the raw payload layout.  ``dims`` is always
reported as ``(nx, ny, nz)``.
"""
from __future__ import annotations

import json
import math
import os
import tempfile
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Tuple, Union

import numpy as np

PathLike = Union[str, os.PathLike]

MAGIC = "CTV1"
_DTYPES = {"i16": np.dtype("<i2"), "u8": np.dtype("u1")}
_REQUIRED_KEYS = ("magic", "dims", "spacing_mm", "dtype", "order", "endian", "payload")


class CtvError(Exception):
    """Base class for CTV format problems."""


class HeaderError(CtvError):
    pass


class DtypeError(CtvError):
    pass


class PayloadLengthError(CtvError):
    pass


class MaskValueError(CtvError):
    """A mask holds a sample outside {0, 1}."""


class DimsMismatchError(ValueError):
    pass


class DegenerateWindowWarning(UserWarning):
    pass


@dataclass(frozen=True)
class VoxelSpacing:
    sx: float
    sy: float
    sz: float

    def __post_init__(self):
        for name in ("sx", "sy", "sz"):
            v = float(getattr(self, name))
            if not math.isfinite(v) or v <= 0:
                raise ValueError(f"spacing {name} must be positive and finite, got {v!r}")
            object.__setattr__(self, name, v)

    @property
    def voxel_volume_mm3(self) -> float:
        return self.sx * self.sy * self.sz

    @property
    def pixel_area_mm2(self) -> float:
        return self.sx * self.sy

    def as_tuple(self) -> Tuple[float, float, float]:
        return (self.sx, self.sy, self.sz)


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    arr.setflags(write=False)
    return arr


def _as_spacing(spacing) -> VoxelSpacing:
    if isinstance(spacing, VoxelSpacing):
        return spacing
    return VoxelSpacing(*spacing)


class _Grid:
    """Shared dims/slice helpers; subclasses keep their array in ``_array``."""

    _array_name = ""

    @property
    def _array(self) -> np.ndarray:
        return getattr(self, self._array_name)

    @property
    def dims(self) -> Tuple[int, int, int]:
        nz, ny, nx = self._array.shape
        return (nx, ny, nz)

    @property
    def shape(self) -> Tuple[int, int, int]:
        return self._array.shape

    @property
    def nz(self) -> int:
        return self._array.shape[0]

    @property
    def size(self) -> int:
        return self._array.size

    def slice(self, k: int) -> np.ndarray:
        """Transverse slice ``k`` as a (ny, nx) view."""
        return self._array[k]


def _check_grid(arr: np.ndarray, kind: str) -> None:
    if arr.ndim != 3:
        raise ValueError(f"{kind} needs a 3-D array, got {arr.ndim}-D")
    if min(arr.shape) < 1:
        raise ValueError(f"{kind} dims must all be >= 1, got {arr.shape[::-1]}")


@dataclass(frozen=True, eq=False)
class CtVolume(_Grid):
    """Signed 16-bit Hounsfield-unit volume, array shape (nz, ny, nx)."""

    voxels: np.ndarray
    spacing: VoxelSpacing
    _array_name = "voxels"

    def __post_init__(self):
        arr = np.asarray(self.voxels)
        _check_grid(arr, "CtVolume")
        if arr.dtype != np.int16:
            if arr.size and (arr.min() < -32768 or arr.max() > 32767):
                raise ValueError("CtVolume samples must fit in signed 16 bits")
            arr = arr.astype(np.int16)
        object.__setattr__(self, "voxels", _frozen(arr))
        object.__setattr__(self, "spacing", _as_spacing(self.spacing))

    def __eq__(self, other):
        if not isinstance(other, CtVolume):
            return NotImplemented
        return self.spacing == other.spacing and np.array_equal(self.voxels, other.voxels)


@dataclass(frozen=True, eq=False)
class MaskVolume(_Grid):
    """Binary voxel labels, stored as a bool array of shape (nz, ny, nx)."""

    bits: np.ndarray
    spacing: VoxelSpacing
    _array_name = "bits"

    def __post_init__(self):
        arr = np.asarray(self.bits)
        _check_grid(arr, "MaskVolume")
        if arr.dtype != np.bool_:
            if arr.size and not np.isin(arr, (0, 1)).all():
                raise MaskValueError("mask samples must be 0 or 1")
            arr = arr.astype(bool)
        object.__setattr__(self, "bits", _frozen(arr))
        object.__setattr__(self, "spacing", _as_spacing(self.spacing))

    @property
    def count(self) -> int:
        return int(np.count_nonzero(self.bits))

    def __eq__(self, other):
        if not isinstance(other, MaskVolume):
            return NotImplemented
        return self.spacing == other.spacing and np.array_equal(self.bits, other.bits)

    @classmethod
    def empty_like(cls, grid: _Grid) -> "MaskVolume":
        return cls(np.zeros(grid.shape, dtype=bool), grid.spacing)


@dataclass(frozen=True, eq=False)
class ByteVolume(_Grid):
    """8-bit windowed rendition of a CtVolume; records the HU window used."""

    bytes: np.ndarray
    spacing: VoxelSpacing
    window_level: float
    window_width: float
    _array_name = "bytes"

    def __post_init__(self):
        arr = np.asarray(self.bytes)
        _check_grid(arr, "ByteVolume")
        if arr.dtype != np.uint8:
            raise ValueError(f"ByteVolume needs uint8 samples, got {arr.dtype}")
        if not self.window_width > 0:
            raise ValueError("window_width must be > 0")
        object.__setattr__(self, "bytes", _frozen(arr))
        object.__setattr__(self, "spacing", _as_spacing(self.spacing))
        object.__setattr__(self, "window_level", float(self.window_level))
        object.__setattr__(self, "window_width", float(self.window_width))


def check_same_dims(a: _Grid, b: _Grid, what: str = "volumes") -> None:
    if a.dims != b.dims:
        raise DimsMismatchError(f"{what} differ in dims: {a.dims} vs {b.dims}")


# --------------------------------------------------------------------------
# windowing


def round_half_away(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def auto_window(vol: CtVolume) -> Tuple[float, float]:
    """Min-max window ``(level, width)`` over the whole volume.

    A constant volume gets a unit-width window whose lower edge sits on the
    constant value, so every voxel maps to 0.
    """
    lo = int(vol.voxels.min())
    hi = int(vol.voxels.max())
    if lo == hi:
        warnings.warn(
            f"constant volume (all {lo} HU): auto-window is degenerate, all bytes set to 0",
            DegenerateWindowWarning,
            stacklevel=2,
        )
        return lo + 0.5, 1.0
    return (lo + hi) / 2.0, float(hi - lo)


def window_lut(level: float, width: float) -> np.ndarray:
    """Byte value for every int16 sample, indexed by the sample's uint16 bit pattern."""
    if not width > 0:
        raise ValueError(f"window width must be > 0, got {width}")
    hu = np.arange(65536, dtype=np.uint16).view(np.int16).astype(np.float64)
    scaled = (hu - (level - width / 2.0)) / width * 255.0
    return np.clip(round_half_away(scaled), 0, 255).astype(np.uint8)


def resolve_window(vol: CtVolume, window) -> Tuple[float, float]:
    """``window`` is ``"auto"``/None or a ``(level, width)`` pair."""
    if window is None or window == "auto":
        return auto_window(vol)
    level, width = window
    if not width > 0:
        raise ValueError(f"window width must be > 0, got {width}")
    return float(level), float(width)


def window_to_byte(vol: CtVolume, level: float | None = None, width: float | None = None) -> ByteVolume:
    """Map HU to bytes with ``clamp(round((hu - (level - width/2)) / width * 255), 0, 255)``.

    Rounding is half away from zero.  With ``level`` and ``width`` both omitted
    the min-max auto-window is used.
    """
    if level is None and width is None:
        level, width = auto_window(vol)
    elif level is None or width is None:
        raise ValueError("give both level and width, or neither for auto-windowing")
    lut = window_lut(level, width)
    data = lut[vol.voxels.view(np.uint16)]
    return ByteVolume(data, vol.spacing, level, width)


# --------------------------------------------------------------------------
# CTV format


def _atomic_write_bytes(path: Path, data) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def payload_path_for(header: Path) -> Path:
    return header.with_suffix(".raw")


def format_header(dims, spacing: VoxelSpacing, dtype: str, payload: str) -> str:
    lines = [
        f"magic = {MAGIC}",
        f"dims = {json.dumps(list(dims))}",
        f"spacing_mm = {json.dumps(list(spacing.as_tuple()))}",
        f"dtype = {dtype}",
        "order = x-fastest",
        "endian = little",
        f"payload = {payload}",
    ]
    return "\n".join(lines) + "\n"


def parse_header(text: str) -> dict:
    fields = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise HeaderError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in fields:
            raise HeaderError(f"line {lineno}: duplicate key {key!r}")
        fields[key] = value
    missing = [k for k in _REQUIRED_KEYS if k not in fields]
    if missing:
        raise HeaderError(f"header missing fields: {', '.join(missing)}")
    if fields["magic"] != MAGIC:
        raise HeaderError(f"bad magic {fields['magic']!r}, expected {MAGIC!r}")
    if fields["order"] != "x-fastest":
        raise HeaderError(f"unsupported order {fields['order']!r}")
    if fields["endian"] != "little":
        raise HeaderError(f"unsupported endian {fields['endian']!r}")
    try:
        dims = json.loads(fields["dims"])
        spacing = json.loads(fields["spacing_mm"])
    except json.JSONDecodeError as exc:
        raise HeaderError(f"cannot parse dims/spacing_mm: {exc}") from None
    if not (isinstance(dims, list) and len(dims) == 3 and all(type(d) is int and d >= 1 for d in dims)):
        raise HeaderError(f"dims must be three integers >= 1, got {fields['dims']}")
    if not (isinstance(spacing, list) and len(spacing) == 3
            and all(isinstance(s, (int, float)) and not isinstance(s, bool) for s in spacing)):
        raise HeaderError(f"spacing_mm must be three numbers, got {fields['spacing_mm']}")
    try:
        vspacing = VoxelSpacing(*spacing)
    except ValueError as exc:
        raise HeaderError(str(exc)) from None
    return {
        "dims": tuple(dims),
        "spacing": vspacing,
        "dtype": fields["dtype"],
        "payload": fields["payload"],
    }


def _read(path: PathLike, want_dtype: str) -> Tuple[np.ndarray, VoxelSpacing]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"file not found: {path}")
    try:
        text = path.read_text(encoding="utf-8")
    except UnicodeDecodeError:
        raise HeaderError(f"{path}: header is not UTF-8 text") from None
    hdr = parse_header(text)
    if hdr["dtype"] not in _DTYPES:
        raise DtypeError(f"{path}: unknown dtype {hdr['dtype']!r}")
    if hdr["dtype"] != want_dtype:
        raise DtypeError(f"{path}: expected dtype {want_dtype!r}, header says {hdr['dtype']!r}")
    payload = path.parent / hdr["payload"]
    if not payload.is_file():
        raise FileNotFoundError(f"payload file not found: {payload}")
    dtype = _DTYPES[want_dtype]
    nx, ny, nz = hdr["dims"]
    expected = nx * ny * nz * dtype.itemsize
    actual = payload.stat().st_size
    if actual != expected:
        raise PayloadLengthError(
            f"{payload}: {actual} bytes, dims {nx}x{ny}x{nz} of {want_dtype} need {expected}"
        )
    data = np.fromfile(payload, dtype=dtype).reshape(nz, ny, nx)
    return data, hdr["spacing"]


def _write(path: PathLike, arr: np.ndarray, spacing: VoxelSpacing, dtype: str) -> None:
    path = Path(path)
    payload = payload_path_for(path)
    if payload == path:
        raise ValueError(f"header path {path} must not end in .raw")
    nz, ny, nx = arr.shape
    raw = np.ascontiguousarray(arr, dtype=_DTYPES[dtype]).tobytes()
    _atomic_write_bytes(payload, raw)
    _atomic_write_bytes(path, format_header((nx, ny, nz), spacing, dtype, payload.name).encode())


def load_volume(path: PathLike) -> CtVolume:
    data, spacing = _read(path, "i16")
    return CtVolume(data.astype(np.int16, copy=False), spacing)


def save_volume(vol: CtVolume, path: PathLike) -> None:
    _write(path, vol.voxels, vol.spacing, "i16")


def load_mask(path: PathLike) -> MaskVolume:
    data, spacing = _read(path, "u8")
    if data.size and data.max() > 1:
        bad = int(np.flatnonzero(data > 1)[0])
        raise MaskValueError(f"{path}: mask sample {int(data.flat[bad])} at linear index {bad}")
    return MaskVolume(data.view(bool), spacing)


def save_mask(mask: MaskVolume, path: PathLike) -> None:
    _write(path, mask.bits.view(np.uint8), mask.spacing, "u8")
