"""Calcium extraction and scoring inside a vascular mask.

The pipeline is window -> mask -> threshold -> (optional area filter) -> count.
A voxel is calcified when its windowed byte *exceeds* the threshold, i.e. the
comparison is strictly greater-than: a byte of exactly 145 is not calcium at
the default threshold.
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, Optional, Tuple, Union

import numpy as np
from scipy import ndimage

from .seg import RegionGrowParams, apply_mask, region_grow
from .volio import (
    ByteVolume,
    CtVolume,
    MaskVolume,
    VoxelSpacing,
    check_same_dims,
    resolve_window,
    window_to_byte,
)

DEFAULT_THRESHOLD = 145
THRESHOLD_RULE = "byte > threshold"
CSV_HEADER = ("slice_index", "count", "volume_mm3")


@dataclass(frozen=True)
class SliceRange:
    """Inclusive range of transverse slices (index grows superior to inferior)."""

    start_slice: int
    end_slice: int

    def __post_init__(self):
        if not 0 <= self.start_slice <= self.end_slice:
            raise ValueError(f"invalid slice range {self.start_slice}:{self.end_slice}")

    @classmethod
    def full(cls, nz: int) -> "SliceRange":
        return cls(0, nz - 1)

    @property
    def n_slices(self) -> int:
        return self.end_slice - self.start_slice + 1

    def validate(self, nz: int) -> None:
        if self.end_slice >= nz:
            raise ValueError(f"slice range {self.start_slice}:{self.end_slice} exceeds nz={nz}")

    def as_slice(self) -> slice:
        return slice(self.start_slice, self.end_slice + 1)


@dataclass(frozen=True)
class CalcificationReport:
    threshold_used: int
    window_level: Optional[float]
    window_width: Optional[float]
    slice_range: SliceRange
    per_slice_counts: Tuple[int, ...]
    per_slice_volumes_mm3: Tuple[float, ...]
    total_count: int
    total_volume_mm3: float
    voxel_volume_mm3: float
    min_area_filter_mm2: Union[float, str] = "none"
    parameters: Dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, Any]:
        d = asdict(self)
        d["per_slice_counts"] = list(self.per_slice_counts)
        d["per_slice_volumes_mm3"] = list(self.per_slice_volumes_mm3)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for k, (n, v) in enumerate(zip(self.per_slice_counts, self.per_slice_volumes_mm3)):
            w.writerow((self.slice_range.start_slice + k, n, repr(v)))
        return buf.getvalue()


def threshold_calcium(masked: ByteVolume, threshold: int = DEFAULT_THRESHOLD) -> MaskVolume:
    return MaskVolume(masked.bytes > threshold, masked.spacing)


def filter_components_min_area(
    calc: MaskVolume, min_area_mm2: float, connectivity_2d: int = 8
) -> MaskVolume:
    """Drop in-plane connected components smaller than ``min_area_mm2``.

    Each transverse slice is labeled on its own (4- or 8-connectivity); a
    component survives when ``pixels * sx * sy >= min_area_mm2``.
    """
    if min_area_mm2 < 0:
        raise ValueError("min_area_mm2 must be >= 0")
    if connectivity_2d not in (4, 8):
        raise ValueError(f"connectivity_2d must be 4 or 8, got {connectivity_2d}")
    # 3-D labeling with an empty top/bottom plane never links slices.
    structure = np.zeros((3, 3, 3), dtype=bool)
    structure[1] = ndimage.generate_binary_structure(2, 1 if connectivity_2d == 4 else 2)
    bits = calc.bits
    out = bits.copy()
    box = ndimage.find_objects(bits.view(np.uint8))
    if not box or box[0] is None:
        return MaskVolume(out, calc.spacing)
    sub = bits[box[0]]
    labels, n = ndimage.label(sub, structure=structure)
    sizes = np.bincount(labels.ravel(), minlength=n + 1)
    drop = sizes * calc.spacing.pixel_area_mm2 < min_area_mm2
    drop[0] = False
    if drop.any():
        out[box[0]][drop[labels]] = False
    return MaskVolume(out, calc.spacing)


def score(
    calc: MaskVolume,
    spacing: Optional[VoxelSpacing] = None,
    slice_range: Optional[SliceRange] = None,
    *,
    threshold_used: int = DEFAULT_THRESHOLD,
    window_level: Optional[float] = None,
    window_width: Optional[float] = None,
    min_area_filter_mm2: Union[float, str, None] = None,
    parameters: Optional[Dict[str, Any]] = None,
) -> CalcificationReport:
    """Per-slice and total calcium counts and volumes over ``slice_range``.

    Voxels outside the range are ignored.  The keyword arguments are provenance
    only and are copied into the report.
    """
    spacing = spacing or calc.spacing
    slice_range = slice_range or SliceRange.full(calc.nz)
    slice_range.validate(calc.nz)
    counts = np.count_nonzero(calc.bits[slice_range.as_slice()], axis=(1, 2))
    vv = spacing.voxel_volume_mm3
    per_counts = tuple(int(c) for c in counts)
    total = sum(per_counts)
    return CalcificationReport(
        threshold_used=threshold_used,
        window_level=window_level,
        window_width=window_width,
        slice_range=slice_range,
        per_slice_counts=per_counts,
        per_slice_volumes_mm3=tuple(c * vv for c in per_counts),
        total_count=total,
        total_volume_mm3=total * vv,
        voxel_volume_mm3=vv,
        min_area_filter_mm2="none" if min_area_filter_mm2 is None else min_area_filter_mm2,
        parameters=dict(parameters or {}),
    )


MaskSource = Union[MaskVolume, RegionGrowParams]


def vessel_mask(vol: CtVolume, source: MaskSource) -> MaskVolume:
    if isinstance(source, RegionGrowParams):
        return region_grow(vol, source)
    check_same_dims(vol, source, "volume and vascular mask")
    return source


def _source_params(source: MaskSource) -> Dict[str, Any]:
    if isinstance(source, RegionGrowParams):
        return {
            "mask_source": "region_grow",
            "seeds": [list(s) for s in source.seeds],
            "band_hu": [source.lower_hu, source.upper_hu],
            "connectivity_3d": source.connectivity,
            "max_voxels": source.max_voxels if source.max_voxels is not None else "none",
        }
    return {"mask_source": "imported"}


def run_pipeline(
    vol: CtVolume,
    mask_source: MaskSource,
    window="auto",
    threshold: int = DEFAULT_THRESHOLD,
    min_area_mm2: Optional[float] = None,
    slice_range: Optional[SliceRange] = None,
    connectivity_2d: int = 8,
    extra_parameters: Optional[Dict[str, Any]] = None,
) -> CalcificationReport:
    """Score ``vol`` end to end.

    ``window`` is ``"auto"`` (min-max over the volume) or ``(level, width)``.
    ``mask_source`` is a vascular MaskVolume or RegionGrowParams to grow one.
    """
    slice_range = slice_range or SliceRange.full(vol.nz)
    slice_range.validate(vol.nz)
    window_mode = "auto" if window is None or window == "auto" else "explicit"
    mask = vessel_mask(vol, mask_source)
    level, width = resolve_window(vol, window)

    bv = window_to_byte(vol, level, width)
    masked = apply_mask(bv, mask)
    del bv
    calc = threshold_calcium(masked, threshold)
    del masked
    if min_area_mm2 is not None:
        calc = filter_components_min_area(calc, min_area_mm2, connectivity_2d)

    params = {
        "window_mode": window_mode,
        "threshold_rule": THRESHOLD_RULE,
        "rounding": "half away from zero",
        "connectivity_2d": connectivity_2d if min_area_mm2 is not None else "none",
        "spacing_mm": list(vol.spacing.as_tuple()),
        "dims": list(vol.dims),
        "vessel_voxels": mask.count,
    }
    params.update(_source_params(mask_source))
    params.update(extra_parameters or {})
    return score(
        calc,
        vol.spacing,
        slice_range,
        threshold_used=threshold,
        window_level=level,
        window_width=width,
        min_area_filter_mm2=min_area_mm2,
        parameters=params,
    )
