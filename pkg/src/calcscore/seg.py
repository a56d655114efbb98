"""Vascular masks: import from file, seeded band growth, and mask application."""
from __future__ import annotations

import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from .volio import (
    ByteVolume,
    CtVolume,
    DimsMismatchError,
    MaskVolume,
    PathLike,
    check_same_dims,
    load_mask,
)

Seed = Tuple[int, int, int]


class NoSeedInBandWarning(UserWarning):
    """Every seed's intensity lies outside the growth band; the mask is empty."""


@dataclass(frozen=True)
class RegionGrowParams:
    """Seeds are ``(x, y, z)`` voxel indices; the HU band is inclusive.

    ``max_voxels=None`` means no cap (the volume's voxel count).
    """

    seeds: Sequence[Seed]
    lower_hu: float
    upper_hu: float
    connectivity: int = 6
    max_voxels: Optional[int] = None

    def __post_init__(self):
        seeds = tuple(tuple(int(c) for c in s) for s in self.seeds)
        if not seeds:
            raise ValueError("region growing needs at least one seed")
        if any(len(s) != 3 for s in seeds):
            raise ValueError("seeds must be (x, y, z) triples")
        object.__setattr__(self, "seeds", seeds)
        if self.lower_hu > self.upper_hu:
            raise ValueError(f"empty band: lower {self.lower_hu} > upper {self.upper_hu}")
        if self.connectivity not in (6, 26):
            raise ValueError(f"connectivity must be 6 or 26, got {self.connectivity}")
        if self.max_voxels is not None and self.max_voxels < 1:
            raise ValueError("max_voxels must be >= 1")

    def check_bounds(self, dims: Tuple[int, int, int]) -> None:
        for s in self.seeds:
            if not all(0 <= c < n for c, n in zip(s, dims)):
                raise IndexError(f"seed {s} outside volume dims {dims}")

    def cap(self, vol: CtVolume) -> int:
        return vol.size if self.max_voxels is None else int(self.max_voxels)


def structure_for(connectivity: int) -> np.ndarray:
    return ndimage.generate_binary_structure(3, 1 if connectivity == 6 else 3)


def _neighbor_offsets(connectivity: int) -> np.ndarray:
    st = structure_for(connectivity)
    offs = np.argwhere(st) - 1
    return offs[np.any(offs != 0, axis=1)]  # (dz, dy, dx)


def _bfs_capped(in_band: np.ndarray, start: np.ndarray, connectivity: int, cap: int) -> np.ndarray:
    """Level-synchronous BFS; each level ordered by linear index, cut at ``cap`` voxels."""
    shape = in_band.shape
    flat_band = in_band.ravel()
    visited = np.zeros(in_band.size, dtype=bool)
    offsets = _neighbor_offsets(connectivity)
    frontier = start[:cap]
    visited[frontier] = True
    taken = frontier.size
    while frontier.size and taken < cap:
        zyx = np.stack(np.unravel_index(frontier, shape), axis=1)
        cand = (zyx[:, None, :] + offsets[None, :, :]).reshape(-1, 3)
        ok = np.all((cand >= 0) & (cand < shape), axis=1)
        lin = np.ravel_multi_index(cand[ok].T, shape)
        lin = np.unique(lin)
        lin = lin[flat_band[lin] & ~visited[lin]]
        lin = lin[: cap - taken]
        visited[lin] = True
        taken += lin.size
        frontier = lin
    return visited.reshape(shape)


def region_grow(vol: CtVolume, params: RegionGrowParams) -> MaskVolume:
    """Grow a mask from seed voxels through neighbors whose HU is in band.

    The result is the union of the in-band connected components that contain
    an in-band seed.  When that exceeds ``max_voxels`` the growth is cut in
    breadth-first order with ties broken by ascending linear index.  Seeds out
    of band are ignored; if none is in band a ``NoSeedInBandWarning`` is issued
    and the mask is empty.
    """
    params.check_bounds(vol.dims)
    v = vol.voxels
    in_band = (v >= params.lower_hu) & (v <= params.upper_hu)
    nz, ny, nx = v.shape
    lin_seeds = np.unique([x + nx * (y + ny * z) for x, y, z in params.seeds])
    lin_seeds = lin_seeds[in_band.ravel()[lin_seeds]]
    if lin_seeds.size == 0:
        warnings.warn(
            f"no seed in band [{params.lower_hu}, {params.upper_hu}] HU; mask is empty",
            NoSeedInBandWarning,
            stacklevel=2,
        )
        return MaskVolume.empty_like(vol)

    labels, _ = ndimage.label(in_band, structure=structure_for(params.connectivity))
    seed_labels = np.unique(labels.ravel()[lin_seeds])
    lut = np.zeros(labels.max() + 1, dtype=bool)
    lut[seed_labels] = True
    grown = lut[labels]
    del labels
    cap = params.cap(vol)
    if np.count_nonzero(grown) > cap:
        grown = _bfs_capped(grown, lin_seeds, params.connectivity, cap)
    return MaskVolume(grown, vol.spacing)


def read_seed_file(path: PathLike) -> List[Seed]:
    """One ``x y z`` triple per line; blank lines and ``#`` comments are skipped."""
    seeds = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.replace(",", " ").split()
        if len(parts) != 3:
            raise ValueError(f"{path}:{lineno}: expected 'x y z', got {line!r}")
        seeds.append(tuple(int(p) for p in parts))
    return seeds


def import_mask(path: PathLike, expected_dims: Optional[Tuple[int, int, int]] = None) -> MaskVolume:
    """Load an externally produced mask (e.g. a network's prediction) and check its dims."""
    mask = load_mask(path)
    if expected_dims is not None and tuple(expected_dims) != mask.dims:
        raise DimsMismatchError(f"{path}: mask dims {mask.dims}, expected {tuple(expected_dims)}")
    return mask


def apply_mask(bv: ByteVolume, mask: MaskVolume) -> ByteVolume:
    """Zero every byte outside the mask."""
    check_same_dims(bv, mask, "byte volume and mask")
    out = np.where(mask.bits, bv.bytes, np.uint8(0))
    return ByteVolume(out, bv.spacing, bv.window_level, bv.window_width)
