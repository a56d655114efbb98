"""Synthetic CT phantoms with exact ground truth.

Geometry is given in millimetres with voxel ``(i, j, k)`` centred at
``(i*sx, j*sy, k*sz)``.  A voxel belongs to a shape when its centre does.
Overlaps resolve by a fixed write order: background, bone, lumen,
calcification, artifact.

Phantom specs are JSON documents; see ``data/example_phantom.json``.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from importlib import resources
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .calc import DEFAULT_THRESHOLD, SliceRange, threshold_calcium
from .volio import CtVolume, MaskVolume, PathLike, VoxelSpacing, resolve_window, round_half_away, window_to_byte

_EPS = 1e-9


class PhantomSpecError(ValueError):
    pass


def _vec(v, name) -> Tuple[float, float, float]:
    if len(v) != 3:
        raise PhantomSpecError(f"{name} must have 3 components")
    return tuple(float(c) for c in v)


def _span(v, name) -> Tuple[float, float]:
    if len(v) != 2:
        raise PhantomSpecError(f"{name} must be a [low, high] pair")
    return (v[0], v[1])


@dataclass
class Cylinder:
    """Finite cylinder: axis through ``center`` along ``axis``, ``extent`` in mm along the axis."""

    center: Tuple[float, float, float]
    radius: float
    extent: Tuple[float, float]
    axis: Tuple[float, float, float] = (0.0, 0.0, 1.0)

    def __post_init__(self):
        self.center = _vec(self.center, "center")
        self.axis = _vec(self.axis, "axis")
        self.extent = tuple(float(e) for e in _span(self.extent, "extent"))
        norm = math.sqrt(sum(a * a for a in self.axis))
        if norm == 0:
            raise PhantomSpecError("cylinder axis must be non-zero")
        self.axis = tuple(a / norm for a in self.axis)
        if not self.radius > 0:
            raise PhantomSpecError(f"cylinder radius must be > 0, got {self.radius}")
        if self.extent[0] > self.extent[1]:
            raise PhantomSpecError(f"cylinder extent {self.extent} is reversed")

    def endpoints(self):
        c, a = np.array(self.center), np.array(self.axis)
        return c + self.extent[0] * a, c + self.extent[1] * a


@dataclass
class Vessel(Cylinder):
    lumen_hu: float = 300.0


@dataclass
class Calcification:
    """Partial annular shell around a vessel axis over a slice span."""

    vessel: int
    slices: Tuple[int, int]
    shell_mm: Tuple[float, float]
    angles_deg: Tuple[float, float] = (0.0, 360.0)
    calc_hu: float = 1000.0

    def __post_init__(self):
        self.slices = tuple(int(s) for s in _span(self.slices, "slices"))
        self.shell_mm = tuple(float(r) for r in _span(self.shell_mm, "shell_mm"))
        self.angles_deg = tuple(float(a) for a in _span(self.angles_deg, "angles_deg"))
        r_in, r_out = self.shell_mm
        if r_in < 0 or not r_in < r_out:
            raise PhantomSpecError(f"shell needs 0 <= r_inner < r_outer, got {self.shell_mm}")
        a0, a1 = self.angles_deg
        if not 0 < a1 - a0 <= 360:
            raise PhantomSpecError(f"angular span {self.angles_deg} must cover (0, 360] degrees")


@dataclass
class Bone:
    """``shape`` is ``"cylinder"`` (center/radius/extent/axis) or ``"box"`` (min/max corners in mm)."""

    shape: str
    hu: float = 1000.0
    center: Optional[Sequence[float]] = None
    radius: Optional[float] = None
    extent: Optional[Sequence[float]] = None
    axis: Sequence[float] = (0.0, 0.0, 1.0)
    min: Optional[Sequence[float]] = None
    max: Optional[Sequence[float]] = None

    def __post_init__(self):
        if self.shape == "cylinder":
            self._cyl = Cylinder(self.center, self.radius, self.extent, self.axis)
        elif self.shape == "box":
            if self.min is None or self.max is None:
                raise PhantomSpecError("box bone needs min and max corners")
            self.min, self.max = _vec(self.min, "min"), _vec(self.max, "max")
            if any(lo > hi for lo, hi in zip(self.min, self.max)):
                raise PhantomSpecError(f"box corners reversed: {self.min} {self.max}")
        else:
            raise PhantomSpecError(f"unknown bone shape {self.shape!r}")


@dataclass
class Artifact:
    """One of three failure-mode artifacts.

    ``screw``: a high-HU rod (center/radius/extent/axis/hu) plus an optional
    streak band ``{"slices": [k0, k1], "half_width_mm": w, "hu": h}``, a slab
    of rows within ``w`` mm (in y) of the rod centre over those slices.
    ``stent``: a high-HU full annulus ``shell_mm`` around ``vessel`` over ``slices``.
    ``contrast_dropout``: lumen of ``vessel`` over ``slices`` takes ``blood_hu``.
    """

    type: str
    hu: float = 3000.0
    vessel: Optional[int] = None
    slices: Optional[Sequence[int]] = None
    shell_mm: Optional[Sequence[float]] = None
    blood_hu: float = 40.0
    center: Optional[Sequence[float]] = None
    radius: Optional[float] = None
    extent: Optional[Sequence[float]] = None
    axis: Sequence[float] = (0.0, 0.0, 1.0)
    streak: Optional[dict] = None

    def __post_init__(self):
        if self.type == "screw":
            self._cyl = Cylinder(self.center, self.radius, self.extent, self.axis)
            if self.streak is not None:
                s = self.streak
                if "slices" not in s or "half_width_mm" not in s:
                    raise PhantomSpecError("streak needs slices and half_width_mm")
                if not s["half_width_mm"] > 0:
                    raise PhantomSpecError("streak half_width_mm must be > 0")
        elif self.type in ("stent", "contrast_dropout"):
            if self.vessel is None or self.slices is None:
                raise PhantomSpecError(f"{self.type} needs vessel and slices")
            self.slices = tuple(int(s) for s in _span(self.slices, "slices"))
            if self.type == "stent":
                if self.shell_mm is None:
                    raise PhantomSpecError("stent needs shell_mm")
                self.shell_mm = tuple(float(r) for r in _span(self.shell_mm, "shell_mm"))
                if self.shell_mm[0] < 0 or not self.shell_mm[0] < self.shell_mm[1]:
                    raise PhantomSpecError(f"stent shell needs 0 <= r_inner < r_outer, got {self.shell_mm}")
        else:
            raise PhantomSpecError(f"unknown artifact type {self.type!r}")


@dataclass
class PhantomSpec:
    dims: Tuple[int, int, int]
    spacing: Tuple[float, float, float]
    background_hu: float = -100.0
    vessels: List[Vessel] = field(default_factory=list)
    calcifications: List[Calcification] = field(default_factory=list)
    bones: List[Bone] = field(default_factory=list)
    artifacts: List[Artifact] = field(default_factory=list)
    noise_sigma: float = 0.0
    rng_seed: int = 0

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        if len(self.dims) != 3 or min(self.dims) < 1:
            raise PhantomSpecError(f"dims must be three integers >= 1, got {self.dims}")
        try:
            self.voxel_spacing = VoxelSpacing(*self.spacing)
        except (TypeError, ValueError) as exc:
            raise PhantomSpecError(f"bad spacing: {exc}") from None
        self.spacing = self.voxel_spacing.as_tuple()
        self.vessels = [v if isinstance(v, Vessel) else Vessel(**v) for v in self.vessels]
        self.calcifications = [
            c if isinstance(c, Calcification) else Calcification(**c) for c in self.calcifications
        ]
        self.bones = [b if isinstance(b, Bone) else Bone(**b) for b in self.bones]
        self.artifacts = [a if isinstance(a, Artifact) else Artifact(**a) for a in self.artifacts]
        if self.noise_sigma < 0:
            raise PhantomSpecError("noise_sigma must be >= 0")
        self._check_bounds()

    # -- validation ------------------------------------------------------

    def _upper(self) -> np.ndarray:
        return np.array([(n - 1) * s for n, s in zip(self.dims, self.spacing)])

    def _inside(self, p) -> bool:
        p = np.asarray(p, dtype=float)
        return bool(np.all(p >= -_EPS) and np.all(p <= self._upper() + _EPS))

    def _check_slices(self, span, what) -> None:
        k0, k1 = span
        if not 0 <= k0 <= k1 < self.dims[2]:
            raise PhantomSpecError(f"{what}: slice span {span} outside 0..{self.dims[2] - 1}")

    def _check_vessel_ref(self, idx, what) -> None:
        if not 0 <= idx < len(self.vessels):
            raise PhantomSpecError(f"{what}: no vessel {idx}")

    def _check_cyl(self, cyl: Cylinder, what) -> None:
        for p in cyl.endpoints():
            if not self._inside(p):
                raise PhantomSpecError(f"{what}: axis endpoint {tuple(p)} outside the volume")

    def _check_bounds(self) -> None:
        for i, v in enumerate(self.vessels):
            self._check_cyl(v, f"vessel {i}")
        for i, c in enumerate(self.calcifications):
            self._check_vessel_ref(c.vessel, f"calcification {i}")
            self._check_slices(c.slices, f"calcification {i}")
        for i, b in enumerate(self.bones):
            if b.shape == "cylinder":
                self._check_cyl(b._cyl, f"bone {i}")
            elif not (self._inside(b.min) and self._inside(b.max)):
                raise PhantomSpecError(f"bone {i}: box outside the volume")
        for i, a in enumerate(self.artifacts):
            if a.type == "screw":
                self._check_cyl(a._cyl, f"artifact {i}")
                if a.streak is not None:
                    self._check_slices(tuple(a.streak["slices"]), f"artifact {i} streak")
            else:
                self._check_vessel_ref(a.vessel, f"artifact {i}")
                self._check_slices(a.slices, f"artifact {i}")

    # -- (de)serialisation -------------------------------------------------

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomSpec":
        try:
            return cls(**d)
        except TypeError as exc:
            raise PhantomSpecError(str(exc)) from None

    def to_dict(self) -> dict:
        def clean(obj):
            return {k: v for k, v in asdict(obj).items() if v is not None and not k.startswith("_")}

        return {
            "dims": list(self.dims),
            "spacing": list(self.spacing),
            "background_hu": self.background_hu,
            "vessels": [clean(v) for v in self.vessels],
            "calcifications": [clean(c) for c in self.calcifications],
            "bones": [clean(b) for b in self.bones],
            "artifacts": [clean(a) for a in self.artifacts],
            "noise_sigma": self.noise_sigma,
            "rng_seed": self.rng_seed,
        }


def load_spec(path: PathLike) -> PhantomSpec:
    with open(path, encoding="utf-8") as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise PhantomSpecError(f"{path}: {exc}") from None
    return PhantomSpec.from_dict(data)


def example_spec() -> PhantomSpec:
    """The bundled demonstration phantom."""
    text = resources.files("calcscore").joinpath("data/example_phantom.json").read_text()
    return PhantomSpec.from_dict(json.loads(text))


# --------------------------------------------------------------------------
# rasterisation


class _Grid:
    def __init__(self, spec: PhantomSpec):
        nx, ny, nz = spec.dims
        sx, sy, sz = spec.spacing
        self.shape = (nz, ny, nx)
        self.x = (np.arange(nx) * sx)[None, None, :]
        self.y = (np.arange(ny) * sy)[None, :, None]
        self.z = (np.arange(nz) * sz)[:, None, None]
        self.k = np.arange(nz)[:, None, None]

    def slab(self, span) -> np.ndarray:
        k0, k1 = span
        return (self.k >= k0) & (self.k <= k1)

    def radial(self, cyl: Cylinder):
        """Axial coordinate t, perpendicular offset vector and its squared length."""
        cx, cy, cz = cyl.center
        ax, ay, az = cyl.axis
        dx, dy, dz = self.x - cx, self.y - cy, self.z - cz
        t = dx * ax + dy * ay + dz * az
        px, py, pz = dx - t * ax, dy - t * ay, dz - t * az
        return t, (px, py, pz), px * px + py * py + pz * pz

    def cylinder(self, cyl: Cylinder) -> np.ndarray:
        t, _, r2 = self.radial(cyl)
        t0, t1 = cyl.extent
        return np.broadcast_to((r2 <= cyl.radius ** 2) & (t >= t0) & (t <= t1), self.shape)

    def shell(self, cyl: Cylinder, shell_mm, angles_deg, span) -> np.ndarray:
        _, (px, py, pz), r2 = self.radial(cyl)
        r_in, r_out = shell_mm
        inside = (r2 >= r_in ** 2) & (r2 <= r_out ** 2)
        a0, a1 = angles_deg
        if a1 - a0 < 360:
            u, v = _frame(cyl.axis)
            ang = np.degrees(np.arctan2(px * v[0] + py * v[1] + pz * v[2],
                                        px * u[0] + py * u[1] + pz * u[2]))
            inside = inside & (np.mod(ang - a0, 360.0) <= a1 - a0)
        return np.broadcast_to(inside & self.slab(span), self.shape)

    def box(self, lo, hi) -> np.ndarray:
        m = ((self.x >= lo[0]) & (self.x <= hi[0]) & (self.y >= lo[1]) & (self.y <= hi[1])
             & (self.z >= lo[2]) & (self.z <= hi[2]))
        return np.broadcast_to(m, self.shape)


def _frame(axis) -> Tuple[np.ndarray, np.ndarray]:
    """Orthonormal (u, v) perpendicular to ``axis``; u is x-hat for a z axis."""
    a = np.asarray(axis, dtype=float)
    helper = np.array([1.0, 0.0, 0.0]) if abs(a[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    u = helper - (helper @ a) * a
    u /= np.linalg.norm(u)
    return u, np.cross(a, u)


def generate(spec: PhantomSpec) -> Tuple[CtVolume, MaskVolume, MaskVolume]:
    """Rasterise ``spec`` into ``(ct, vessel_mask, calcium_mask)``."""
    g = _Grid(spec)
    hu = np.full(g.shape, float(spec.background_hu))
    for b in spec.bones:
        m = g.cylinder(b._cyl) if b.shape == "cylinder" else g.box(b.min, b.max)
        hu[m] = b.hu

    lumens = [g.cylinder(v) for v in spec.vessels]
    vessel = np.zeros(g.shape, dtype=bool)
    for v, m in zip(spec.vessels, lumens):
        hu[m] = v.lumen_hu
        vessel |= m
    for a in spec.artifacts:
        if a.type == "contrast_dropout":
            m = lumens[a.vessel] & g.slab(a.slices)
            hu[m] = a.blood_hu

    calcium = np.zeros(g.shape, dtype=bool)
    for c in spec.calcifications:
        m = g.shell(spec.vessels[c.vessel], c.shell_mm, c.angles_deg, c.slices)
        hu[m] = c.calc_hu
        calcium |= m
    vessel |= calcium

    for a in spec.artifacts:
        if a.type == "screw":
            hu[g.cylinder(a._cyl)] = a.hu
            if a.streak is not None:
                cy = a._cyl.center[1]
                w = float(a.streak["half_width_mm"])
                band = (np.abs(g.y - cy) <= w) & g.slab(tuple(a.streak["slices"]))
                hu[np.broadcast_to(band, g.shape)] = a.streak.get("hu", a.hu)
        elif a.type == "stent":
            hu[g.shell(spec.vessels[a.vessel], a.shell_mm, (0.0, 360.0), a.slices)] = a.hu

    if spec.noise_sigma > 0:
        rng = np.random.default_rng(spec.rng_seed)
        hu = hu + rng.normal(0.0, spec.noise_sigma, size=g.shape)
    hu = np.clip(round_half_away(hu), -32768, 32767).astype(np.int16)
    sp = spec.voxel_spacing
    return CtVolume(hu, sp), MaskVolume(vessel, sp), MaskVolume(calcium, sp)


def expected_calcium(
    spec: PhantomSpec,
    window="auto",
    threshold: int = DEFAULT_THRESHOLD,
    slice_range: Optional[SliceRange] = None,
) -> int:
    """Calcium-mask voxels in range whose windowed byte exceeds ``threshold``.

    Only defined for noise-free phantoms.
    """
    if spec.noise_sigma != 0:
        raise ValueError("expected_calcium needs a noise-free phantom (noise_sigma == 0)")
    vol, _, calcium = generate(spec)
    slice_range = slice_range or SliceRange.full(vol.nz)
    slice_range.validate(vol.nz)
    level, width = resolve_window(vol, window)
    above = threshold_calcium(window_to_byte(vol, level, width), threshold).bits
    sl = slice_range.as_slice()
    return int(np.count_nonzero(above[sl] & calcium.bits[sl]))


def tube_spec(
    dims=(32, 32, 24),
    spacing=(1.0, 1.0, 1.0),
    radius: float = 5.0,
    lumen_hu: float = 300.0,
    background_hu: float = 40.0,
    noise_sigma: float = 0.0,
    rng_seed: int = 0,
    **extra,
) -> PhantomSpec:
    """A single straight vessel along z through the middle of the volume."""
    nx, ny, nz = dims
    sx, sy, sz = spacing
    center = ((nx - 1) * sx / 2.0, (ny - 1) * sy / 2.0, 0.0)
    vessel = {"center": center, "radius": radius, "extent": (0.0, (nz - 1) * sz), "lumen_hu": lumen_hu}
    return PhantomSpec(
        dims=dims,
        spacing=spacing,
        background_hu=background_hu,
        vessels=[vessel],
        noise_sigma=noise_sigma,
        rng_seed=rng_seed,
        **extra,
    )
