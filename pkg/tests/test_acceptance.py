"""Exit criteria for the package, one test per criterion.

Each test records a PASS/FAIL line shown in the pytest terminal summary under
"acceptance criteria".
"""
import math
import time

import numpy as np
import pytest

from calcscore.calc import SliceRange, filter_components_min_area, run_pipeline
from calcscore.metrics import (
    ape,
    bce,
    confusion,
    dice,
    iou,
    kfold_split,
    per_slice_dice_mean,
    r_squared,
    regression_fit,
)
from calcscore.phantom import PhantomSpec, expected_calcium, generate, tube_spec
from calcscore.seg import RegionGrowParams, region_grow
from calcscore.volio import (
    CtVolume,
    MaskVolume,
    load_mask,
    load_volume,
    save_mask,
    save_volume,
    window_lut,
)

from conftest import ACCEPTANCE_LINES


def record(n, name, ok, detail=""):
    ACCEPTANCE_LINES.append(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {name}  {detail}".rstrip())
    return ok


# 1 -------------------------------------------------------------------------


def test_01_metric_oracle_equivalence():
    rng = np.random.default_rng(101)
    t0 = time.perf_counter()
    exact = True
    worst_identity = 0.0
    for _ in range(1000):
        shape = (int(rng.integers(1, 5)), int(rng.integers(1, 9)), int(rng.integers(1, 9)))
        a = rng.random(shape) < rng.random()
        b = rng.random(shape) < rng.random()
        sa = set(np.flatnonzero(a).tolist())
        sb = set(np.flatnonzero(b).tolist())
        c = confusion(MaskVolume(a, (1, 1, 1)), MaskVolume(b, (1, 1, 1)))
        union = sa | sb
        set_iou = 1.0 if not union else len(sa & sb) / len(union)
        set_dice = 1.0 if not union else 2 * len(sa & sb) / (len(sa) + len(sb))
        exact &= iou(c) == set_iou and dice(c) == set_dice
        if union:
            j = iou(c)
            worst_identity = max(worst_identity, abs(dice(c) - 2 * j / (1 + j)))
    elapsed = time.perf_counter() - t0
    ok = exact and worst_identity <= 1e-12 and elapsed < 10
    record(1, "metric oracle equivalence", ok,
           f"(1000 pairs, exact={exact}, max identity err={worst_identity:.1e}, {elapsed:.2f}s)")
    assert ok


# 2 -------------------------------------------------------------------------


def test_02_formula_spot_checks():
    a = ape(7892, 7707)
    b = bce([1], [0.5])
    r2 = r_squared([1, 2, 3], [1.1, 1.9, 3.2])
    ok = abs(a - 2.344) <= 0.001 and abs(b - math.log(2)) <= 1e-9 and abs(r2 - 0.97) <= 1e-9
    # 2.04 is the figure reported alongside these inputs; the formula itself gives 2.344
    record(2, "formula spot checks", ok,
           f"(ape={a:.4f} vs reported 2.04, bce={b:.12f}, r2={r2:.12f})")
    assert ok


# 3 -------------------------------------------------------------------------


def _random_phantom(rng):
    """Noise-free phantom whose lumen windows at or below the threshold and calcium above it."""
    while True:
        nx, ny, nz = (int(v) for v in rng.integers(24, 41, size=3))
        sx = float(rng.uniform(0.5, 1.0))
        sy = float(rng.uniform(0.5, 1.0))
        sz = float(rng.uniform(0.7, 2.0))
        threshold = int(rng.integers(100, 200))
        if rng.random() < 0.4:
            window = "auto"
        else:
            window = (float(rng.uniform(300, 800)), float(rng.uniform(1200, 3000)))
        cx, cy = (nx - 1) * sx / 2, (ny - 1) * sy / 2
        r = float(rng.uniform(3.0, min(cx, cy) * 0.5))
        calcs = []
        for _ in range(int(rng.integers(1, 4))):
            k0 = int(rng.integers(0, nz - 2))
            k1 = int(rng.integers(k0, nz))
            r_in = float(rng.uniform(0.5 * r, r))
            a0 = float(rng.uniform(0, 360))
            calcs.append({
                "vessel": 0, "slices": [k0, k1], "shell_mm": [r_in, r_in + float(rng.uniform(0.8, 2.0))],
                "angles_deg": [a0, a0 + float(rng.uniform(20, 360))], "calc_hu": float(rng.integers(900, 2000)),
            })
        spec = PhantomSpec(
            (nx, ny, nz), (sx, sy, sz), background_hu=float(rng.integers(-150, 0)),
            vessels=[{"center": [cx, cy, 0.0], "radius": r, "extent": [0.0, (nz - 1) * sz],
                      "lumen_hu": float(rng.integers(150, 300))}],
            calcifications=calcs,
            bones=[{"shape": "box", "min": [0, 0, 0], "max": [2 * sx, 2 * sy, (nz - 1) * sz], "hu": 1300}],
        )
        vol, vessel, calcium = generate(spec)
        if window == "auto":
            lo, hi = int(vol.voxels.min()), int(vol.voxels.max())
            level, width = (lo + hi) / 2, hi - lo
        else:
            level, width = window
        lut = window_lut(level, width)
        lumen_byte = lut[np.int16(spec.vessels[0].lumen_hu).view(np.uint16)]
        calc_bytes = [lut[np.int16(c.calc_hu).view(np.uint16)] for c in spec.calcifications]
        if lumen_byte <= threshold and min(calc_bytes) > threshold and calcium.count > 0:
            k0 = int(rng.integers(0, nz))
            k1 = int(rng.integers(k0, nz))
            return spec, vol, vessel, calcium, window, threshold, SliceRange(k0, k1)


def test_03_pipeline_exactness():
    rng = np.random.default_rng(303)
    failures = []
    nonzero = 0
    for i in range(24):
        spec, vol, vessel, calcium, window, threshold, rng_ = _random_phantom(rng)
        rep = run_pipeline(vol, vessel, window, threshold, None, rng_)
        want = expected_calcium(spec, window, threshold, rng_)
        # every calcium voxel windows above threshold, so the geometric count must agree
        geometric = int(np.count_nonzero(calcium.bits[rng_.as_slice()]))
        vv = vol.spacing.sx * vol.spacing.sy * vol.spacing.sz
        vol_ok = abs(rep.total_volume_mm3 - rep.total_count * vv) <= 1e-9 * max(1.0, rep.total_count * vv)
        if rep.total_count != want or want != geometric or not vol_ok:
            failures.append((i, rep.total_count, want, geometric))
        nonzero += want > 0
    ok = not failures and nonzero >= 10
    record(3, "pipeline exactness", ok, f"(24 specs, {nonzero} with calcium in range, failures={failures})")
    assert ok


# 4 -------------------------------------------------------------------------


def test_04_threshold_strictness():
    # level 127.5, width 255 maps hu 0..255 onto bytes 0..255 unchanged
    spec = PhantomSpec(
        (24, 24, 10), (0.7, 0.7, 1.0), background_hu=0,
        vessels=[{"center": [8.05, 8.05, 0.0], "radius": 4.0, "extent": [0.0, 9.0], "lumen_hu": 100}],
        calcifications=[{"vessel": 0, "slices": [2, 7], "shell_mm": [3.0, 5.0], "angles_deg": [0, 200],
                         "calc_hu": 145}],
    )
    vol, vessel, calcium = generate(spec)
    at145 = run_pipeline(vol, vessel, (127.5, 255.0), 145).total_count
    at144 = run_pipeline(vol, vessel, (127.5, 255.0), 144).total_count
    ok = at145 == 0 and at144 > 0 and at144 == calcium.count
    record(4, "threshold strictness", ok, f"(t=145 -> {at145}, t=144 -> {at144})")
    assert ok


# 5 -------------------------------------------------------------------------


def test_05_agatston_area_filter():
    bits = np.zeros((1, 8, 8), bool)
    bits[0, 1, 1] = True  # 0.49 mm^2
    bits[0, 5, 2:5] = True  # 1.47 mm^2
    out = filter_components_min_area(MaskVolume(bits, (0.7, 0.7, 1.0)), 1.0).bits
    ok = not out[0, 1, 1] and out[0, 5, 2:5].all() and out.sum() == 3
    record(5, "Agatston min-area filter", ok, "(0.49 mm^2 removed, 1.47 mm^2 kept)")
    assert ok


# 6 -------------------------------------------------------------------------


def test_06_region_growing_tube():
    dims, radius = (40, 40, 30), 7.0
    _, truth, _ = generate(tube_spec(dims=dims, radius=radius))
    clean, _, _ = generate(tube_spec(dims=dims, radius=radius))
    seed = [(19, 19, 0)]
    exact = region_grow(clean, RegionGrowParams(seed, 200, 400)) == truth
    noisy, _, _ = generate(tube_spec(dims=dims, radius=radius, noise_sigma=20.0, rng_seed=606))
    grown = region_grow(noisy, RegionGrowParams(seed, 200, 400))
    d = per_slice_dice_mean(grown, truth)
    ok = exact and d >= 0.95
    record(6, "region growing on tube phantom", ok, f"(noise-free exact={exact}, sigma=20 per-slice Dice={d:.4f})")
    assert ok


# 7 -------------------------------------------------------------------------


def test_07_contrast_dropout_failure_mode():
    spec = PhantomSpec(
        (32, 32, 48), (0.8, 0.8, 1.0), background_hu=-80,
        vessels=[{"center": [12.4, 12.4, 0.0], "radius": 5.0, "extent": [0.0, 47.0], "lumen_hu": 300}],
        calcifications=[
            {"vessel": 0, "slices": [4, 12], "shell_mm": [4.0, 6.0], "angles_deg": [0, 140], "calc_hu": 1100},
            {"vessel": 0, "slices": [32, 44], "shell_mm": [4.0, 6.0], "angles_deg": [200, 330], "calc_hu": 1100},
        ],
        artifacts=[{"type": "contrast_dropout", "vessel": 0, "slices": [18, 26], "blood_hu": 40}],
    )
    vol, _, _ = generate(spec)
    grown = region_grow(vol, RegionGrowParams([(15, 15, 0)], 200, 2000))
    in_span = int(np.count_nonzero(grown.bits[18:27]))
    auto = run_pipeline(vol, grown).total_count
    full = expected_calcium(spec)
    ok = in_span == 0 and auto < full
    record(7, "contrast-dropout failure mode", ok, f"(grown in dropout span={in_span}, score {auto} < analytic {full})")
    assert ok


# 8 -------------------------------------------------------------------------


def test_08_kfold():
    sizes = kfold_split([f"patient{i}" for i in range(11)], 4, seed=0).test_sizes
    rng = np.random.default_rng(808)
    bad = 0
    for _ in range(100):
        n = int(rng.integers(2, 60))
        k = int(rng.integers(2, n + 1))
        ids = list(range(n))
        plan = kfold_split(ids, k, seed=int(rng.integers(1 << 30)))
        tests = [set(t) for _, t in plan.folds]
        disjoint = sum(map(len, tests)) == len(set().union(*tests))
        covers = set().union(*tests) == set(ids)
        trains = all(set(tr) == set(ids) - set(te) for tr, te in plan.folds)
        spread = max(plan.test_sizes) - min(plan.test_sizes) <= 1
        bad += not (disjoint and covers and trains and spread and len(plan.folds) == k)
    ok = sizes == [3, 3, 3, 2] and bad == 0
    record(8, "k-fold planner", ok, f"(11 ids/k=4 -> {sizes}, invariant failures {bad}/100)")
    assert ok


# 9 -------------------------------------------------------------------------


def test_09_regression_recovery():
    rng = np.random.default_rng(909)
    x = rng.uniform(500, 15000, 16)
    y = 0.9 * x + 400 + rng.normal(0, 10.0, 16)
    fit = regression_fit(x, y)
    line = regression_fit(x, 0.9 * x + 400)
    ok = abs(fit.slope - 0.9) <= 0.02 and abs(fit.intercept - 400) <= 0.05 * 400 and abs(line.r_squared - 1) <= 1e-9
    record(9, "regression recovery", ok,
           f"(slope={fit.slope:.4f}, intercept={fit.intercept:.2f}, exact-line r2={line.r_squared:.12f})")
    assert ok


# 10 ------------------------------------------------------------------------


def _disk(ny, nx, cy, cx, r):
    j, i = np.ogrid[:ny, :nx]
    return (j - cy) ** 2 + (i - cx) ** 2 <= r * r


@pytest.mark.slow
def test_10_performance_512x512x600():
    nz, ny, nx = 600, 512, 512
    rng = np.random.default_rng(1010)
    vox = rng.integers(-120, 120, size=(nz, ny, nx), dtype=np.int16)
    vessel2d = np.zeros((ny, nx), bool)
    for cy, cx, r in [(250, 256, 14), (300, 200, 9), (300, 312, 9), (360, 180, 6), (360, 332, 6)]:
        vessel2d |= _disk(ny, nx, cy, cx, r)
    mask = np.broadcast_to(vessel2d, (nz, ny, nx)).copy()
    vox[mask] += 350
    bone2d = _disk(ny, nx, 380, 256, 30)
    vox[:, bone2d] += 1100
    hot = mask & (rng.random((nz, ny, nx), dtype=np.float32) < 0.05)
    vox[hot] += 900
    del hot
    vol = CtVolume(vox, (0.7, 0.7, 1.0))
    vessel = MaskVolume(mask, vol.spacing)
    del vox, mask
    t0 = time.perf_counter()
    rep = run_pipeline(vol, vessel, "auto", 145, 1.0, SliceRange(0, nz - 1))
    elapsed = time.perf_counter() - t0
    ok = elapsed < 5.0 and rep.total_count > 0
    record(10, "performance 512x512x600", ok, f"({elapsed:.2f}s, total_count={rep.total_count})")
    assert ok


# 11 ------------------------------------------------------------------------


def test_11_roundtrip(tmp_path):
    rng = np.random.default_rng(1111)
    bad = 0
    for i in range(100):
        shape = tuple(int(v) for v in rng.integers(1, 12, size=3))
        spacing = tuple(float(v) for v in rng.uniform(0.05, 5.0, size=3))
        vol = CtVolume(rng.integers(-32768, 32768, size=shape, dtype=np.int16), spacing)
        mask = MaskVolume(rng.random(shape) < rng.random(), spacing)
        save_volume(vol, tmp_path / f"v{i}.ctv")
        save_mask(mask, tmp_path / f"m{i}.ctv")
        v2, m2 = load_volume(tmp_path / f"v{i}.ctv"), load_mask(tmp_path / f"m{i}.ctv")
        same = (
            v2.dims == vol.dims and v2.spacing == vol.spacing and v2.voxels.tobytes() == vol.voxels.tobytes()
            and m2.dims == mask.dims and m2.spacing == mask.spacing and m2.bits.tobytes() == mask.bits.tobytes()
        )
        bad += not same
    ok = bad == 0
    record(11, "bit-exact save/load round trip", ok, f"({100 - bad}/100 identical)")
    assert ok
