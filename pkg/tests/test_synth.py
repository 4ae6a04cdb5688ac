import numpy as np
import pytest

from fuse4d.core import InvalidInputError
from fuse4d.lift import fb_check
from fuse4d.metrics import mean_roughness
from fuse4d.synth import (
    NoiseSpec,
    SceneSpecError,
    SphereSceneSpec,
    add_noise,
    gen_falling_sphere,
    gen_textured_plane,
    ground_truth_flow,
    inject_outliers,
    full_sphere_spec,
    scaled_intrinsics,
    sphere_center_pixel,
)


def _sphere_residual(seq):
    gt = seq.ground_truth
    worst = 0.0
    for t, f in enumerate(seq):
        pts = f.cloud.points[f.cloud.valid]
        r = np.linalg.norm(pts - gt.centers[t], axis=1)
        worst = max(worst, float(np.abs(r - gt.radius_mm).max()))
    return worst


def test_center_pixel_depth(clean_sphere):
    spec = SphereSceneSpec()
    col, row = sphere_center_pixel(spec, 0)
    d = clean_sphere[0].depth
    k = clean_sphere.intrinsics
    # the center pixel's ray passes through the sphere center
    ray = np.array([(col - k.u0) / k.fx, (row - k.v0) / k.fy, 1.0])
    c = clean_sphere.ground_truth.centers[0]
    assert np.allclose(np.cross(ray, c), 0, atol=1e-9)
    expected = (np.linalg.norm(c) - spec.radius_mm) / np.linalg.norm(ray)
    assert d.values[int(row), int(col)] == pytest.approx(expected, abs=1e-9)
    if col == k.u0 and row == k.v0:
        assert d.values[int(row), int(col)] == pytest.approx(spec.center_depth_mm - spec.radius_mm)


def test_points_on_sphere(clean_sphere):
    assert _sphere_residual(clean_sphere) < 1e-6


def test_full_scale_sphere_on_surface():
    seq = gen_falling_sphere(full_sphere_spec(frames=2))
    assert seq.width == 600
    assert _sphere_residual(seq) < 1e-6
    # 140 mm ball at 1 m
    assert seq.ground_truth.radius_mm == 140.0


def test_fall_is_exact(clean_sphere):
    spec = SphereSceneSpec()
    c0 = sphere_center_pixel(spec, 0)
    c1 = sphere_center_pixel(spec, 1)
    assert (c1[0] - c0[0], c1[1] - c0[1]) == (0.0, spec.fall_px)
    f0, f1 = clean_sphere[0], clean_sphere[1]
    on = f0.depth.valid
    ys, xs = np.nonzero(on)
    ys2 = ys + 2
    keep = ys2 < clean_sphere.height
    keep[keep] &= f1.depth.valid[ys2[keep], xs[keep]]
    assert keep.mean() > 0.95
    # sphere texture is carried with the fall
    assert np.array_equal(f1.intensity.values[ys2[keep], xs[keep]], f0.intensity.values[ys[keep], xs[keep]])


def test_ground_truth_flow(clean_sphere):
    gt = ground_truth_flow(clean_sphere, 0, 1)
    on = clean_sphere[0].depth.valid
    assert np.all(gt.vectors[on] == [0, 2])
    assert np.all(gt.vectors[~on] == 0)
    back = ground_truth_flow(clean_sphere, 3, 1)
    assert np.all(back.vectors[clean_sphere[3].depth.valid] == [0, -4])


def test_ground_truth_flow_needs_sphere():
    with pytest.raises(InvalidInputError):
        ground_truth_flow(gen_textured_plane(32, frames=2), 0, 1)


def test_plane_exact():
    seq = gen_textured_plane(48, depth=300.0, frames=2)
    assert np.all(seq[0].cloud.points[..., 2] == 300.0)
    assert mean_roughness(seq[0].cloud) == 0.0
    assert seq.ground_truth.plane_depth == 300.0
    with pytest.raises(InvalidInputError):
        gen_textured_plane(16, depth=0)


def test_zero_noise_identity(clean_sphere):
    out = add_noise(clean_sphere, NoiseSpec())
    for a, b in zip(clean_sphere, out):
        assert np.array_equal(a.depth.values, b.depth.values)
        assert np.array_equal(a.intensity.values, b.intensity.values)


def test_noise_seeded(clean_sphere):
    a = add_noise(clean_sphere, NoiseSpec(0.2, 0.02, seed=4))
    b = add_noise(clean_sphere, NoiseSpec(0.2, 0.02, seed=4))
    c = add_noise(clean_sphere, NoiseSpec(0.2, 0.02, seed=5))
    assert all(np.array_equal(x.depth.values, y.depth.values) for x, y in zip(a, b))
    assert not np.array_equal(a[0].depth.values, c[0].depth.values)


def test_noise_level():
    seq = gen_textured_plane(128, depth=500.0, frames=8)
    noisy = add_noise(seq, NoiseSpec(0.2, seed=1))
    resid = np.concatenate([f.depth.values.ravel() - 500.0 for f in noisy])
    assert resid.size >= 1e5
    assert 0.195 <= resid.std() <= 0.205
    assert abs(resid.mean()) < 0.005


def test_intensity_noise_clipped(clean_sphere):
    noisy = add_noise(clean_sphere, NoiseSpec(0, 0.5, seed=2))
    v = noisy[0].intensity.values
    assert v.min() >= 0 and v.max() <= 1


def test_texture_correlated_noise():
    seq = gen_textured_plane(128, depth=500.0, frames=6)
    noisy = add_noise(seq, NoiseSpec(0.2, texture_correlated=True, seed=3))
    gy, gx = np.gradient(seq[0].intensity.values)
    g = np.hypot(gx, gy).ravel()
    mag = np.concatenate([np.abs(f.depth.values.ravel() - 500.0) for f in noisy])
    r = np.corrcoef(np.tile(g, len(noisy)), mag)[0, 1]
    assert r > 0.5


def test_depth_outliers_count(clean_sphere):
    noisy = add_noise(clean_sphere, NoiseSpec(outlier_fraction=0.1, seed=1))
    f0, n0 = clean_sphere[0], noisy[0]
    changed = (f0.depth.values != n0.depth.values).sum()
    assert changed == int(np.floor(0.1 * f0.depth.valid.sum()))


def test_inject_outliers(clean_sphere):
    gt = ground_truth_flow(clean_sphere, 0, 1)
    same, m0 = inject_outliers(gt, 0.0, 3)
    assert np.array_equal(same.vectors, gt.vectors) and not m0.any()
    bad, mask = inject_outliers(gt, 0.05, 3, seed=2)
    assert mask.sum() == int(np.floor(0.05 * gt.width * gt.height))
    delta = np.linalg.norm(bad.vectors - gt.vectors, axis=-1)
    assert np.all(delta[mask] >= 3) and np.all(delta[~mask] == 0)
    back = ground_truth_flow(clean_sphere, 1, 0)
    ok = fb_check(bad, back, 2.0)
    assert (~ok[mask]).mean() >= 0.95
    with pytest.raises(InvalidInputError):
        inject_outliers(gt, 1.5, 3)


def test_sphere_leaving_frame():
    with pytest.raises(SceneSpecError):
        gen_falling_sphere(SphereSceneSpec(frames=60))
    with pytest.raises(SceneSpecError):
        SphereSceneSpec(radius_mm=300, center_depth_mm=200)


def test_background_plane_option():
    seq = gen_falling_sphere(SphereSceneSpec(frames=2, background_depth_mm=400.0))
    assert seq[0].depth.valid.all()
    assert seq[0].depth.values[0, 0] == 400.0


def test_scaled_intrinsics():
    k = scaled_intrinsics(600)
    assert (k.fx, k.u0) == (1500.0, 299.5)
    assert scaled_intrinsics(128).fx == pytest.approx(320.0)
