import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from patchfas.errors import GeometryError
from patchfas.patchgeom import (AugmentationConfig, augment_view, crop_at_center, grid_patches,
                                inscribed_rect, rotated_crop, test_grid_centers, two_views,
                                valid_origins)
from patchfas.synthdata import generate_base_texture


def ramp(h, w, c=1):
    img = np.arange(h * w * c, dtype=np.float64).reshape(h, w, c)
    return img / img.max()


def test_identity_view():
    img = ramp(200, 220)
    cfg = AugmentationConfig(patch_size=64, rotation_range=0.0)
    v = augment_view(img, cfg, 0, flip=False, origin=(0, 0))
    assert np.array_equal(v.pixels, img[:64, :64])
    assert v.angle == 0.0 and not v.flipped


def test_flip_twice_is_identity():
    img = ramp(64, 64)
    cfg = AugmentationConfig(patch_size=64, rotation_range=0.0)
    once = augment_view(img, cfg, 0, flip=True, origin=(0, 0)).pixels
    twice = augment_view(once, cfg, 0, flip=True, origin=(0, 0)).pixels
    assert np.array_equal(once, img[:, ::-1])
    assert np.array_equal(twice, img)


def test_zero_rotation_equals_plain_crop():
    img = ramp(100, 120)
    assert np.array_equal(rotated_crop(img, 0.0, (7, 11), 40), img[11:51, 7:47])


def test_golden_view_480():
    img = generate_base_texture(480, 42)
    v = augment_view(img, AugmentationConfig(), 2024)
    assert v.pixels.shape == (160, 160, 1)
    assert (v.flipped, v.origin) == (False, (109, 107))
    assert v.angle == pytest.approx(-5.713535975234847, abs=1e-12)
    assert float(v.pixels.sum()) == pytest.approx(13647.676422133947, abs=1e-8)
    assert float(v.pixels[80, 80, 0]) == pytest.approx(0.6151384200305225, abs=1e-12)
    assert float(v.pixels[-1, -1, 0]) == pytest.approx(0.42711418429979653, abs=1e-12)
    assert np.allclose(v.pixels[0, :3, 0], [0.750380091485956, 0.7569430832914339, 0.7581914608769221],
                       atol=1e-12, rtol=0)
    again = augment_view(img, AugmentationConfig(), 2024)
    assert np.array_equal(again.pixels, v.pixels)


def test_two_views_exact_patch_image():
    img = ramp(32, 32)
    cfg = AugmentationConfig(patch_size=32, flip_probability=0.0, rotation_range=0.0)
    a, b = two_views(img, cfg, 3)
    assert np.array_equal(a.pixels, img) and np.array_equal(b.pixels, img)


def test_two_views_determinism_and_independence():
    img = generate_base_texture(480, 1)
    cfg = AugmentationConfig()
    a1, b1 = two_views(img, cfg, 9)
    a2, b2 = two_views(img, cfg, 9)
    assert np.array_equal(a1.pixels, a2.pixels) and np.array_equal(b1.pixels, b2.pixels)
    c, _ = two_views(img, cfg, 10)
    assert not np.array_equal(a1.pixels, c.pixels)


def test_two_views_differ_in_origin():
    # blank image: only the provenance is of interest here
    img = np.zeros((480, 480, 1))
    cfg = AugmentationConfig(rotation_range=0.0)
    same = sum(np.array_equal(*(v.origin for v in two_views(img, cfg, s))) for s in range(1000))
    assert same <= 2


def test_rotated_views_never_extrapolate():
    # a constant image stays constant only if every sample lands inside the source
    img = np.full((200, 200, 1), 0.7)
    cfg = AugmentationConfig(patch_size=160, rotation_range=10.0)
    for s in range(30):
        v = augment_view(img, cfg, s)
        assert v.pixels.shape == (160, 160, 1)
        assert np.allclose(v.pixels, 0.7, atol=1e-12)


def test_inscribed_rect_stays_inside():
    for angle in (-10, -3.3, 0.5, 7, 10, 30, 45):
        w, h = 300.0, 200.0
        rw, rh = inscribed_rect(w, h, angle)
        a = math.radians(angle)
        for sx in (-1, 1):
            for sy in (-1, 1):
                x, y = sx * rw / 2, sy * rh / 2
                u = math.cos(a) * x - math.sin(a) * y
                v = math.sin(a) * x + math.cos(a) * y
                assert abs(u) <= w / 2 + 1e-9 and abs(v) <= h / 2 + 1e-9
    assert inscribed_rect(300, 200, 0) == pytest.approx((300, 200))


def test_too_small_names_minimum():
    with pytest.raises(GeometryError, match=r"need at least \d+x\d+"):
        augment_view(np.zeros((170, 170, 1)), AugmentationConfig(), 0)


def test_forced_origin_validated():
    with pytest.raises(GeometryError):
        augment_view(ramp(100, 100), AugmentationConfig(64, 0.0, 0.0), 0, origin=(50, 0))


def test_grid_centers_examples():
    c = test_grid_centers(480, 480, 160, 3)
    assert len(c) == 9
    assert {x for x, _ in c} == {80, 240, 400} and {y for _, y in c} == {80, 240, 400}
    assert c[:3] == [(80, 80), (240, 80), (400, 80)]  # row-major
    assert test_grid_centers(160, 160, 160, 1) == [(80, 80)]
    c = test_grid_centers(320, 480, 160, 2)
    assert sorted({x for x, _ in c}) == [80, 240] and sorted({y for _, y in c}) == [80, 400]
    with pytest.raises(GeometryError):
        test_grid_centers(100, 480, 160, 3)


def test_grid_rounding_ties_down():
    # extent 161, size 160, a=2: centers 80 and 81 exactly; a=3: midpoint 80.5 -> 80
    assert [x for x, _ in test_grid_centers(161, 160, 160, 3)][:3] == [80, 80, 81]


def test_grid_tiles_480():
    img = ramp(480, 480)
    patches = grid_patches(img, 160, 3)
    rebuilt = np.zeros_like(img)
    for p in patches:
        x0, y0 = p.origin
        rebuilt[y0:y0 + 160, x0:x0 + 160] += p.pixels
    assert np.array_equal(rebuilt, img)  # exact tiling, zero overlap


def test_crop_at_center():
    img = ramp(100, 100)
    assert np.array_equal(crop_at_center(img, (16, 16), 32).pixels, img[:32, :32])
    with pytest.raises(GeometryError):
        crop_at_center(img, (16.5, 16), 32)
    with pytest.raises(GeometryError):
        crop_at_center(img, (10, 50), 32)


def test_pixel_range_validated():
    with pytest.raises(GeometryError):
        augment_view(np.full((64, 64), 1.5), AugmentationConfig(32, 0.0, 0.0), 0)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 300), st.integers(1, 300), st.integers(1, 200), st.integers(1, 5))
def test_grid_transpose_symmetry(w, h, size, a):
    if w < size or h < size:
        return
    c = test_grid_centers(w, h, size, a)
    t = test_grid_centers(h, w, size, a)
    assert sorted((y, x) for x, y in c) == sorted(t)
    assert len(c) == a * a
    for x, y in c:
        assert size / 2 - 0.5 <= x <= w - size / 2 + 0.5


@settings(max_examples=40, deadline=None)
@given(st.integers(40, 120), st.integers(40, 120), st.floats(-10, 10), st.integers(0, 2**31))
def test_views_square_and_bounded(w, h, angle, seed):
    size = 32
    x_lo, x_hi, y_lo, y_hi = valid_origins(w, h, size, angle)
    if x_lo > x_hi or y_lo > y_hi:
        return
    img = np.random.default_rng(seed).uniform(size=(h, w, 1))
    v = augment_view(img, AugmentationConfig(size, 0.5, 0.0), seed, angle=angle)
    assert v.pixels.shape == (size, size, 1)
    assert v.pixels.min() >= 0.0 and v.pixels.max() <= 1.0
