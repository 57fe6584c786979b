import json
import os

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from lfrt import lightfield as lfm
from lfrt.errors import FormatError, RangeError, ShapeError
from lfrt.lightfield import LightField, PlenopticImage


def random_lf(rng, shape):
    return LightField(rng.uniform(0, 1, shape))


def test_lightfield_validation():
    with pytest.raises(ShapeError):
        LightField(np.zeros((3, 3, 3, 4)))
    with pytest.raises(ShapeError):
        LightField(np.zeros((3, 3, 2, 4, 4)))
    with pytest.raises(RangeError):
        LightField(np.full((1, 1, 3, 2, 2), np.nan))
    lf = LightField(np.zeros((1, 1, 1, 2, 2)), color_space='Y')
    assert lf.channels == 1


def test_to_sai_layout():
    # 2x2 views of 2x2 pixels; plenoptic pixel (macro 0,0 offset 1,0) is view (1,0) pixel (0,0)
    pixels = np.arange(16, dtype=np.float64).reshape(4, 4)
    lf = lfm.to_sai(PlenopticImage(pixels, (2, 2)))
    assert lf.shape == (2, 2, 1, 2, 2)
    assert lf.views[1, 0, 0, 0, 0] == pixels[1, 0]
    assert lf.views[0, 1, 0, 1, 1] == pixels[2, 3]


def test_pattern_round_trip(rng):
    for _ in range(100):
        u, v = rng.integers(1, 5, size=2)
        h, w = rng.integers(1, 6, size=2)
        c = 3 if rng.uniform() < 0.5 else 1
        pixels = rng.uniform(0, 1, (h * u, w * v, c) if c == 3 else (h * u, w * v))
        plenoptic = PlenopticImage(pixels, (u, v))
        back = lfm.to_plenoptic(lfm.to_sai(plenoptic))
        assert_array_equal(back.pixels, pixels)


def test_pattern_rejects_bad_grid():
    with pytest.raises(ShapeError):
        PlenopticImage(np.zeros((9, 8)), (2, 2))


def test_nine_by_nine_to_seven_by_seven(rng):
    plenoptic = PlenopticImage(rng.uniform(0, 1, (9 * 4, 9 * 5, 3)), (9, 9))
    lf = lfm.to_sai(plenoptic)
    cropped = lfm.central_crop_views(lf, 7)
    assert cropped.angular_dims == (7, 7)
    assert_array_equal(cropped.views, lf.views[1:8, 1:8])


def test_central_crop_edge_cases(rng):
    lf = random_lf(rng, (3, 3, 3, 4, 4))
    assert_array_equal(lfm.central_crop_views(lf, 3).views, lf.views)
    assert_array_equal(lfm.central_crop_views(lf, 1).views[0, 0], lf.views[1, 1])
    with pytest.raises(RangeError):
        lfm.central_crop_views(lf, 5)
    with pytest.raises(ShapeError):
        lfm.central_crop_views(lf, 2)


def test_downsample_half():
    lf = LightField(np.full((2, 2, 3, 16, 16), 0.5))
    half = lfm.downsample_half(lf)
    assert half.shape == (2, 2, 3, 8, 8)
    assert_allclose(half.views, 0.5, atol=1e-15)

    impulse = np.zeros((1, 1, 1, 16, 16))
    impulse[0, 0, 0, 8, 8] = 1.0
    out = lfm.downsample_half(LightField(impulse, color_space='Y')).views[0, 0, 0]
    k = lfm.ANTIALIAS_KERNEL
    expected = np.zeros((8, 8))
    # kept samples 6, 8, 10 hold kernel taps 4, 2, 0 (symmetric)
    for i, y in enumerate((3, 4, 5)):
        for j, x in enumerate((3, 4, 5)):
            expected[y, x] = k[2 * i] * k[2 * j]
    assert_allclose(out, expected, atol=1e-15)

    with pytest.raises(ShapeError):
        lfm.downsample_half(LightField(np.zeros((1, 1, 3, 5, 4))))


def test_upsample2x():
    lf = LightField(np.full((1, 1, 3, 4, 6), 0.25))
    up = lfm.upsample2x(lf)
    assert up.shape == (1, 1, 3, 8, 12)
    assert_allclose(up.views, 0.25)

    ramp = np.zeros((1, 1, 1, 1, 3))
    ramp[..., :] = [0.0, 1.0, 2.0]
    out = lfm.upsample2x(LightField(ramp, color_space='Y')).views[0, 0, 0, 0]
    assert_allclose(out, [0.0, 0.25, 0.75, 1.25, 1.75, 2.0])


def test_highfreq_target():
    assert_allclose(lfm.highfreq_target(LightField(np.full((1, 1, 3, 8, 8), 0.3))).views, 0.0, atol=1e-15)

    impulse = np.zeros((1, 1, 1, 11, 11))
    impulse[0, 0, 0, 5, 5] = 1.0
    out = lfm.highfreq_target(LightField(impulse, color_space='Y')).views[0, 0, 0]
    k = lfm.HIGHFREQ_KERNEL
    expected = -np.outer(k, k)
    expected[2, 2] += 1.0
    assert_allclose(out[3:8, 3:8], expected, atol=1e-15)

    ramp = np.broadcast_to(np.linspace(0, 1, 16), (1, 1, 1, 16, 16)).copy()
    out = lfm.highfreq_target(LightField(ramp, color_space='Y')).views[0, 0, 0]
    assert_allclose(out[2:-2, 2:-2], 0.0, atol=1e-14)


def test_pyramid_shapes(scene):
    levels = lfm.pyramid(scene)
    assert [lf.spatial_dims for lf in levels] == [(64, 64), (32, 32), (16, 16)]


def test_extract_epi():
    rng = np.random.default_rng(3)
    base = rng.uniform(0, 1, (3, 8, 12))
    views = np.empty((5, 5, 3, 8, 12))
    for a in range(5):
        for b in range(5):
            views[a, b] = np.roll(base, b, axis=2)
    lf = LightField(views)
    epi = lfm.extract_epi(lf, 'horizontal', 2, 4)
    assert epi.values.shape == (3, 5, 12)
    # a one-pixel shift per view traces lines of slope 1
    for b in range(1, 5):
        assert_array_equal(epi.values[:, b], np.roll(epi.values[:, b - 1], 1, axis=1))

    same = LightField(np.broadcast_to(base, (5, 5, 3, 8, 12)).copy())
    vertical = lfm.extract_epi(same, 'vertical', 0, 3)
    assert vertical.values.shape == (3, 5, 8)
    assert_array_equal(vertical.values, np.broadcast_to(vertical.values[:, :1], vertical.values.shape))
    with pytest.raises(ShapeError):
        lfm.extract_epi(lf, 'horizontal', 5, 0)


def test_sai_mosaic(rng):
    lf = random_lf(rng, (2, 3, 3, 4, 5))
    mosaic = lfm.sai_mosaic(lf)
    assert mosaic.shape == (8, 15, 3)
    assert_array_equal(mosaic[4:8, 10:15], lf.views[1, 2].transpose(1, 2, 0))


def test_luma():
    rgb = np.zeros((3, 2, 2))
    rgb[1] = 1.0
    assert_allclose(lfm.luma(rgb), 0.587)


def test_random_crop(rng, scene):
    crop = lfm.random_crop(scene, 32, rng)
    assert crop.spatial_dims == (32, 32)
    with pytest.raises(RangeError):
        lfm.random_crop(scene, 128, rng)


def test_pfm_round_trip(tmp_path, rng):
    array = rng.uniform(0, 1, (5, 7, 3)).astype(np.float32).astype(np.float64)
    filename = str(tmp_path / 'x.pfm')
    lfm.write_pfm(filename, array)
    assert_array_equal(lfm.read_pfm(filename), array)
    with open(filename, 'wb') as outfile:
        outfile.write(b'P6\n1 1\n255\n')
    with pytest.raises(FormatError):
        lfm.read_pfm(filename)


def test_lightfield_directory(tmp_path, rng):
    lf = LightField(np.round(rng.uniform(0, 1, (2, 2, 3, 6, 5)) * 65535) / 65535)
    path = str(tmp_path / 'scene')
    lfm.write_lightfield(lf, path, fmt='png')
    with open(os.path.join(path, 'meta.json')) as infile:
        assert json.load(infile)['angular_dims'] == [2, 2]
    back = lfm.read_lightfield(path)
    assert_allclose(back.views, lf.views, atol=1e-12)

    lfm.write_lightfield(lf, str(tmp_path / 'scene_pfm'), fmt='pfm')
    assert_allclose(lfm.read_lightfield(str(tmp_path / 'scene_pfm')).views, lf.views, atol=1e-7)

    os.remove(os.path.join(path, 'view_1_1.png'))
    with pytest.raises(FormatError):
        lfm.read_lightfield(path)
