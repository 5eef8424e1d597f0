import math

import numpy as np
import pytest

from lidarflow.errors import FormatError
from lidarflow.projection import (
    DEFAULT_PROJECTION,
    Point,
    ProjectionConfig,
    RangeImage,
    normalize,
    pixel_coordinates,
    project_cloud,
    read_rimg,
    write_rimg,
)


def test_forward_point_lands_mid_image():
    img = project_cloud([Point(1.0, 0.0, 0.0)])
    v, u = np.argwhere(img.ranges > 0)[0]
    assert (u, v) == (512, 6)
    assert img.ranges[6, 512] == 1.0


def test_point_on_upper_fov_edge_is_top_row():
    p = (math.cos(math.radians(3)), 0.0, math.sin(math.radians(3)))
    u, v, _, keep = pixel_coordinates([p])
    assert keep[0] and v[0] == 0


def test_left_point_column():
    u, v, _, keep = pixel_coordinates([Point(0.0, 1.0, 0.0)])
    assert keep[0] and u[0] == 256


def test_empty_cloud_gives_empty_image():
    img = project_cloud([])
    assert img.shape == (64, 1024) and not img.ranges.any()


def test_out_of_fov_and_range_points_are_dropped():
    high = (1.0, 0.0, math.tan(math.radians(10)))
    far = (100.0, 0.0, 0.0)
    assert not project_cloud([high, far]).ranges.any()


def test_nearest_point_wins_regardless_of_order():
    pts = [(10.0, 0.0, 0.0), (5.0, 0.0, 0.0), (20.0, 0.0, 0.0)]
    a = project_cloud(pts).ranges
    b = project_cloud(pts[::-1]).ranges
    assert np.array_equal(a, b)
    assert a[a > 0].tolist() == [5.0]


def test_indices_in_bounds(rng):
    pts = rng.uniform(-80, 80, (5000, 3))
    u, v, _, _ = pixel_coordinates(pts)
    assert (u >= 0).all() and (u < 1024).all() and (v >= 0).all() and (v < 64).all()


def test_angular_grid_reprojects_without_loss():
    cfg = ProjectionConfig(width=256, height=32)
    cols = np.arange(cfg.width)
    rows = np.arange(cfg.height)
    yaw = np.pi * (1 - 2 * (cols + 0.5) / cfg.width)
    pitch = np.radians(cfg.fov * (1 - (rows + 0.5) / cfg.height) - abs(cfg.fov_down))
    yy, pp = np.meshgrid(yaw, pitch)
    r = 12.0
    pts = np.stack([r * np.cos(pp) * np.cos(yy), r * np.cos(pp) * np.sin(yy), r * np.sin(pp)], -1).reshape(-1, 3)
    img = project_cloud(pts, cfg)
    assert img.occupancy.all()


@pytest.mark.parametrize("rng_m, expected", [(85.0, 1.0), (0.0, 0.0), (42.5, 0.5)])
def test_normalize(rng_m, expected):
    img = RangeImage(np.full((2, 2), rng_m))
    out = normalize(img, DEFAULT_PROJECTION)
    assert out.shape == (1, 1, 2, 2)
    assert out.data[0, 0, 0, 0] == expected


def test_config_validation():
    with pytest.raises(ValueError):
        ProjectionConfig(width=0)
    with pytest.raises(ValueError):
        ProjectionConfig(fov_up=0.0, fov_down=0.0)


def test_rimg_round_trip(tmp_path, rng):
    img = RangeImage(rng.uniform(0, 80, (4, 6)))
    write_rimg(tmp_path / "a.rimg", img)
    back = read_rimg(tmp_path / "a.rimg")
    assert np.array_equal(back.ranges, img.ranges)
    write_rimg(tmp_path / "b.rimg", back)
    assert (tmp_path / "a.rimg").read_bytes() == (tmp_path / "b.rimg").read_bytes()


def test_rimg_rejects_bad_magic_and_truncation(tmp_path):
    good = tmp_path / "g.rimg"
    write_rimg(good, RangeImage(np.ones((2, 2))))
    blob = good.read_bytes()
    (tmp_path / "m.rimg").write_bytes(b"XXXX" + blob[4:])
    (tmp_path / "t.rimg").write_bytes(blob[:-3])
    for name in ("m.rimg", "t.rimg"):
        with pytest.raises(FormatError):
            read_rimg(tmp_path / name)
