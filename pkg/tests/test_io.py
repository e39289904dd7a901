import json
import math

import numpy as np
import pytest
from PIL import Image

from drksplat.errors import CorruptFile, MissingImage, ParseError, UnsupportedFormat, VersionMismatch
from drksplat.geometry import Camera, project_point
from drksplat.io import (camera_from_pose, load_dataset, load_scene, read_image, save_scene,
                         write_image, write_manifest)
from drksplat.synthetic import random_scene


def test_scene_round_trip_is_exact_after_float32(tmp_path, rng):
    raw = random_scene(rng, n=100, sh_degree=2)
    raw.sh[:, 1:] = rng.normal(size=raw.sh[:, 1:].shape)
    p = tmp_path / "s.drk"
    save_scene(raw, p)
    back = load_scene(p)
    assert back.K == 8 and back.sh_degree == 2 and len(back) == 100
    for k in raw.FIELDS:
        np.testing.assert_array_equal(getattr(back, k), getattr(raw, k).astype(np.float32))
    save_scene(back, tmp_path / "t.drk")
    assert (tmp_path / "t.drk").read_bytes() == p.read_bytes()


def test_empty_scene_round_trip(tmp_path):
    raw = random_scene(np.random.default_rng(0), n=0)
    save_scene(raw, tmp_path / "e.drk")
    assert len(load_scene(tmp_path / "e.drk")) == 0


def test_scene_errors(tmp_path, rng):
    p = tmp_path / "s.drk"
    save_scene(random_scene(rng, n=5), p)
    data = p.read_bytes()
    (tmp_path / "cut.drk").write_bytes(data[:-7])
    with pytest.raises(CorruptFile):
        load_scene(tmp_path / "cut.drk")
    with pytest.raises(VersionMismatch):
        load_scene(p, expect_K=4)
    (tmp_path / "v2.drk").write_bytes(data.replace(b" v1 ", b" v2 ", 1))
    with pytest.raises(VersionMismatch):
        load_scene(tmp_path / "v2.drk")
    (tmp_path / "junk.drk").write_bytes(b"hello world\n")
    with pytest.raises(CorruptFile):
        load_scene(tmp_path / "junk.drk")
    bad = random_scene(rng, n=2)
    bad.center[0, 0] = np.nan
    with pytest.raises(ValueError):
        save_scene(bad, tmp_path / "nan.drk")


# ---------------------------------------------------------------------------
# images


def test_png_round_trip_within_one_level(tmp_path, rng):
    img = rng.uniform(size=(10, 12, 3))
    write_image(tmp_path / "a.png", img)
    back = read_image(tmp_path / "a.png")
    assert back.shape == (10, 12, 3)
    assert np.abs(back - img).max() <= 0.5 / 255 + 1e-12


def test_ppm_is_exact_for_8bit_values(tmp_path, rng):
    img = rng.integers(0, 256, (7, 5, 3)) / 255.0
    write_image(tmp_path / "a.ppm", img)
    np.testing.assert_allclose(read_image(tmp_path / "a.ppm"), img, atol=1e-15)


def test_alpha_is_composited_over_background(tmp_path):
    rgba = np.zeros((2, 2, 4), dtype=np.uint8)
    rgba[..., 0] = 255
    rgba[..., 3] = 0
    rgba[0, 0, 3] = 255
    Image.fromarray(rgba, "RGBA").save(tmp_path / "a.png")
    img = read_image(tmp_path / "a.png", background=(0, 0, 1))
    np.testing.assert_allclose(img[0, 0], [1, 0, 0])
    np.testing.assert_allclose(img[1, 1], [0, 0, 1])


def test_image_errors(tmp_path):
    with pytest.raises(MissingImage):
        read_image(tmp_path / "nope.png")
    Image.fromarray(np.full((4, 4), 40000, dtype=np.uint16)).save(tmp_path / "deep.png")
    with pytest.raises(UnsupportedFormat):
        read_image(tmp_path / "deep.png")
    with pytest.raises(UnsupportedFormat):
        write_image(tmp_path / "a.jpg", np.zeros((2, 2, 3)))


# ---------------------------------------------------------------------------
# manifests


def _manifest(tmp_path, meta, size=(16, 12)):
    Image.new("RGB", size).save(tmp_path / "r_0.png")
    meta.setdefault("frames", [{"file_path": "./r_0", "transform_matrix": np.eye(4).tolist()}])
    (tmp_path / "transforms_train.json").write_text(json.dumps(meta))
    return tmp_path


def test_fov_to_focal(tmp_path):
    m = load_dataset(_manifest(tmp_path, {"camera_angle_x": 2 * math.atan(0.5)}, size=(800, 600)))
    cam = m.frames[0].camera
    assert cam.fx == pytest.approx(800) and cam.fy == pytest.approx(800)
    assert (cam.width, cam.height) == (800, 600)
    assert m.synthetic and m.background == (1.0, 1.0, 1.0)


def test_identity_pose_looks_down_minus_z(tmp_path):
    cam = load_dataset(_manifest(tmp_path, {"camera_angle_x": 1.0})).frames[0].camera
    np.testing.assert_allclose(cam.center, 0, atol=1e-15)
    x, y, z = project_point(cam, [0, 0, -2.0])
    assert z == pytest.approx(2.0)
    assert (x, y) == pytest.approx((8.0, 6.0))
    # world +y is up, so it lands in the upper half of the image
    assert project_point(cam, [0, 0.5, -2.0])[1] < 6.0


def test_manifest_round_trip(tmp_path):
    cam = Camera.look_at([1, 2, 3], [0, 0, 0], [0, -1, 0], 20, 20, 16, 12)
    fov = 2 * math.atan(8 / 20)
    Image.new("RGB", (16, 12)).save(tmp_path / "v.png")
    write_manifest(tmp_path / "transforms.json", [("v.png", cam)], fov)
    got = load_dataset(tmp_path / "transforms.json").frames[0].camera
    np.testing.assert_allclose(got.rotation, cam.rotation, atol=1e-12)
    np.testing.assert_allclose(got.translation, cam.translation, atol=1e-12)
    assert got.fx == pytest.approx(20)


def test_camera_from_pose_reorthonormalises():
    pose = np.eye(4)
    pose[:3, :3] += 1e-7
    cam = camera_from_pose(pose, 10, 10, 5, 5, 10, 10)
    np.testing.assert_allclose(cam.rotation @ cam.rotation.T, np.eye(3), atol=1e-14)


def test_manifest_errors(tmp_path):
    with pytest.raises(ParseError):
        load_dataset(tmp_path)
    (tmp_path / "transforms.json").write_text("{\n  \"frames\": [\n}")
    with pytest.raises(ParseError) as e:
        load_dataset(tmp_path / "transforms.json")
    assert e.value.line is not None
    (tmp_path / "transforms.json").write_text(json.dumps(
        {"camera_angle_x": 1.0, "frames": [{"file_path": "gone", "transform_matrix": np.eye(4).tolist()}]}))
    with pytest.raises(MissingImage):
        load_dataset(tmp_path / "transforms.json")
    with pytest.raises(ParseError):
        load_dataset(_manifest(tmp_path, {}))
