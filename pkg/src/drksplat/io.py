"""Scene files, posed-image manifests and image encoding."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import CorruptFile, MissingImage, ParseError, UnsupportedFormat, VersionMismatch
from .geometry import Camera
from .kernel import RawDrkParams

MAGIC = "DRKSCENE"
VERSION = 1
WHITE = (1.0, 1.0, 1.0)
BLACK = (0.0, 0.0, 0.0)


# --------------------------------------------------------------------------
# scenes


def _record_layout(K, n_sh):
    return [("center", (3,)), ("quat", (4,)), ("scale", (K,)), ("angle", (K,)),
            ("eta", ()), ("tau", ()), ("opacity", ()), ("sh", (n_sh, 3))]


def save_scene(raw: RawDrkParams, path) -> None:
    """Plain-text header line followed by little-endian float32 records."""
    raw.check_finite()
    N, K, deg = len(raw), raw.K, raw.sh_degree
    cols = [getattr(raw, name).reshape(N, int(np.prod(shape)))
            for name, shape in _record_layout(K, raw.sh.shape[1])]
    body = np.concatenate(cols, axis=1).astype("<f4")
    header = f"{MAGIC} v{VERSION} K={K} SH={deg} N={N}\n".encode("ascii")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(body.tobytes())


def _parse_header(line: bytes, path):
    try:
        parts = line.decode("ascii").split()
    except UnicodeDecodeError as exc:
        raise CorruptFile(f"{path}: header is not text") from exc
    if len(parts) != 5 or parts[0] != MAGIC:
        raise CorruptFile(f"{path}: not a scene file")
    if parts[1] != f"v{VERSION}":
        raise VersionMismatch(f"{path}: format {parts[1]}, expected v{VERSION}")
    try:
        fields = dict(p.split("=", 1) for p in parts[2:])
        return int(fields["K"]), int(fields["SH"]), int(fields["N"])
    except (KeyError, ValueError) as exc:
        raise CorruptFile(f"{path}: malformed header {line!r}") from exc


def load_scene(path, expect_K: int | None = None) -> RawDrkParams:
    with open(path, "rb") as fh:
        header = fh.readline(256)
        body = fh.read()
    if not header.endswith(b"\n"):
        raise CorruptFile(f"{path}: missing header line")
    K, deg, N = _parse_header(header.strip(), path)
    if expect_K is not None and K != expect_K:
        raise VersionMismatch(f"{path}: scene has K={K}, pipeline expects K={expect_K}")
    if K < 3 or not 0 <= deg <= 3 or N < 0:
        raise CorruptFile(f"{path}: invalid header values K={K} SH={deg} N={N}")
    n_sh = (deg + 1) ** 2
    layout = _record_layout(K, n_sh)
    width = sum(int(np.prod(shape)) for _, shape in layout)
    if len(body) != 4 * width * N:
        raise CorruptFile(f"{path}: expected {4 * width * N} payload bytes, found {len(body)}")
    data = np.frombuffer(body, dtype="<f4").reshape(N, width).astype(np.float64)
    out, col = {}, 0
    for name, shape in layout:
        w = int(np.prod(shape))
        out[name] = data[:, col:col + w].reshape((N,) + shape)
        col += w
    raw = RawDrkParams(**out)
    try:
        raw.check_finite()
    except ValueError as exc:
        raise CorruptFile(f"{path}: {exc}") from exc
    return raw


# --------------------------------------------------------------------------
# images


def read_image(path, background=BLACK) -> np.ndarray:
    """8-bit PNG or binary PPM as float HxWx3 in [0, 1]; alpha is composited
    over ``background``."""
    path = Path(path)
    if not path.exists():
        raise MissingImage(f"image not found: {path}")
    try:
        with Image.open(path) as im:
            im.load()
            mode = im.mode
            if mode in ("I", "I;16", "I;16B", "I;16L", "F") or mode.startswith("I;16"):
                raise UnsupportedFormat(f"{path}: 16-bit or float images are not supported")
            if im.format not in ("PNG", "PPM"):
                raise UnsupportedFormat(f"{path}: format {im.format} not supported (PNG/PPM only)")
            if mode in ("RGBA", "LA", "PA") or (mode == "P" and "transparency" in im.info):
                arr = np.asarray(im.convert("RGBA"), dtype=np.float64) / 255.0
                a = arr[..., 3:4]
                return arr[..., :3] * a + np.asarray(background, dtype=np.float64) * (1 - a)
            return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    except UnidentifiedImageError as exc:
        raise UnsupportedFormat(f"{path}: unrecognised image data") from exc


def to_uint8(img) -> np.ndarray:
    return np.clip(np.rint(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def write_image(path, img) -> None:
    path = Path(path)
    fmt = {".png": "PNG", ".ppm": "PPM"}.get(path.suffix.lower())
    if fmt is None:
        raise UnsupportedFormat(f"{path}: only .png and .ppm outputs are supported")
    arr = np.asarray(img)
    if arr.ndim == 2:
        arr = np.repeat(arr[..., None], 3, axis=2)
    Image.fromarray(to_uint8(arr), "RGB").save(path, format=fmt)


# --------------------------------------------------------------------------
# posed image manifests


@dataclass
class Frame:
    image_path: Path
    camera: Camera


@dataclass
class DatasetManifest:
    frames: list
    background: tuple
    synthetic: bool

    def views(self):
        """Load every image as (image, camera)."""
        return [(read_image(f.image_path, self.background), f.camera) for f in self.frames]


GL_TO_CV = np.diag([1.0, -1.0, -1.0, 1.0])


def camera_from_pose(c2w_gl, fx, fy, cx, cy, width, height) -> Camera:
    """Camera from a camera-to-world pose in the y-up, -z-forward convention."""
    c2w = np.asarray(c2w_gl, dtype=np.float64).reshape(4, 4) @ GL_TO_CV
    Rc2w = c2w[:3, :3]
    # re-orthonormalise to absorb rounding in stored matrices
    u, _, vt = np.linalg.svd(Rc2w)
    Rc2w = u @ vt
    Rw2c = Rc2w.T
    return Camera(fx, fy, cx, cy, width, height, Rw2c, -Rw2c @ c2w[:3, 3])


def _image_size(path: Path):
    try:
        with Image.open(path) as im:
            return im.size
    except UnidentifiedImageError as exc:
        raise UnsupportedFormat(f"{path}: unrecognised image data") from exc


def load_dataset(path, split: str = "train", background=None) -> DatasetManifest:
    """Read a transforms-style manifest (field of view + per-frame 4x4 pose)."""
    path = Path(path)
    if path.is_dir():
        for name in (f"transforms_{split}.json", "transforms.json"):
            if (path / name).exists():
                path = path / name
                break
        else:
            raise ParseError("no transforms manifest in directory", path)
    try:
        meta = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(exc.msg, path, exc.lineno) from exc
    if not isinstance(meta, dict) or "frames" not in meta:
        raise ParseError("manifest has no 'frames' list", path)
    synthetic = "camera_angle_x" in meta
    if background is None:
        background = WHITE if synthetic else BLACK
    frames = []
    size = None
    for i, fr in enumerate(meta["frames"]):
        try:
            rel = fr["file_path"]
            pose = np.asarray(fr["transform_matrix"], dtype=np.float64)
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(f"frame {i}: {exc}", path) from exc
        if pose.shape != (4, 4):
            raise ParseError(f"frame {i}: transform_matrix must be 4x4", path)
        img = (path.parent / rel)
        if not img.suffix:
            img = img.with_suffix(".png")
        if not img.exists():
            raise MissingImage(f"image not found: {img}")
        w, h = int(meta.get("w", 0)) or None, int(meta.get("h", 0)) or None
        if w is None or h is None:
            w, h = _image_size(img)
        if size is None:
            size = (w, h)
        elif size != (w, h):
            raise ParseError(f"frame {i}: image size {w}x{h} differs from {size[0]}x{size[1]}", path)
        if "fl_x" in meta:
            fx = float(meta["fl_x"])
            fy = float(meta.get("fl_y", fx))
        elif "camera_angle_x" in meta:
            fx = w / (2.0 * math.tan(float(meta["camera_angle_x"]) / 2.0))
            fy = (h / (2.0 * math.tan(float(meta["camera_angle_y"]) / 2.0))
                  if "camera_angle_y" in meta else fx)
        else:
            raise ParseError("manifest needs camera_angle_x or fl_x", path)
        cx = float(meta.get("cx", w / 2.0))
        cy = float(meta.get("cy", h / 2.0))
        frames.append(Frame(img, camera_from_pose(pose, fx, fy, cx, cy, w, h)))
    if not frames:
        raise ParseError("manifest lists no frames", path)
    return DatasetManifest(frames, tuple(background), synthetic)


def write_manifest(path, frames, fov_x: float) -> None:
    """Write a transforms manifest for (relative image path, Camera) pairs."""
    out = {"camera_angle_x": fov_x, "frames": []}
    for rel, cam in frames:
        c2w = np.eye(4)
        c2w[:3, :3] = cam.rotation.T
        c2w[:3, 3] = cam.center
        out["frames"].append({"file_path": str(rel), "transform_matrix": (c2w @ GL_TO_CV).tolist()})
    Path(path).write_text(json.dumps(out, indent=2))
