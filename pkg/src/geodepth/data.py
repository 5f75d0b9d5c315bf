"""Synthetic table-top scenes and their on-disk layout.

A scene is a tilted ground plane with spheres and boxes resting on it, ray
cast through a pinhole camera. Objects flagged transparent corrupt the raw
depth the way structured-light sensors do: pixels either drop out or report
the surface behind the object.

Per-sample directory layout::

    rgb.ppm        8-bit binary PPM
    raw_depth.pgm  16-bit big-endian PGM, millimetres
    gt_depth.pgm   16-bit big-endian PGM, millimetres
    mask.pgm       8-bit PGM, 255 = transparent/specular
    camera.json    fx, fy, cx, cy, width, height, extrinsics
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InputError, ParseError
from .geometry import CameraModel, load_camera, save_camera


@dataclass
class SceneSample:
    rgb: np.ndarray  # 3 x H x W in [0, 1]
    raw_depth: np.ndarray  # H x W meters
    gt_depth: np.ndarray  # H x W meters
    mask: np.ndarray  # H x W bool
    camera: CameraModel
    id: str = ""

    def __post_init__(self):
        H, W = self.gt_depth.shape
        if self.rgb.shape != (3, H, W) or self.raw_depth.shape != (H, W) or self.mask.shape != (H, W):
            raise InputError("sample arrays are not registered to the same image grid")
        if self.camera.image_size != (W, H):
            raise InputError("camera image size does not match sample")


@dataclass(frozen=True)
class SceneSpec:
    width: int = 64
    height: int = 48
    fov_deg: float = 55.0
    n_objects: tuple[int, int] = (3, 8)
    sphere_radius: tuple[float, float] = (0.06, 0.12)
    box_half_extent: tuple[float, float] = (0.05, 0.1)
    table_distance: tuple[float, float] = (0.85, 1.1)
    table_tilt_deg: tuple[float, float] = (15.0, 35.0)
    transparent_prob: float = 0.5
    hole_prob: float = 0.6
    noise_sigma: float = 0.005


# ---------------------------------------------------------------------------
# primitives


@dataclass
class Plane:
    normal: np.ndarray  # unit, pointing towards the camera side
    offset: float  # plane: normal . x = offset
    color: np.ndarray = field(default_factory=lambda: np.array([0.55, 0.45, 0.35]))
    transparent: bool = False

    def intersect(self, dirs):
        nd = dirs @ self.normal
        with np.errstate(divide="ignore", invalid="ignore"):
            t = self.offset / nd
        return np.where((t > 0) & np.isfinite(t), t, np.inf)

    def normals(self, pts):
        return np.broadcast_to(self.normal, pts.shape)


@dataclass
class Sphere:
    center: np.ndarray
    radius: float
    color: np.ndarray
    transparent: bool = False

    def intersect(self, dirs):
        a = np.einsum("ij,ij->i", dirs, dirs)
        b = dirs @ self.center
        c = self.center @ self.center - self.radius ** 2
        disc = b * b - a * c
        with np.errstate(invalid="ignore"):
            t = (b - np.sqrt(disc)) / a
        return np.where((disc >= 0) & (t > 0), t, np.inf)

    def normals(self, pts):
        n = pts - self.center
        return n / np.linalg.norm(n, axis=-1, keepdims=True)


@dataclass
class Box:
    center: np.ndarray
    rotation: np.ndarray  # columns are the box axes in camera coordinates
    half: np.ndarray
    color: np.ndarray
    transparent: bool = False

    def intersect(self, dirs):
        o = self.rotation.T @ (-self.center)
        d = dirs @ self.rotation
        with np.errstate(divide="ignore", invalid="ignore"):
            t1 = (-self.half - o) / d
            t2 = (self.half - o) / d
        tmin = np.nanmax(np.minimum(t1, t2), axis=1)
        tmax = np.nanmin(np.maximum(t1, t2), axis=1)
        hit = (tmax >= tmin) & (tmin > 0)
        return np.where(hit, tmin, np.inf)

    def normals(self, pts):
        local = (pts - self.center) @ self.rotation / self.half
        axis = np.argmax(np.abs(local), axis=1)
        n = np.zeros_like(local)
        n[np.arange(len(n)), axis] = np.sign(local[np.arange(len(n)), axis])
        return n @ self.rotation.T


def pixel_rays(camera: CameraModel) -> np.ndarray:
    """Camera-frame ray directions with unit z for every pixel, row-major (H*W x 3)."""
    v, u = np.mgrid[0:camera.height, 0:camera.width]
    x = (u.reshape(-1) - camera.cx) / camera.fx
    y = (v.reshape(-1) - camera.cy) / camera.fy
    return np.stack([x, y, np.ones_like(x)], axis=1)


def cast(dirs: np.ndarray, surfaces) -> tuple[np.ndarray, np.ndarray]:
    """Nearest hit parameter and surface id per ray (-1 for a miss)."""
    ts = np.stack([s.intersect(dirs) for s in surfaces], axis=0)
    which = np.argmin(ts, axis=0)
    t = ts[which, np.arange(dirs.shape[0])]
    which = np.where(np.isfinite(t), which, -1)
    return t, which


def render_depth(camera: CameraModel, surfaces) -> np.ndarray:
    """Camera-frame z of the front surface for each pixel (0 where nothing is hit).

    Rays have unit z, so the hit parameter equals the depth.
    """
    t, _ = cast(pixel_rays(camera), surfaces)
    return np.where(np.isfinite(t), t, 0.0).reshape(camera.height, camera.width)


def _shade(surfaces, dirs, t, which):
    to_light = np.array([0.3, -0.6, -1.0])
    to_light /= np.linalg.norm(to_light)
    rgb = np.zeros((len(dirs), 3))
    for i, s in enumerate(surfaces):
        sel = which == i
        if not sel.any():
            continue
        pts = dirs[sel] * t[sel, None]
        lam = np.clip(s.normals(pts) @ to_light, 0.0, 1.0)
        base = np.broadcast_to(s.color, pts.shape)
        if isinstance(s, Plane):
            check = (np.floor(pts[:, 0] / 0.1) + np.floor(pts[:, 1] / 0.1)) % 2
            base = base * (0.8 + 0.2 * check[:, None])
        rgb[sel] = base * (0.35 + 0.65 * lam[:, None])
    return rgb


def _frame_from_normal(n, yaw):
    a = np.array([1.0, 0.0, 0.0]) if abs(n[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    e1 = np.cross(n, a)
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(n, e1)
    c, s = np.cos(yaw), np.sin(yaw)
    return np.stack([c * e1 + s * e2, -s * e1 + c * e2, n], axis=1)


def make_camera(spec: SceneSpec) -> CameraModel:
    f = 0.5 * spec.width / np.tan(np.radians(spec.fov_deg) / 2)
    return CameraModel.from_pinhole(f, f, (spec.width - 1) / 2, (spec.height - 1) / 2, spec.width, spec.height)


def generate_scene(seed: int, spec: SceneSpec = SceneSpec(), sample_id: str | None = None) -> SceneSample:
    if spec.n_objects[1] < 1 or spec.n_objects[0] > spec.n_objects[1] or spec.n_objects[0] < 0:
        raise InputError("scene spec must allow at least one object")
    if spec.n_objects[0] == 0 and spec.n_objects[1] == 0:
        raise InputError("scene spec has zero objects")
    rng = np.random.default_rng(seed)
    camera = make_camera(spec)

    tilt = np.radians(rng.uniform(*spec.table_tilt_deg))
    # table normal points back at the camera, tilted about the x axis so the far edge rises
    normal = np.array([0.0, -np.sin(tilt), -np.cos(tilt)])
    dist = rng.uniform(*spec.table_distance)
    plane = Plane(normal, float(normal @ np.array([0.0, 0.0, dist])))

    n_obj = int(rng.integers(spec.n_objects[0], spec.n_objects[1] + 1))
    flags = rng.random(n_obj) < spec.transparent_prob
    if spec.transparent_prob > 0 and n_obj and not flags.any():
        flags[rng.integers(n_obj)] = True
    objects = []
    for k in range(n_obj):
        u = rng.uniform(0.15, 0.85) * spec.width
        v = rng.uniform(0.2, 0.85) * spec.height
        ray = np.array([(u - camera.cx) / camera.fx, (v - camera.cy) / camera.fy, 1.0])
        foot = ray * (plane.offset / (ray @ normal))
        color = rng.uniform(0.2, 0.95, size=3)
        transparent = bool(flags[k])
        if rng.random() < 0.5:
            r = rng.uniform(*spec.sphere_radius)
            objects.append(Sphere(foot + normal * r, r, color, transparent))
        else:
            half = rng.uniform(*spec.box_half_extent, size=3)
            R = _frame_from_normal(normal, rng.uniform(0, np.pi))
            objects.append(Box(foot + normal * half[2], R, half, color, transparent))

    surfaces = [plane] + objects
    dirs = pixel_rays(camera)
    t, which = cast(dirs, surfaces)
    if not np.all(np.isfinite(t)):
        raise InputError("scene leaves pixels without a surface; adjust table distance or tilt")
    gt = t.reshape(spec.height, spec.width)

    transparent_ids = np.array([i for i, s in enumerate(surfaces) if s.transparent], dtype=np.int64)
    mask = np.isin(which, transparent_ids).reshape(spec.height, spec.width)
    rgb = _shade(surfaces, dirs, t, which)

    raw = gt.copy()
    if mask.any():
        opaque = [s for s in surfaces if not s.transparent]
        t_back, which_back = cast(dirs, opaque)
        rgb_back = _shade(opaque, dirs, t_back, which_back)
        m = mask.reshape(-1)
        # transparent pixels: mostly the background seen through a faint tint and a highlight
        tint = np.stack([s.color if i in transparent_ids else np.zeros(3) for i, s in enumerate(surfaces)])
        rgb[m] = 0.75 * rgb_back[m] + 0.25 * tint[which[m]] + 0.1 * rgb[m]
        idx = np.nonzero(mask)
        holes = rng.random(len(idx[0])) < spec.hole_prob
        noise = rng.normal(0.0, spec.noise_sigma, size=len(idx[0]))
        behind = t_back.reshape(spec.height, spec.width)[idx] + noise
        raw[idx] = np.where(holes, 0.0, np.maximum(behind, 1e-3))
    rgb = np.clip(rgb, 0.0, 1.0).T.reshape(3, spec.height, spec.width)
    return SceneSample(rgb, raw, gt, mask, camera, sample_id or f"scene_{seed}")


# ---------------------------------------------------------------------------
# PGM / PPM


def write_pnm(path, img: np.ndarray) -> None:
    """Binary PGM (H x W, uint8/uint16) or PPM (H x W x 3, uint8)."""
    img = np.asarray(img)
    if img.dtype == np.uint16:
        maxval, payload = 65535, img.astype(">u2").tobytes()
    elif img.dtype == np.uint8:
        maxval, payload = 255, img.tobytes()
    else:
        raise InputError(f"unsupported PNM dtype {img.dtype}")
    if img.ndim == 2:
        magic = b"P5"
    elif img.ndim == 3 and img.shape[2] == 3 and img.dtype == np.uint8:
        magic = b"P6"
    else:
        raise InputError(f"unsupported PNM shape {img.shape}")
    h, w = img.shape[:2]
    Path(path).write_bytes(magic + f"\n{w} {h}\n{maxval}\n".encode() + payload)


_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")


def read_pnm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    pos = 0
    fields = []
    for _ in range(4):
        m = _TOKEN.match(data, pos)
        if m is None:
            raise ParseError(path, pos, "truncated header")
        fields.append((m.group(1), m.start(1)))
        pos = m.end(1)
    magic, off = fields[0]
    if magic not in (b"P5", b"P6"):
        raise ParseError(path, off, f"unsupported magic {magic!r}")
    try:
        w, h, maxval = (int(f) for f, _ in fields[1:])
    except ValueError:
        bad = next(o for f, o in fields[1:] if not f.isdigit())
        raise ParseError(path, bad, "header field is not an integer") from None
    if w <= 0 or h <= 0 or not 0 < maxval < 65536:
        raise ParseError(path, fields[1][1], "invalid dimensions or maxval")
    if pos >= len(data) or data[pos:pos + 1] not in (b" ", b"\n", b"\r", b"\t"):
        raise ParseError(path, pos, "expected single whitespace after maxval")
    pos += 1
    channels = 3 if magic == b"P6" else 1
    dt = np.dtype(">u2") if maxval > 255 else np.dtype(np.uint8)
    need = w * h * channels * dt.itemsize
    if len(data) - pos < need:
        raise ParseError(path, len(data), f"payload truncated: need {need} bytes after offset {pos}")
    arr = np.frombuffer(data, dtype=dt, count=w * h * channels, offset=pos)
    arr = arr.astype(np.uint16 if dt.itemsize == 2 else np.uint8)
    return arr.reshape(h, w, 3) if channels == 3 else arr.reshape(h, w)


def depth_to_mm(depth: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(depth) * 1000.0), 0, 65535).astype(np.uint16)


def mm_to_depth(mm: np.ndarray) -> np.ndarray:
    return mm.astype(np.float64) / 1000.0


def save_depth(path, depth) -> None:
    write_pnm(path, depth_to_mm(depth))


def load_depth(path) -> np.ndarray:
    img = read_pnm(path)
    if img.ndim != 2:
        raise InputError(f"{path}: depth map must be single-channel")
    return mm_to_depth(img)


def save_rgb(path, rgb) -> None:
    write_pnm(path, np.clip(np.rint(np.asarray(rgb).transpose(1, 2, 0) * 255.0), 0, 255).astype(np.uint8))


def load_rgb(path) -> np.ndarray:
    img = read_pnm(path)
    if img.ndim != 3:
        raise InputError(f"{path}: expected a colour PPM")
    return img.transpose(2, 0, 1).astype(np.float64) / 255.0


def quantize(sample: SceneSample) -> SceneSample:
    """The sample as it reads back from disk (8-bit colour, millimetre depth)."""
    rgb = np.clip(np.rint(sample.rgb * 255.0), 0, 255) / 255.0
    return SceneSample(rgb, mm_to_depth(depth_to_mm(sample.raw_depth)), mm_to_depth(depth_to_mm(sample.gt_depth)),
                       sample.mask.copy(), sample.camera, sample.id)


def save_sample(sample: SceneSample, directory) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    save_rgb(d / "rgb.ppm", sample.rgb)
    save_depth(d / "raw_depth.pgm", sample.raw_depth)
    save_depth(d / "gt_depth.pgm", sample.gt_depth)
    write_pnm(d / "mask.pgm", np.where(sample.mask, 255, 0).astype(np.uint8))
    save_camera(sample.camera, d / "camera.json")
    return d


def load_sample(directory) -> SceneSample:
    d = Path(directory)
    mask = read_pnm(d / "mask.pgm")
    return SceneSample(load_rgb(d / "rgb.ppm"), load_depth(d / "raw_depth.pgm"), load_depth(d / "gt_depth.pgm"),
                       mask > 127, load_camera(d / "camera.json"), d.name)


def generate_dataset(root, n: int, seed: int = 0, spec: SceneSpec = SceneSpec()) -> list[Path]:
    root = Path(root)
    seeds = np.random.SeedSequence(seed).generate_state(n, dtype=np.uint32)
    out = []
    for i, s in enumerate(seeds):
        sid = f"sample_{i:05d}"
        out.append(save_sample(generate_scene(int(s), spec, sid), root / sid))
    return out


def load_dataset(root) -> list[SceneSample]:
    dirs = sorted(p for p in Path(root).iterdir() if (p / "camera.json").exists())
    if not dirs:
        raise InputError(f"no samples found under {root}")
    return [load_sample(p) for p in dirs]
