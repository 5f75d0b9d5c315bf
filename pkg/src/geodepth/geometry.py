"""Pinhole camera model, depth back-projection and forward projection.

Pixel coordinates are 0-based pixel centers: ``u`` indexes columns in
``[0, W-1]`` and ``v`` indexes rows in ``[0, H-1]``. Depth is in meters and a
value of exactly ``0.0`` marks a sensor hole.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, InputError

_RIGID_TOL = 1e-6


def intrinsics_matrix(fx: float, fy: float, cx: float, cy: float) -> np.ndarray:
    """4x4 pinhole intrinsics in the homogeneous form used for back-projection."""
    K = np.eye(4)
    K[0, 0], K[1, 1] = fx, fy
    K[0, 2], K[1, 2] = cx, cy
    return K


@dataclass(frozen=True)
class CameraModel:
    intrinsics: np.ndarray
    extrinsics: np.ndarray
    image_size: tuple[int, int]  # (width, height)

    def __post_init__(self):
        K = np.array(self.intrinsics, dtype=np.float64)
        T = np.array(self.extrinsics, dtype=np.float64)
        if K.shape != (4, 4) or T.shape != (4, 4):
            raise ConfigError("intrinsics and extrinsics must be 4x4")
        if not (np.all(np.isfinite(K)) and np.all(np.isfinite(T))):
            raise ConfigError("camera matrices must be finite")
        if not (np.array_equal(K[2], [0, 0, 1, 0]) and np.array_equal(K[3], [0, 0, 0, 1])):
            raise ConfigError("intrinsics rows 3 and 4 must be (0,0,1,0) and (0,0,0,1)")
        if K[0, 0] <= 0 or K[1, 1] <= 0:
            raise ConfigError("fx and fy must be positive")
        R = T[:3, :3]
        if not np.allclose(R @ R.T, np.eye(3), atol=_RIGID_TOL, rtol=0):
            raise ConfigError("extrinsics rotation block is not orthonormal")
        if abs(np.linalg.det(R) - 1.0) > _RIGID_TOL or not np.array_equal(T[3], [0, 0, 0, 1]):
            raise ConfigError("extrinsics is not a proper rigid transform")
        w, h = (int(s) for s in self.image_size)
        if w <= 0 or h <= 0:
            raise ConfigError("image_size must be positive")
        K.setflags(write=False)
        T.setflags(write=False)
        object.__setattr__(self, "intrinsics", K)
        object.__setattr__(self, "extrinsics", T)
        object.__setattr__(self, "image_size", (w, h))

    @classmethod
    def from_pinhole(cls, fx, fy, cx, cy, width, height, extrinsics=None) -> "CameraModel":
        T = np.eye(4) if extrinsics is None else np.asarray(extrinsics, dtype=np.float64)
        return cls(intrinsics_matrix(fx, fy, cx, cy), T, (width, height))

    @property
    def width(self) -> int:
        return self.image_size[0]

    @property
    def height(self) -> int:
        return self.image_size[1]

    @property
    def fx(self) -> float:
        return float(self.intrinsics[0, 0])

    @property
    def fy(self) -> float:
        return float(self.intrinsics[1, 1])

    @property
    def cx(self) -> float:
        return float(self.intrinsics[0, 2])

    @property
    def cy(self) -> float:
        return float(self.intrinsics[1, 2])

    def scaled(self, s: float) -> "CameraModel":
        """Camera for an image resized by factor ``s``: fx, fy, cx, cy all multiplied by ``s``."""
        K = self.intrinsics.copy()
        K[0, 0] *= s
        K[1, 1] *= s
        K[0, 2] *= s
        K[1, 2] *= s
        w = int(round(self.width * s))
        h = int(round(self.height * s))
        return CameraModel(K, self.extrinsics, (w, h))

    def pixel_to_world(self) -> np.ndarray:
        """Combined inverse transform ``T^-1 K^-1`` applied to ``[u*d, v*d, d, 1]``."""
        try:
            return np.linalg.inv(self.extrinsics) @ np.linalg.inv(self.intrinsics)
        except np.linalg.LinAlgError as exc:
            raise ConfigError(f"camera transform not invertible: {exc}") from exc

    def to_dict(self) -> dict:
        return {
            "fx": self.fx,
            "fy": self.fy,
            "cx": self.cx,
            "cy": self.cy,
            "width": self.width,
            "height": self.height,
            "extrinsics": [float(x) for x in self.extrinsics.reshape(-1)],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CameraModel":
        try:
            T = np.asarray(d.get("extrinsics", np.eye(4).reshape(-1).tolist()), dtype=np.float64)
            if T.size != 16:
                raise InputError("camera extrinsics must have 16 entries")
            return cls.from_pinhole(
                float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
                int(d["width"]), int(d["height"]), T.reshape(4, 4),
            )
        except KeyError as exc:
            raise InputError(f"camera JSON missing key {exc}") from exc


def save_camera(camera: CameraModel, path) -> None:
    Path(path).write_text(json.dumps(camera.to_dict(), indent=2))


def load_camera(path) -> CameraModel:
    try:
        d = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: malformed camera JSON at byte {exc.pos}: {exc.msg}") from exc
    return CameraModel.from_dict(d)


@dataclass
class PointSet:
    positions: np.ndarray
    features: np.ndarray | None = None
    pixel_origin: np.ndarray | None = None
    image_size: tuple[int, int] | None = field(default=None, compare=False)

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(self.positions)):
            raise InputError("point positions must be finite")
        n = len(self.positions)
        if self.features is not None:
            self.features = np.asarray(self.features)
            if self.features.shape[0] != n:
                raise InputError("features first dimension must equal point count")
        if self.pixel_origin is not None:
            self.pixel_origin = np.asarray(self.pixel_origin, dtype=np.int64).reshape(-1, 2)
            if len(self.pixel_origin) != n:
                raise InputError("pixel_origin length must equal point count")
            if self.image_size is not None and n:
                w, h = self.image_size
                u, v = self.pixel_origin[:, 0], self.pixel_origin[:, 1]
                if u.min() < 0 or v.min() < 0 or u.max() >= w or v.max() >= h:
                    raise InputError("pixel_origin outside image bounds")

    def __len__(self) -> int:
        return len(self.positions)


def validate_depth(depth: np.ndarray) -> np.ndarray:
    depth = np.asarray(depth, dtype=np.float64)
    if depth.ndim != 2:
        raise InputError(f"depth map must be 2-D, got shape {depth.shape}")
    if not np.all(np.isfinite(depth)) or np.any(depth < 0):
        raise InputError("depth values must be finite and non-negative")
    return depth


def back_project(depth: np.ndarray, camera: CameraModel) -> PointSet:
    """Lift every pixel with positive depth to a 3D point in the world frame."""
    depth = validate_depth(depth)
    h, w = depth.shape
    if (w, h) != camera.image_size:
        raise InputError(f"depth is {w}x{h} but camera expects {camera.width}x{camera.height}")
    M = camera.pixel_to_world()
    v, u = np.nonzero(depth > 0)
    d = depth[v, u]
    homo = np.stack([u * d, v * d, d, np.ones_like(d)], axis=0)
    xyz = (M @ homo)[:3].T
    return PointSet(xyz, pixel_origin=np.stack([u, v], axis=1), image_size=camera.image_size)


def back_project_pixels(u, v, d, camera: CameraModel) -> np.ndarray:
    """Back-project arbitrary (u, v, d) triples; no validity filtering."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    d = np.asarray(d, dtype=np.float64)
    homo = np.stack([u * d, v * d, d, np.ones_like(d)], axis=0)
    return (camera.pixel_to_world() @ homo)[:3].T


@dataclass
class Projection:
    uvd: np.ndarray  # M x 3 rows of (u, v, d) for points in front of the camera
    kept: np.ndarray  # indices into the input of the returned rows
    behind_count: int


def project(points, camera: CameraModel) -> Projection:
    """Map world points to (u, v, d); points with camera-frame depth <= 0 are dropped and counted."""
    P = points.positions if isinstance(points, PointSet) else np.asarray(points, dtype=np.float64)
    P = P.reshape(-1, 3)
    if not np.all(np.isfinite(P)):
        raise InputError("point positions must be finite")
    homo = np.concatenate([P, np.ones((len(P), 1))], axis=1).T
    cam = camera.intrinsics @ camera.extrinsics @ homo  # rows: u*d, v*d, d, 1
    d = cam[2]
    front = d > 0
    kept = np.nonzero(front)[0]
    uvd = np.stack([cam[0, front] / d[front], cam[1, front] / d[front], d[front]], axis=1)
    return Projection(uvd, kept, int((~front).sum()))
