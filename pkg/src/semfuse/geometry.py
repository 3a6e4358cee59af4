"""Camera models, rigid transforms, back-projection and normal estimation.

Conventions
-----------
Right-handed frames. The camera looks down +z, x points right and y points
down, with the image origin at the top-left pixel. A :class:`Pose` maps
camera coordinates to world coordinates. Quaternions are stored (x, y, z, w).

A "yaw" in this package is a rotation about the camera +y axis, so a
+90 degree yaw takes (1, 0, 0) to (0, 0, -1).
"""
from __future__ import annotations

import dataclasses

import numpy as np
from scipy.spatial.transform import Rotation

__all__ = [
    "Intrinsics",
    "Pose",
    "PointMap",
    "NormalMap",
    "backproject",
    "compute_normals",
    "project",
    "transform",
    "depth_to_meters",
]


@dataclasses.dataclass(frozen=True)
class Intrinsics:
    """Pinhole camera parameters."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    depth_scale: float = 1000.0
    """Raw depth units per meter (1000 for millimeter depth)."""

    def __post_init__(self):
        for name in ("fx", "fy", "cx", "cy", "depth_scale"):
            object.__setattr__(self, name, float(getattr(self, name)))
        for name in ("width", "height"):
            object.__setattr__(self, name, int(getattr(self, name)))
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got fx={self.fx} fy={self.fy}")
        if self.width <= 0 or self.height <= 0:
            raise ValueError(f"image size must be positive, got {self.width}x{self.height}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError(f"principal point ({self.cx}, {self.cy}) outside the image")
        if not self.depth_scale > 0:
            raise ValueError(f"depth_scale must be positive, got {self.depth_scale}")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def downsampled(self, factor: int) -> Intrinsics:
        """Intrinsics of the image subsampled by taking every ``factor``-th pixel."""
        if factor == 1:
            return self
        return Intrinsics(
            fx=self.fx / factor,
            fy=self.fy / factor,
            cx=self.cx / factor,
            cy=self.cy / factor,
            width=(self.width + factor - 1) // factor,
            height=(self.height + factor - 1) // factor,
            depth_scale=self.depth_scale,
        )


@dataclasses.dataclass(frozen=True, eq=False)
class Pose:
    """Rigid camera-to-world transform.

    ``rotation`` is a unit quaternion (x, y, z, w); ``translation`` is in meters.
    """

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        q = np.array(self.rotation, dtype=np.float64).reshape(4)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(q)) and np.all(np.isfinite(t))):
            raise ValueError("pose contains non-finite values")
        norm = np.linalg.norm(q)
        if abs(norm - 1.0) > 1e-6:
            raise ValueError(f"quaternion norm {norm:.8f} is not 1")
        if abs(norm - 1.0) > 1e-12:
            q = q / norm
        q.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "rotation", q)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> Pose:
        return cls(np.array([0.0, 0.0, 0.0, 1.0]), np.zeros(3))

    @classmethod
    def from_matrix(cls, matrix: np.ndarray) -> Pose:
        matrix = np.asarray(matrix, dtype=np.float64)
        q = Rotation.from_matrix(matrix[:3, :3]).as_quat()
        return cls(q, matrix[:3, 3])

    @classmethod
    def from_rt(cls, rotation_matrix: np.ndarray, translation) -> Pose:
        return cls(Rotation.from_matrix(rotation_matrix).as_quat(), translation)

    @classmethod
    def from_rotvec(cls, rotvec, translation=(0.0, 0.0, 0.0)) -> Pose:
        return cls(Rotation.from_rotvec(rotvec).as_quat(), translation)

    @classmethod
    def look_at(cls, eye, target, up=(0.0, -1.0, 0.0)) -> Pose:
        """Camera at ``eye`` looking at ``target``; ``up`` is the world direction
        that should appear toward the top of the image."""
        eye = np.asarray(eye, dtype=np.float64)
        z = np.asarray(target, dtype=np.float64) - eye
        z /= np.linalg.norm(z)
        # image y points down, so camera y is opposite to "up" and x = y cross z
        x = np.cross(z, np.asarray(up, dtype=np.float64))
        if np.linalg.norm(x) < 1e-9:
            raise ValueError("look_at: up vector parallel to viewing direction")
        x /= np.linalg.norm(x)
        y = np.cross(z, x)
        return cls.from_rt(np.stack([x, y, z], axis=1), eye)

    @property
    def rotation_matrix(self) -> np.ndarray:
        return Rotation.from_quat(self.rotation).as_matrix()

    @property
    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation_matrix
        m[:3, 3] = self.translation
        return m

    def inverse(self) -> Pose:
        r_inv = Rotation.from_quat(self.rotation).inv()
        return Pose(r_inv.as_quat(), -r_inv.apply(self.translation))

    def __matmul__(self, other: Pose) -> Pose:
        """Composition: ``(a @ b).apply(p) == a.apply(b.apply(p))``."""
        ra = Rotation.from_quat(self.rotation)
        rb = Rotation.from_quat(other.rotation)
        return Pose((ra * rb).as_quat(), ra.apply(other.translation) + self.translation)

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform points of shape (..., 3)."""
        points = np.asarray(points, dtype=np.float64)
        return points @ self.rotation_matrix.T + self.translation

    def rotate(self, vectors: np.ndarray) -> np.ndarray:
        """Rotate direction vectors of shape (..., 3); no translation."""
        return np.asarray(vectors, dtype=np.float64) @ self.rotation_matrix.T

    def angle_to(self, other: Pose) -> float:
        """Rotation angle (radians) of the relative rotation between two poses."""
        rel = Rotation.from_quat(self.rotation).inv() * Rotation.from_quat(other.rotation)
        return float(rel.magnitude())

    def distance_to(self, other: Pose) -> float:
        return float(np.linalg.norm(self.translation - other.translation))

    def __repr__(self):
        q = ", ".join(f"{v:.6g}" for v in self.rotation)
        t = ", ".join(f"{v:.6g}" for v in self.translation)
        return f"Pose(q=[{q}], t=[{t}])"


@dataclasses.dataclass(frozen=True)
class PointMap:
    """Per-pixel 3D points. Invalid pixels hold NaN and are False in ``valid``."""

    points: np.ndarray
    valid: np.ndarray

    @property
    def shape(self) -> tuple[int, int]:
        return self.valid.shape


@dataclasses.dataclass(frozen=True)
class NormalMap:
    """Per-pixel unit normals. Invalid pixels hold NaN and are False in ``valid``."""

    normals: np.ndarray
    valid: np.ndarray


def transform(p, pose: Pose) -> np.ndarray:
    """Apply a rigid transform to a point or an array of points."""
    return pose.apply(p)


def depth_to_meters(depth: np.ndarray, k: Intrinsics) -> np.ndarray:
    """Convert a raw depth image to float64 meters; non-positive or
    non-finite raw values become 0."""
    z = np.asarray(depth, dtype=np.float64) / k.depth_scale
    z[~np.isfinite(z) | (z <= 0)] = 0.0
    return z


def backproject(depth: np.ndarray, k: Intrinsics) -> PointMap:
    """Lift a raw depth image to camera-frame points.

    Pixel (u, v) with depth z meters maps to ((u - cx) z / fx, (v - cy) z / fy, z).
    Zero depth marks the pixel invalid.
    """
    depth = np.asarray(depth)
    if depth.shape != k.shape:
        raise ValueError(f"depth image is {depth.shape[::-1]} (w x h) but intrinsics expect "
                         f"{k.width}x{k.height}")
    z = depth_to_meters(depth, k)
    v, u = np.indices(k.shape, dtype=np.float64)
    valid = z > 0
    pts = np.stack([(u - k.cx) * z / k.fx, (v - k.cy) * z / k.fy, z], axis=-1)
    pts[~valid] = np.nan
    return PointMap(pts, valid)


def project(points: np.ndarray, k: Intrinsics) -> tuple[np.ndarray, np.ndarray]:
    """Camera-frame points (..., 3) to continuous pixel coordinates (u, v).

    Points with z <= 0 yield NaN coordinates.
    """
    points = np.asarray(points, dtype=np.float64)
    z = points[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        zs = np.where(z > 0, z, np.nan)
        u = points[..., 0] * k.fx / zs + k.cx
        v = points[..., 1] * k.fy / zs + k.cy
    return u, v


def compute_normals(pm: PointMap) -> NormalMap:
    """Normals from central differences of neighbouring points.

    Border pixels and pixels with an invalid 4-neighbour are invalid. Normals
    are oriented toward the camera, i.e. n . p < 0 for camera-frame points.
    """
    pts = pm.points
    h, w = pm.valid.shape
    normals = np.full((h, w, 3), np.nan)
    valid = np.zeros((h, w), dtype=bool)
    if h < 3 or w < 3:
        return NormalMap(normals, valid)

    c = (slice(1, -1), slice(1, -1))
    du = pts[1:-1, 2:] - pts[1:-1, :-2]
    dv = pts[2:, 1:-1] - pts[:-2, 1:-1]
    ok = (pm.valid[c] & pm.valid[1:-1, 2:] & pm.valid[1:-1, :-2]
          & pm.valid[2:, 1:-1] & pm.valid[:-2, 1:-1])
    with np.errstate(invalid="ignore"):
        n = np.cross(du, dv)
        length = np.linalg.norm(n, axis=-1)
        ok &= length > 1e-12
        n = n / np.where(ok, length, 1.0)[..., None]
        flip = np.einsum("ijk,ijk->ij", n, pts[c]) > 0
    n[flip] *= -1.0
    n[~ok] = np.nan
    normals[c] = n
    valid[c] = ok
    return NormalMap(normals, valid)
