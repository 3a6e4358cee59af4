"""Truncated signed distance volume: fusion, ray casting and mesh extraction."""
from __future__ import annotations

import dataclasses

import numba
import numpy as np
from skimage.measure import marching_cubes

from .geometry import Intrinsics, NormalMap, PointMap, Pose, depth_to_meters

__all__ = [
    "TsdfVolume",
    "SemanticMesh",
    "integrate_frame",
    "raycast_surface",
    "extract_mesh",
    "trilinear",
]


class TsdfVolume:
    """Dense voxel grid with tsdf, weight, color and a label distribution per voxel.

    Arrays are indexed ``[x, y, z]``. Voxel ``(i, j, k)`` has its center at
    ``origin + (i + 0.5, j + 0.5, k + 0.5) * voxel_size``. Stored tsdf values
    are distances divided by the truncation and clamped to [-1, 1].
    """

    def __init__(self, dims, voxel_size: float, origin=(0.0, 0.0, 0.0),
                 truncation: float | None = None, num_classes: int = 1,
                 w_max: float = 64.0):
        dims = tuple(int(d) for d in dims)
        if len(dims) != 3 or min(dims) < 2:
            raise ValueError(f"volume dims must be three integers >= 2, got {dims}")
        if voxel_size <= 0:
            raise ValueError("voxel_size must be positive")
        if num_classes < 1:
            raise ValueError("num_classes must be >= 1")
        self.dims = dims
        self.voxel_size = float(voxel_size)
        self.origin = np.asarray(origin, dtype=np.float64).reshape(3)
        self.truncation = float(truncation) if truncation is not None else 4.0 * self.voxel_size
        if self.truncation <= 0:
            raise ValueError("truncation must be positive")
        self.w_max = float(w_max)
        self.num_classes = int(num_classes)
        self.tsdf = np.ones(dims, dtype=np.float32)
        self.weight = np.zeros(dims, dtype=np.float32)
        self.color = np.zeros(dims + (3,), dtype=np.float32)
        self.probs = np.full(dims + (num_classes,), 1.0 / num_classes, dtype=np.float32)

    @property
    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        """World-space (min corner, max corner)."""
        return self.origin.copy(), self.origin + np.array(self.dims) * self.voxel_size

    def world_to_index(self, points: np.ndarray) -> np.ndarray:
        """Continuous voxel-index coordinates of world points (voxel centers are integers)."""
        return (np.asarray(points, dtype=np.float64) - self.origin) / self.voxel_size - 0.5

    def index_to_world(self, idx: np.ndarray) -> np.ndarray:
        return (np.asarray(idx, dtype=np.float64) + 0.5) * self.voxel_size + self.origin

    def is_empty(self) -> bool:
        return not np.any(self.weight > 0)

    def camera_coords(self, pose: Pose) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Camera-frame x, y, z of every voxel center, each of shape ``dims``."""
        axes = [self.origin[a] + (np.arange(self.dims[a]) + 0.5) * self.voxel_size
                for a in range(3)]
        rt = pose.rotation_matrix.T
        offset = -rt @ pose.translation
        x = axes[0][:, None, None]
        y = axes[1][None, :, None]
        z = axes[2][None, None, :]
        out = []
        for c in range(3):
            out.append((rt[c, 0] * x + rt[c, 1] * y + rt[c, 2] * z + offset[c]).astype(np.float64))
        return tuple(out)

    def copy(self) -> TsdfVolume:
        other = TsdfVolume.__new__(TsdfVolume)
        other.__dict__.update(self.__dict__)
        for name in ("origin", "tsdf", "weight", "color", "probs"):
            setattr(other, name, getattr(self, name).copy())
        return other


@dataclasses.dataclass
class SemanticMesh:
    """Triangle mesh with per-vertex color, unit normal and label distribution."""

    vertices: np.ndarray
    faces: np.ndarray
    normals: np.ndarray
    colors: np.ndarray
    """RGB in [0, 255], float."""
    probs: np.ndarray
    class_names: list[str] | None = None

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        self.normals = np.asarray(self.normals, dtype=np.float64).reshape(-1, 3)
        self.colors = np.asarray(self.colors, dtype=np.float64).reshape(-1, 3)
        self.probs = np.asarray(self.probs, dtype=np.float64)
        if self.probs.ndim != 2 or len(self.probs) != len(self.vertices):
            raise ValueError("probs must have one row per vertex")
        n = len(self.vertices)
        if len(self.normals) != n or len(self.colors) != n:
            raise ValueError("normals and colors must have one row per vertex")
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= n):
            raise ValueError("triangle index out of range")

    @property
    def num_classes(self) -> int:
        return self.probs.shape[1]

    @property
    def labels(self) -> np.ndarray:
        # np.argmax returns the first maximum, i.e. ties go to the lowest class id
        return np.argmax(self.probs, axis=1)

    @property
    def confidence(self) -> np.ndarray:
        return self.probs.max(axis=1)

    def __len__(self):
        return len(self.vertices)

    def replace(self, **changes) -> SemanticMesh:
        return dataclasses.replace(self, **changes)


def integrate_frame(vol: TsdfVolume, depth: np.ndarray, color: np.ndarray | None,
                    pose: Pose, k: Intrinsics) -> TsdfVolume:
    """Fuse one depth (and optional color) frame into ``vol`` in place.

    Each voxel projecting onto a valid depth pixel gets the sample
    ``clamp((depth - z_cam) / truncation, -1, 1)`` averaged in with weight 1,
    unless it lies more than one truncation behind the surface.
    """
    if not (np.all(np.isfinite(pose.rotation)) and np.all(np.isfinite(pose.translation))):
        raise ValueError("rejected frame: non-finite pose")
    depth = np.asarray(depth)
    if depth.shape != k.shape:
        raise ValueError(f"depth shape {depth.shape} does not match intrinsics {k.shape}")
    if color is not None and np.asarray(color).shape[:2] != k.shape:
        raise ValueError("color image does not match intrinsics")
    z_img = depth_to_meters(depth, k)

    x, y, z = vol.camera_coords(pose)
    with np.errstate(divide="ignore", invalid="ignore"):
        u = np.rint(x * k.fx / z + k.cx)
        v = np.rint(y * k.fy / z + k.cy)
    inside = (z > 0) & (u >= 0) & (u < k.width) & (v >= 0) & (v < k.height)
    ui = u[inside].astype(np.int64)
    vi = v[inside].astype(np.int64)
    d = z_img[vi, ui]
    sdf = d - z[inside]
    upd = (d > 0) & (sdf > -vol.truncation)

    flat = np.flatnonzero(inside)[upd]
    sample = np.clip(sdf[upd] / vol.truncation, -1.0, 1.0)
    tsdf = vol.tsdf.reshape(-1)
    weight = vol.weight.reshape(-1)
    w_old = weight[flat].astype(np.float64)
    w_new = w_old + 1.0
    tsdf[flat] = ((tsdf[flat] * w_old + sample) / w_new).astype(np.float32)
    if color is not None:
        rgb = np.asarray(color, dtype=np.float64)[vi[upd], ui[upd], :3]
        col = vol.color.reshape(-1, 3)
        col[flat] = ((col[flat] * w_old[:, None] + rgb) / w_new[:, None]).astype(np.float32)
    weight[flat] = np.minimum(w_new, vol.w_max).astype(np.float32)
    return vol


def trilinear(grid: np.ndarray, idx: np.ndarray) -> np.ndarray:
    """Trilinearly sample ``grid`` (shape (nx, ny, nz, ...)) at continuous index
    coordinates ``idx`` (shape (N, 3)); coordinates are clamped to the grid."""
    idx = np.asarray(idx, dtype=np.float64)
    hi = np.array(grid.shape[:3]) - 1
    idx = np.clip(idx, 0, hi)
    i0 = np.minimum(np.floor(idx).astype(np.int64), np.maximum(hi - 1, 0))
    f = idx - i0
    out = 0.0
    for dx in (0, 1):
        wx = f[:, 0] if dx else 1.0 - f[:, 0]
        for dy in (0, 1):
            wy = f[:, 1] if dy else 1.0 - f[:, 1]
            for dz in (0, 1):
                wz = f[:, 2] if dz else 1.0 - f[:, 2]
                w = wx * wy * wz
                val = grid[i0[:, 0] + dx, i0[:, 1] + dy, i0[:, 2] + dz].astype(np.float64)
                out = out + (w.reshape((-1,) + (1,) * (val.ndim - 1)) * val)
    return out


@numba.njit(cache=True)
def _sample(tsdf, weight, x, y, z):
    """Trilinear tsdf at index coords; returns (value, ok). ok is False when
    any of the 8 corners is unobserved or the point is outside the grid."""
    nx, ny, nz = tsdf.shape
    if x < 0.0 or y < 0.0 or z < 0.0 or x > nx - 1 or y > ny - 1 or z > nz - 1:
        return 0.0, False
    i = min(int(x), nx - 2)
    j = min(int(y), ny - 2)
    k = min(int(z), nz - 2)
    fx = x - i
    fy = y - j
    fz = z - k
    acc = 0.0
    for dx in range(2):
        wx = fx if dx else 1.0 - fx
        for dy in range(2):
            wy = fy if dy else 1.0 - fy
            for dz in range(2):
                if weight[i + dx, j + dy, k + dz] <= 0.0:
                    return 0.0, False
                wz = fz if dz else 1.0 - fz
                acc += wx * wy * wz * tsdf[i + dx, j + dy, k + dz]
    return acc, True


@numba.njit(cache=True)
def _march(tsdf, weight, origin_idx, dirs, step, t_max, out_pts, out_nrm, out_ok, out_nok):
    """March rays in index space. ``dirs`` are unit directions (index units)."""
    nx, ny, nz = tsdf.shape
    lo = np.zeros(3)
    hi = np.array([nx - 1.0, ny - 1.0, nz - 1.0])
    for r in range(dirs.shape[0]):
        d = dirs[r]
        # clip the ray against the voxel-center box
        t0 = 0.0
        t1 = t_max
        for a in range(3):
            if abs(d[a]) < 1e-12:
                if origin_idx[a] < lo[a] or origin_idx[a] > hi[a]:
                    t0 = 1.0
                    t1 = 0.0
            else:
                ta = (lo[a] - origin_idx[a]) / d[a]
                tb = (hi[a] - origin_idx[a]) / d[a]
                if ta > tb:
                    ta, tb = tb, ta
                t0 = max(t0, ta)
                t1 = min(t1, tb)
        if t0 > t1:
            continue
        t = t0
        prev_ok = False
        prev_val = 0.0
        prev_t = t
        while t <= t1:
            val, ok = _sample(tsdf, weight, origin_idx[0] + t * d[0],
                              origin_idx[1] + t * d[1], origin_idx[2] + t * d[2])
            if ok and prev_ok and prev_val > 0.0 and val <= 0.0:
                denom = prev_val - val
                ts = prev_t + (t - prev_t) * (prev_val / denom if denom > 0 else 0.0)
                px = origin_idx[0] + ts * d[0]
                py = origin_idx[1] + ts * d[1]
                pz = origin_idx[2] + ts * d[2]
                out_pts[r, 0] = px
                out_pts[r, 1] = py
                out_pts[r, 2] = pz
                out_ok[r] = True
                g0 = _sample(tsdf, weight, px + 1.0, py, pz)
                g1 = _sample(tsdf, weight, px - 1.0, py, pz)
                g2 = _sample(tsdf, weight, px, py + 1.0, pz)
                g3 = _sample(tsdf, weight, px, py - 1.0, pz)
                g4 = _sample(tsdf, weight, px, py, pz + 1.0)
                g5 = _sample(tsdf, weight, px, py, pz - 1.0)
                if g0[1] and g1[1] and g2[1] and g3[1] and g4[1] and g5[1]:
                    gx = g0[0] - g1[0]
                    gy = g2[0] - g3[0]
                    gz = g4[0] - g5[0]
                    norm = np.sqrt(gx * gx + gy * gy + gz * gz)
                    if norm > 1e-12:
                        out_nrm[r, 0] = gx / norm
                        out_nrm[r, 1] = gy / norm
                        out_nrm[r, 2] = gz / norm
                        out_nok[r] = True
                break
            prev_ok = ok
            prev_val = val
            prev_t = t
            t += step


def raycast_surface(vol: TsdfVolume, pose: Pose, k: Intrinsics) -> tuple[PointMap, NormalMap]:
    """Predict the surface seen from ``pose``: world-frame points and normals.

    Rays are marched in half-voxel steps; the first positive-to-negative tsdf
    transition is refined by linear interpolation. Normals follow the tsdf
    gradient and so point out of the surface, toward free space.
    """
    if vol.is_empty():
        raise ValueError("cannot ray-cast an empty volume")
    v, u = np.indices(k.shape, dtype=np.float64)
    rays_cam = np.stack([(u - k.cx) / k.fx, (v - k.cy) / k.fy, np.ones_like(u)], axis=-1)
    rays = pose.rotate(rays_cam.reshape(-1, 3))
    rays /= np.linalg.norm(rays, axis=1, keepdims=True)
    origin_idx = vol.world_to_index(pose.translation)

    n = rays.shape[0]
    pts = np.full((n, 3), np.nan)
    nrm = np.full((n, 3), np.nan)
    ok = np.zeros(n, dtype=bool)
    nok = np.zeros(n, dtype=bool)
    t_max = float(np.linalg.norm(vol.dims)) + np.linalg.norm(origin_idx) + 2.0 * max(vol.dims)
    _march(vol.tsdf, vol.weight, origin_idx, np.ascontiguousarray(rays), 0.5, t_max,
           pts, nrm, ok, nok)

    pts[ok] = vol.index_to_world(pts[ok])
    nok &= ok
    nrm[~nok] = np.nan
    h, w = k.shape
    return (PointMap(pts.reshape(h, w, 3), ok.reshape(h, w)),
            NormalMap(nrm.reshape(h, w, 3), nok.reshape(h, w)))


def _tsdf_gradient(vol: TsdfVolume, idx: np.ndarray) -> np.ndarray:
    """Central-difference tsdf gradient at continuous index coordinates."""
    grad = np.empty((len(idx), 3))
    for a in range(3):
        off = np.zeros(3)
        off[a] = 0.5
        grad[:, a] = trilinear(vol.tsdf, idx + off) - trilinear(vol.tsdf, idx - off)
    return grad


def extract_mesh(vol: TsdfVolume, class_names: list[str] | None = None) -> SemanticMesh:
    """Marching-cubes mesh of the tsdf zero level set with interpolated attributes.

    Only cubes whose eight corners have been observed are polygonized. Vertex
    color and label distribution are trilinear blends of the surrounding
    voxels (distributions renormalized); normals follow the tsdf gradient.
    An empty isosurface gives an empty mesh.
    """
    C = vol.num_classes
    empty = SemanticMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64), np.zeros((0, 3)),
                         np.zeros((0, 3)), np.zeros((0, C)), class_names)
    observed = vol.weight > 0
    # a cube is processed only when all 8 corners are observed
    cube_ok = (observed[:-1, :-1, :-1] & observed[1:, :-1, :-1] & observed[:-1, 1:, :-1]
               & observed[:-1, :-1, 1:] & observed[1:, 1:, :-1] & observed[1:, :-1, 1:]
               & observed[:-1, 1:, 1:] & observed[1:, 1:, 1:])
    if not cube_ok.any():
        return empty
    tsdf_obs = vol.tsdf[observed]
    if tsdf_obs.min() > 0 or tsdf_obs.max() < 0:
        return empty
    # skimage gates the cube with lower corner (i, j, k) on mask[i + 1, j + 1, k + 1]
    mask = np.zeros(vol.dims, dtype=bool)
    mask[1:, 1:, 1:] = cube_ok
    try:
        verts, faces, mc_normals, _ = marching_cubes(vol.tsdf, level=0.0, mask=mask,
                                                     allow_degenerate=False)
    except (ValueError, RuntimeError):
        return empty
    if len(faces) == 0:
        return empty
    verts = verts.astype(np.float64)

    grad = _tsdf_gradient(vol, verts)
    norm = np.linalg.norm(grad, axis=1)
    fallback = norm < 1e-12
    normals = np.where(fallback[:, None], -mc_normals, grad / np.where(fallback, 1.0, norm)[:, None])
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)

    colors = trilinear(vol.color, verts)
    probs = np.maximum(trilinear(vol.probs, verts), 0.0)
    probs /= probs.sum(axis=1, keepdims=True)
    return SemanticMesh(vol.index_to_world(verts), faces.astype(np.int64), normals,
                        colors, probs, class_names)
