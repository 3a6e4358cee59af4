"""Frame-to-model camera tracking with coarse-to-fine point-to-plane ICP."""
from __future__ import annotations

import dataclasses
import logging

import numpy as np
from scipy.spatial.transform import Rotation

from .geometry import Intrinsics, NormalMap, PointMap, Pose, backproject, compute_normals

__all__ = ["IcpConfig", "IcpResult", "TrackingLost", "icp_align", "load_trajectory"]

log = logging.getLogger(__name__)


class TrackingLost(RuntimeError):
    """Too little data to estimate the pose; the caller should keep the previous pose."""


@dataclasses.dataclass(frozen=True)
class IcpConfig:
    levels: int = 3
    iterations: tuple[int, ...] = (10, 5, 4)
    """Iterations per level, coarse to fine."""
    dist_gate: float = 0.10
    angle_gate_deg: float = 30.0
    convergence: float = 1e-5
    """Stop a level once the update (radians + meters) is smaller than this."""
    min_valid_pixels: int = 1000
    degeneracy_ratio: float = 1e-6
    """Normal-equation eigenvalues below this fraction of the largest are unobservable."""

    def __post_init__(self):
        object.__setattr__(self, "iterations", tuple(int(i) for i in self.iterations))
        if self.levels < 1:
            raise ValueError("levels must be >= 1")
        if len(self.iterations) != self.levels:
            raise ValueError(f"need {self.levels} iteration counts, got {len(self.iterations)}")
        if any(i < 1 for i in self.iterations):
            raise ValueError("iteration counts must be >= 1")
        if not (self.dist_gate > 0 and self.angle_gate_deg > 0):
            raise ValueError("gates must be positive")
        if self.convergence <= 0:
            raise ValueError("convergence threshold must be positive")


@dataclasses.dataclass
class IcpResult:
    pose: Pose
    low_confidence: bool
    residuals: list[list[float]]
    """Mean squared point-to-plane residual per level (coarse to fine), one
    entry for the start pose and one per accepted iteration."""
    correspondences: int
    converged: bool
    min_eigen_ratio: float


class _Frame:
    def __init__(self, pm: PointMap, nm: NormalMap):
        ok = pm.valid & nm.valid
        self.points = pm.points[ok]
        self.normals = nm.normals[ok]


class _Model:
    def __init__(self, points: PointMap, normals: NormalMap, init: Pose, k: Intrinsics):
        self.points = points.points
        self.normals = normals.normals
        self.valid = points.valid & normals.valid
        self.world_to_cam = init.inverse()
        self.k = k


def _correspond(frame: _Frame, model: _Model, T: Pose, cfg: IcpConfig):
    """Projective association with distance and normal-angle gates.

    Returns world-frame frame points, model points, model normals.
    """
    p = T.apply(frame.points)
    n_f = T.rotate(frame.normals)
    pc = model.world_to_cam.apply(p)
    k = model.k
    with np.errstate(divide="ignore", invalid="ignore"):
        u = np.rint(pc[:, 0] * k.fx / pc[:, 2] + k.cx)
        v = np.rint(pc[:, 1] * k.fy / pc[:, 2] + k.cy)
    ok = (pc[:, 2] > 0) & (u >= 0) & (u < k.width) & (v >= 0) & (v < k.height)
    ui = u[ok].astype(np.int64)
    vi = v[ok].astype(np.int64)
    idx = np.flatnonzero(ok)
    good = model.valid[vi, ui]
    idx, ui, vi = idx[good], ui[good], vi[good]
    q = model.points[vi, ui]
    n_m = model.normals[vi, ui]
    p = p[idx]
    gate = np.linalg.norm(p - q, axis=1) < cfg.dist_gate
    cos_gate = np.cos(np.deg2rad(cfg.angle_gate_deg))
    gate &= np.einsum("ij,ij->i", n_f[idx], n_m) > cos_gate
    return p[gate], q[gate], n_m[gate]


def _residual(p, q, n) -> float:
    r = np.einsum("ij,ij->i", p - q, n)
    return float(np.mean(r * r)) if len(r) else np.inf


def _apply_twist(T: Pose, xi: np.ndarray, center: np.ndarray) -> Pose:
    """Left-compose a small motion: rotate by xi[:3] about ``center``, then translate by xi[3:]."""
    R = Rotation.from_rotvec(xi[:3])
    delta = Pose(R.as_quat(), center - R.apply(center) + xi[3:])
    return delta @ T


def icp_align(model_points: PointMap, model_normals: NormalMap, frame_depth: np.ndarray,
              k: Intrinsics, init: Pose, cfg: IcpConfig = IcpConfig()) -> IcpResult:
    """Estimate the camera pose of ``frame_depth`` against a predicted model view.

    ``model_points`` / ``model_normals`` are world-frame maps predicted at
    ``init`` (e.g. by ``raycast_surface``). The point-to-plane error
    ``sum(((T p - q) . n)^2)`` is minimized by Gauss-Newton over a twist,
    coarse to fine over a depth pyramid. A step that would increase the mean
    residual is halved (up to four times) or the level ends, so the residual
    never increases within a level.

    Raises :class:`TrackingLost` when the frame has fewer than
    ``cfg.min_valid_pixels`` valid pixels or fewer than 36 correspondences.
    Directions the data cannot constrain (e.g. sliding along a single plane)
    are left unchanged and flagged via ``low_confidence``.
    """
    frame_depth = np.asarray(frame_depth)
    if frame_depth.shape != k.shape:
        raise ValueError("frame depth does not match intrinsics")
    n_valid = int(np.count_nonzero(frame_depth > 0))
    if n_valid < cfg.min_valid_pixels:
        raise TrackingLost(f"frame has {n_valid} valid depth pixels (< {cfg.min_valid_pixels})")
    model = _Model(model_points, model_normals, init, k)

    T = init
    residuals: list[list[float]] = []
    converged = False
    min_ratio = 1.0
    n_corr = 0
    for level in reversed(range(cfg.levels)):
        f = 2 ** level
        kl = k.downsampled(f)
        pm = backproject(frame_depth[::f, ::f], kl)
        frame = _Frame(pm, compute_normals(pm))
        p, q, n = _correspond(frame, model, T, cfg)
        if len(p) < 36:
            raise TrackingLost(f"{len(p)} correspondences at pyramid level {level} (< 36)")
        err = _residual(p, q, n)
        hist = [err]
        converged = False
        for _ in range(cfg.iterations[cfg.levels - 1 - level]):
            center = p.mean(axis=0)
            J = np.hstack([np.cross(p - center, n), n])
            r = np.einsum("ij,ij->i", p - q, n)
            A = J.T @ J
            b = -J.T @ r
            w, V = np.linalg.eigh(A)
            keep = w > cfg.degeneracy_ratio * w[-1]
            min_ratio = float(w[0] / w[-1]) if w[-1] > 0 else 0.0
            xi = V[:, keep] @ ((V[:, keep].T @ b) / w[keep])

            step = xi
            accepted = False
            for _halving in range(5):
                T_new = _apply_twist(T, step, center)
                p2, q2, n2 = _correspond(frame, model, T_new, cfg)
                err2 = _residual(p2, q2, n2)
                if len(p2) >= 36 and err2 <= err:
                    accepted = True
                    break
                step = 0.5 * step
            if not accepted:
                converged = True  # no descent direction left at this level
                break
            T, p, q, n, err = T_new, p2, q2, n2, err2
            hist.append(err)
            if np.linalg.norm(step) < cfg.convergence:
                converged = True
                break
        residuals.append(hist)
        n_corr = len(p)

    degenerate = min_ratio < cfg.degeneracy_ratio
    low = degenerate or not converged
    if low:
        log.debug("ICP low confidence: converged=%s eigen ratio=%.3g", converged, min_ratio)
    return IcpResult(T, low, residuals, n_corr, converged, min_ratio)


def load_trajectory(path) -> dict[int, Pose]:
    """Read a ``frame_id tx ty tz qx qy qz qw`` trajectory file."""
    from .io import read_poses

    return read_poses(path)
