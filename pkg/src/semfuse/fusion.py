"""Bayesian fusion of per-frame class-probability maps into the voxel volume."""
from __future__ import annotations

import dataclasses

import numpy as np

from .geometry import Intrinsics, Pose, depth_to_meters
from .tsdf import TsdfVolume, raycast_surface

__all__ = ["ProbMap", "EPS", "bayes_update", "fuse_labels", "argmax_label", "check_distribution"]

EPS = 1e-6


def check_distribution(d, atol: float = 1e-6) -> np.ndarray:
    """Validate label distribution(s) along the last axis and return them as float64."""
    d = np.asarray(d, dtype=np.float64)
    if np.any(~np.isfinite(d)) or np.any(d < 0):
        raise ValueError("label distribution has negative or non-finite entries")
    if np.any(np.abs(d.sum(axis=-1) - 1.0) > atol):
        raise ValueError("label distribution does not sum to 1")
    return d


@dataclasses.dataclass
class ProbMap:
    """Per-pixel class probabilities, shape (height, width, C)."""

    probs: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=np.float32)
        if p.ndim != 3 or p.shape[2] < 1:
            raise ValueError("probability map must have shape (height, width, C)")
        if np.any(~np.isfinite(p)) or np.any(p < 0):
            raise ValueError("probability map has negative or non-finite entries")
        s = p.sum(axis=2, keepdims=True)
        if np.any(s <= 0):
            raise ValueError("probability map has an all-zero pixel")
        # leave already-normalized pixels untouched so stored maps round-trip bit-exactly
        off = np.abs(s - 1.0) > 1e-6
        self.probs = np.where(off, p / s, p) if off.any() else p

    @property
    def height(self) -> int:
        return self.probs.shape[0]

    @property
    def width(self) -> int:
        return self.probs.shape[1]

    @property
    def num_classes(self) -> int:
        return self.probs.shape[2]

    def argmax(self) -> np.ndarray:
        return np.argmax(self.probs, axis=2)


def bayes_update(prior, likelihood) -> np.ndarray:
    """Posterior ``prior * likelihood / Z`` along the last axis.

    Works on single distributions or stacked arrays of shape (..., C). When
    the product vanishes (disjoint supports) the prior is floored at ``EPS``
    and the product renormalized, so the result follows the likelihood.
    """
    prior = np.asarray(prior, dtype=np.float64)
    likelihood = np.asarray(likelihood, dtype=np.float64)
    if prior.shape[-1] != likelihood.shape[-1]:
        raise ValueError(f"class count mismatch: {prior.shape[-1]} vs {likelihood.shape[-1]}")
    prod = prior * likelihood
    z = prod.sum(axis=-1, keepdims=True)
    dead = z[..., 0] <= 0
    if np.any(dead):
        floored = np.broadcast_to(np.maximum(prior, EPS), prod.shape) * likelihood
        prod = np.where(dead[..., None], floored, prod)
        z = prod.sum(axis=-1, keepdims=True)
    return prod / z


def argmax_label(d) -> tuple[int, float]:
    """Most probable class and its probability; ties go to the lowest id."""
    d = np.asarray(d, dtype=np.float64)
    i = int(np.argmax(d))
    return i, float(d[i])


def fuse_labels(vol: TsdfVolume, pm: ProbMap, pose: Pose, k: Intrinsics,
                depth: np.ndarray | None = None, tau_label: float | None = None,
                eps: float = EPS) -> int:
    """Update near-surface voxel distributions visible in this frame; in place.

    A voxel is updated when it has been observed, its tsdf magnitude is below
    ``tau_label`` (meters, default half the truncation), it projects inside
    the image, and it is not behind the frame's depth by more than the
    truncation. ``depth`` is the raw depth of the frame; without it the
    depth predicted by ray-casting the volume is used. Prior and likelihood
    are floored at ``eps`` before the product so that no class is killed for
    good, by an over-confident input or by float32 underflow.
    The probability map may be a fixed integer downscale of the image.

    Returns the number of voxels updated.
    """
    if pm.num_classes != vol.num_classes:
        raise ValueError(f"class count mismatch: probability map has {pm.num_classes}, "
                         f"volume has {vol.num_classes}")
    scale = k.width // pm.width
    if scale < 1 or pm.width * scale != k.width or pm.height * scale != k.height:
        raise ValueError(f"probability map {pm.width}x{pm.height} is not an integer "
                         f"downscale of {k.width}x{k.height}")
    tau_label = 0.5 * vol.truncation if tau_label is None else float(tau_label)

    if depth is None:
        pts, _ = raycast_surface(vol, pose, k)
        z_img = np.where(pts.valid, pose.inverse().apply(np.nan_to_num(pts.points))[..., 2], 0.0)
    else:
        if np.asarray(depth).shape != k.shape:
            raise ValueError("depth image does not match intrinsics")
        z_img = depth_to_meters(depth, k)

    near = (vol.weight > 0) & (np.abs(vol.tsdf) * vol.truncation < tau_label)
    cand = np.flatnonzero(near)
    if cand.size == 0:
        return 0
    centers = vol.index_to_world(np.stack(np.unravel_index(cand, vol.dims), axis=1))
    x, y, z = pose.inverse().apply(centers).T
    with np.errstate(divide="ignore", invalid="ignore"):
        u = np.rint(x * k.fx / z + k.cx)
        v = np.rint(y * k.fy / z + k.cy)
    inside = (z > 0) & (u >= 0) & (u < k.width) & (v >= 0) & (v < k.height)
    cand, u, v, z = cand[inside], u[inside].astype(np.int64), v[inside].astype(np.int64), z[inside]
    d = z_img[v, u]
    visible = (d > 0) & (z <= d + vol.truncation)
    cand, u, v = cand[visible], u[visible], v[visible]
    if cand.size == 0:
        return 0

    like = np.maximum(pm.probs[v // scale, u // scale].astype(np.float64), eps)
    like /= like.sum(axis=1, keepdims=True)
    probs = vol.probs.reshape(-1, vol.num_classes)
    prior = np.maximum(probs[cand].astype(np.float64), eps)
    probs[cand] = bayes_update(prior, like).astype(np.float32)
    return int(cand.size)
