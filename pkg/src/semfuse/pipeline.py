"""End-to-end steps: fuse a dataset, refine a mesh, project and evaluate labels."""
from __future__ import annotations

import dataclasses
import logging
import time
from collections import defaultdict

import numpy as np

from .config import RunConfig, volume_geometry
from .crf import refine_mesh
from .evaluation import ConfusionMatrix, Metrics, metrics
from .fusion import fuse_labels
from .geometry import Intrinsics, Pose, backproject
from .io import Dataset
from .query import OctreeIndex, build_octree, raycast_many
from .tracking import TrackingLost, icp_align
from .tsdf import SemanticMesh, TsdfVolume, extract_mesh, integrate_frame, raycast_surface

__all__ = ["FuseResult", "fuse_dataset", "refine", "project_labels", "evaluate_keyframes"]

log = logging.getLogger(__name__)


@dataclasses.dataclass
class FuseResult:
    volume: TsdfVolume
    mesh: SemanticMesh
    poses: dict[int, Pose]
    lost_frames: list[int]
    low_confidence_frames: list[int]
    fusion_frames: list[int]
    timings: dict[str, float]

    @property
    def lost_fraction(self) -> float:
        return len(self.lost_frames) / max(len(self.poses), 1)


def fuse_dataset(ds: Dataset, cfg: RunConfig, frame_ids=None) -> FuseResult:
    """Track, integrate and label-fuse every frame, then extract the mesh.

    Label maps are fused on every ``cfg.fusion_stride``-th frame of the
    sequence, counting from the first. In ``icp`` mode the first frame takes
    its pose from ``poses.txt`` when available (identity otherwise) and a
    frame whose tracking is lost keeps the previous pose.
    """
    if ds.num_classes is None:
        raise FileNotFoundError(f"{ds.root / 'classes.txt'} not found")
    ids = list(ds.frame_ids if frame_ids is None else frame_ids)
    if not ids:
        raise ValueError(f"dataset {ds.root} has no frames")
    k = ds.intrinsics
    timings: dict[str, float] = defaultdict(float)

    if cfg.tracking_mode == "file":
        given = ds.poses()
        missing = [i for i in ids if i not in given]
        if missing:
            raise ValueError(f"poses.txt has no pose for frames {missing[:5]}")
    else:
        path = ds.root / "poses.txt"
        given = ds.poses() if path.exists() else {}

    first_pose = given.get(ids[0], Pose.identity())
    first_depth = ds.depth(ids[0])
    pm = backproject(first_depth, k)
    dims, origin = volume_geometry(cfg.volume, ds.bounds(),
                                   first_pose.apply(pm.points[pm.valid]))
    vol = TsdfVolume(dims, cfg.volume.voxel_size, origin, cfg.volume.truncation,
                     ds.num_classes, cfg.volume.w_max)
    log.info("volume %s voxels of %.4g m at origin %s", dims, vol.voxel_size, np.round(origin, 4))

    poses: dict[int, Pose] = {}
    lost: list[int] = []
    low: list[int] = []
    fused: list[int] = []
    prev = first_pose
    for n, fid in enumerate(ids):
        t0 = time.perf_counter()
        depth = ds.depth(fid) if n else first_depth
        color = ds.color(fid)
        timings["load"] += time.perf_counter() - t0

        t0 = time.perf_counter()
        if cfg.tracking_mode == "file":
            pose = given[fid]
        elif n == 0:
            pose = first_pose
        else:
            try:
                model_pts, model_nrm = raycast_surface(vol, prev, k)
                res = icp_align(model_pts, model_nrm, depth, k, prev, cfg.icp)
                pose = res.pose
                if res.low_confidence:
                    low.append(fid)
            except TrackingLost as exc:
                log.warning("frame %d: tracking lost (%s); keeping previous pose", fid, exc)
                lost.append(fid)
                pose = prev
        poses[fid] = pose
        timings["tracking"] += time.perf_counter() - t0

        t0 = time.perf_counter()
        integrate_frame(vol, depth, color, pose, k)
        timings["integration"] += time.perf_counter() - t0

        if n % cfg.fusion_stride == 0:
            t0 = time.perf_counter()
            probs = ds.probmap(fid)
            if probs is None:
                log.warning("frame %d: no probability map, label fusion skipped", fid)
            else:
                count = fuse_labels(vol, probs, pose, k, depth=depth, tau_label=cfg.tau_label)
                fused.append(fid)
                log.info("label fusion at frame %d: %d voxels updated", fid, count)
            timings["label_fusion"] += time.perf_counter() - t0
        prev = pose

    t0 = time.perf_counter()
    mesh = extract_mesh(vol, ds.class_names)
    timings["meshing"] += time.perf_counter() - t0
    return FuseResult(vol, mesh, poses, lost, low, fused, dict(timings))


def refine(mesh: SemanticMesh, cfg: RunConfig) -> tuple[SemanticMesh, int]:
    """CRF-refined mesh and the number of vertices whose label changed."""
    if len(mesh) == 0:
        return mesh, 0
    before = mesh.labels
    out = refine_mesh(mesh, cfg.crf)
    return out, int(np.count_nonzero(out.labels != before))


def camera_rays(pose: Pose, k: Intrinsics) -> tuple[np.ndarray, np.ndarray]:
    v, u = np.indices(k.shape, dtype=np.float64)
    cam = np.stack([(u - k.cx) / k.fx, (v - k.cy) / k.fy, np.ones_like(u)], axis=-1).reshape(-1, 3)
    return pose.translation[None, :], pose.rotate(cam)


def project_labels(mesh: SemanticMesh, index: OctreeIndex, pose: Pose, k: Intrinsics,
                   miss_label: int = 255) -> np.ndarray:
    """Label image of the mesh seen from ``pose``, one semantic ray per pixel."""
    origins, dirs = camera_rays(pose, k)
    hits = raycast_many(index, mesh, origins, dirs)
    return np.where(hits.hit, hits.label, miss_label).reshape(k.shape)


def evaluate_keyframes(mesh: SemanticMesh, ds: Dataset, keyframes, cfg: RunConfig,
                       poses: dict[int, Pose] | None = None) -> tuple[ConfusionMatrix, Metrics]:
    """Confusion matrix and metrics of mesh label projections against the
    dataset's ground-truth label images."""
    keyframes = list(keyframes)
    if not keyframes:
        raise ValueError("no keyframes given")
    poses = ds.poses() if poses is None else poses
    for fid in keyframes:
        if fid not in poses:
            raise ValueError(f"no pose for keyframe {fid}")
        if not ds.path("label", fid).exists():
            raise FileNotFoundError(f"ground-truth labels for keyframe {fid} not found: "
                                    f"{ds.path('label', fid)}")
    if len(mesh.faces) == 0:
        raise ValueError("mesh has no triangles")
    C = ds.num_classes or mesh.num_classes
    index = build_octree(mesh, cfg.octree_max_depth, cfg.octree_leaf_capacity)
    cm = ConfusionMatrix(C)
    for fid in keyframes:
        pred = project_labels(mesh, index, poses[fid], ds.intrinsics, miss_label=-1)
        cm.add(pred, ds.label(fid), cfg.ignore_label)
    return cm, metrics(cm)
