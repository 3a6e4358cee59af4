"""Semantic volumetric fusion: TSDF reconstruction with per-voxel Bayesian
label fusion, mesh CRF refinement and octree-accelerated semantic ray queries."""
from .crf import CrfParams, brute_force_map, crf_energy, kernel, mean_field_refine, refine_mesh
from .evaluation import ConfusionMatrix, Metrics, metrics
from .fusion import ProbMap, bayes_update, fuse_labels
from .geometry import Intrinsics, Pose, backproject, compute_normals, project
from .query import (ProfileTable, ResponseProfile, build_octree, interaction_response,
                    raycast_many, semantic_raycast)
from .tracking import IcpConfig, TrackingLost, icp_align
from .tsdf import SemanticMesh, TsdfVolume, extract_mesh, integrate_frame, raycast_surface

__version__ = "0.1.0"
