import dataclasses

import numpy as np
import pytest

from semfuse import io
from semfuse.cli import main
from semfuse.config import load_config
from semfuse.pipeline import fuse_dataset
from semfuse.synth import NoiseModel, export_sequence, surface_labels, write_scene
from semfuse.tsdf import SemanticMesh

from conftest import grid_patch, small_k, wall_scene

WALL_BOUNDS = (np.array([-1.0, -0.8, 1.2]), np.array([1.0, 0.8, 1.8]))
COARSE = ["--set", "volume.voxel_size=0.04"]


def wall(frames=2, noise=None):
    return dataclasses.replace(wall_scene(frames=frames, noise=noise), bounds=WALL_BOUNDS)


@pytest.fixture(scope="module")
def wall_data(tmp_path_factory):
    root = tmp_path_factory.mktemp("wall")
    return export_sequence(wall(frames=3), root / "ds")


@pytest.fixture(scope="module")
def wall_mesh(wall_data, tmp_path_factory):
    out = tmp_path_factory.mktemp("mesh") / "wall.ply"
    assert main(["fuse", str(wall_data), "--mesh", str(out), "--set", "fusion.stride=1", *COARSE]) == 0
    return out


def test_synth(tmp_path, capsys):
    write_scene(tmp_path / "s.scene", wall(frames=2))
    assert main(["synth", str(tmp_path / "s.scene"), str(tmp_path / "ds")]) == 0
    assert "wrote 2 frames" in capsys.readouterr().out
    assert (tmp_path / "ds" / "prob" / "000001.sprb").exists()


def test_synth_missing_and_malformed(tmp_path, capsys):
    assert main(["synth", str(tmp_path / "none.scene"), str(tmp_path / "ds")]) == 2
    assert "not found" in capsys.readouterr().err
    (tmp_path / "bad.scene").write_text("[scene]\nseed = 1\n[camera]\nintrinsics = 1 2\n")
    assert main(["synth", str(tmp_path / "bad.scene"), str(tmp_path / "ds")]) == 2
    assert "bad.scene:4" in capsys.readouterr().err


def test_fuse_reports_stages(wall_data, tmp_path, capsys):
    out = tmp_path / "m.ply"
    vol = tmp_path / "v.svol"
    assert main(["fuse", str(wall_data), "--mesh", str(out), "--volume", str(vol), *COARSE]) == 0
    text = capsys.readouterr().out
    assert "frames: 3" in text and "label-fusion events: 1" in text
    for stage in ("tracking", "integration", "label_fusion", "meshing"):
        assert stage in text
    assert io.load_volume(vol).dims == (50, 40, 15)
    assert len(io.read_ply(out)) > 100


def test_fuse_without_poses_in_file_mode(wall_data, tmp_path, capsys):
    import shutil
    root = tmp_path / "ds"
    shutil.copytree(wall_data, root)
    (root / "poses.txt").unlink()
    assert main(["fuse", str(root), "--mesh", str(tmp_path / "m.ply"), *COARSE]) == 2
    assert "poses.txt" in capsys.readouterr().err


def test_fusion_stride_counts_events(tmp_path):
    spec = wall(frames=120)
    root = export_sequence(spec, tmp_path / "ds")
    cfg = load_config(overrides=["volume.voxel_size=0.05", "fusion.stride=12"])
    res = fuse_dataset(io.Dataset(root), cfg)
    assert res.fusion_frames == list(range(0, 120, 12))


def test_bad_config_is_input_error(wall_data, tmp_path, capsys):
    assert main(["fuse", str(wall_data), "--mesh", str(tmp_path / "m.ply"),
                 "--set", "crf.iters=0"]) == 2
    assert "error:" in capsys.readouterr().err


def test_refine_uniform_mesh_changes_nothing(tmp_path, capsys):
    mesh = grid_patch((0, 0, 0), (1, 0, 0), (0, 1, 0), 10, 1, 3, (50, 50, 50))
    io.write_ply(tmp_path / "in.ply", mesh)
    assert main(["refine", str(tmp_path / "in.ply"), str(tmp_path / "out.ply")]) == 0
    assert "labels changed: 0" in capsys.readouterr().out
    np.testing.assert_array_equal(io.read_ply(tmp_path / "out.ply").labels, 1)


def test_refine_needs_labels(tmp_path, capsys):
    (tmp_path / "in.ply").write_text("ply\nformat ascii 1.0\nelement vertex 1\n"
                                     "property float x\nproperty float y\nproperty float z\n"
                                     "end_header\n0 0 0\n")
    assert main(["refine", str(tmp_path / "in.ply"), str(tmp_path / "out.ply")]) == 2
    assert "label" in capsys.readouterr().err


def test_eval_self_projection_is_perfect(wall_mesh, wall_data, capsys):
    assert main(["eval", str(wall_mesh), str(wall_data), "--keyframes", "0,2", "--per-class"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == "pixel_acc mean_acc mean_iu fw_iu"
    pix, macc, miu, fw = (float(v) for v in lines[1].split())
    assert pix > 0.99 and miu > 0.98
    assert lines[2].startswith("0 left") and lines[3].startswith("1 right")


def test_eval_input_errors(wall_mesh, wall_data, tmp_path, capsys):
    assert main(["eval", str(wall_mesh), str(wall_data), "--keyframes", ""]) == 2
    assert "empty keyframe" in capsys.readouterr().err
    assert main(["eval", str(wall_mesh), str(wall_data), "--keyframes", "0,9"]) == 2
    assert "keyframe 9" in capsys.readouterr().err


def test_raycast(wall_mesh, tmp_path, capsys):
    q = tmp_path / "q.txt"
    q.write_text("# origin direction\n-0.5 0 0 0 0 1\n0.5 0.1 0 0 0 1\n0 0 0 0 0 -1\n")
    prof = tmp_path / "p.txt"
    prof.write_text("0 0.2 0 dent thud\n1 0.9 1 hole glass\n")
    assert main(["raycast", str(wall_mesh), str(q), "--profiles", str(prof)]) == 0
    rows = [line.split() for line in capsys.readouterr().out.splitlines()]
    assert len(rows) == 3 and rows[2] == ["miss"]
    assert rows[0][4] == "left" and rows[0][6] == "bounce"
    assert rows[1][4] == "right" and rows[1][6] == "break"
    assert abs(float(rows[0][3]) - 1.5) < 0.01 and abs(float(rows[0][2]) - 1.5) < 0.01


def test_raycast_empty_and_bad_queries(wall_mesh, tmp_path, capsys):
    q = tmp_path / "q.txt"
    q.write_text("")
    assert main(["raycast", str(wall_mesh), str(q)]) == 0
    assert capsys.readouterr().out == ""
    q.write_text("0 0 0 0 0 1\n0 0 0 0 0 0\n")
    assert main(["raycast", str(wall_mesh), str(q)]) == 2
    assert "q.txt:2" in capsys.readouterr().err


def test_zero_noise_fusion_labels_vertices_correctly(tmp_path):
    from semfuse.synth import read_scene
    from pathlib import Path
    spec = read_scene(Path(__file__).resolve().parents[1] / "benchmarks" / "noisy_desk.scene")
    spec = dataclasses.replace(spec, noise=NoiseModel(), intrinsics=small_k(160, 120, 100.0))
    root = export_sequence(spec, tmp_path / "ds")
    vs = 0.02
    cfg = load_config(overrides=[f"volume.voxel_size={vs}", "fusion.stride=2"])
    mesh = fuse_dataset(io.Dataset(root), cfg).mesh
    truth, other = surface_labels(spec, mesh.vertices)
    seen = mesh.probs.max(axis=1) > 1.0 / spec.num_classes + 1e-6
    keep = (other > vs) & seen
    acc = np.mean(mesh.labels[keep] == truth[keep])
    assert keep.mean() > 0.8
    assert acc >= 0.99, acc
