import dataclasses
from pathlib import Path

import numpy as np
import pytest

from semfuse import io
from semfuse.geometry import Pose
from semfuse.synth import (NoiseModel, Primitive, SceneFormatError, export_sequence, format_scene,
                           parse_scene, read_scene, render_frame, surface_labels)

from conftest import small_k, wall_scene

SCENE = Path(__file__).resolve().parents[1] / "benchmarks" / "noisy_desk.scene"


@pytest.fixture(scope="module")
def desk():
    spec = read_scene(SCENE)
    return dataclasses.replace(spec, intrinsics=small_k(80, 60, 50.0))


def test_zero_label_noise_argmax_is_ground_truth(desk):
    spec = dataclasses.replace(desk, noise=NoiseModel(label_noise=0.0, label_confidence=0.6))
    for i in (0, 10, 23):
        f = render_frame(spec, i)
        hit = f.labels != 255
        assert hit.mean() > 0.5
        np.testing.assert_array_equal(f.probs.probs.argmax(axis=2)[hit], f.labels[hit])
        np.testing.assert_allclose(f.probs.probs.max(axis=2)[hit], 0.6, atol=1e-6)


def test_single_plane_depth_is_exact():
    spec = wall_scene(z=1.5)
    f = render_frame(spec, 0)
    assert np.all(f.depth == 1500.0)
    # tilted camera: z of the hit equals the analytic ray-plane depth
    k = spec.intrinsics
    tilt = Pose.from_rotvec([0.2, 0, 0])
    f = render_frame(dataclasses.replace(spec, trajectory=[tilt]), 0)
    R = tilt.rotation_matrix
    v, u = np.indices(k.shape, dtype=np.float64)
    ray = np.stack([(u - k.cx) / k.fx, (v - k.cy) / k.fy, np.ones_like(u)], axis=-1)
    world_z = ray @ R[2]
    np.testing.assert_allclose(f.depth, 1500.0 / world_z, rtol=1e-12)


def test_label_flip_rate(desk):
    spec = dataclasses.replace(desk, noise=NoiseModel(label_noise=0.4, label_confidence=0.7))
    f = render_frame(spec, 0)
    hit = f.labels != 255
    wrong = f.probs.probs.argmax(axis=2)[hit] != f.labels[hit]
    assert abs(wrong.mean() - 0.4) < 0.03


def test_render_is_bit_exact_across_runs(desk):
    spec = dataclasses.replace(desk, noise=NoiseModel(0.002, 0.4, 0.7, 2.0))
    a, b = render_frame(spec, 4), render_frame(spec, 4)
    assert a.probs.probs.tobytes() == b.probs.probs.tobytes()
    assert a.depth.tobytes() == b.depth.tobytes()
    c = render_frame(dataclasses.replace(spec, seed=spec.seed + 1), 4)
    assert a.probs.probs.tobytes() != c.probs.probs.tobytes()


def test_frame_index_checked(desk):
    with pytest.raises(IndexError):
        render_frame(desk, len(desk.trajectory))


def test_export_and_reload(tmp_path, desk):
    spec = dataclasses.replace(desk, trajectory=desk.trajectory[:2])
    root = export_sequence(spec, tmp_path / "a")
    for sub, ext in (("depth", "png"), ("color", "png"), ("prob", "sprb"), ("label", "png")):
        assert len(list((root / sub).glob(f"*.{ext}"))) == 2
    export_sequence(spec, tmp_path / "b")
    for p in sorted(root.rglob("*.*")):
        assert p.read_bytes() == (tmp_path / "b" / p.relative_to(root)).read_bytes(), p.name

    ds = io.Dataset(root)
    assert ds.intrinsics == spec.intrinsics
    assert ds.class_names == spec.class_names
    lo, hi = ds.bounds()
    np.testing.assert_array_equal(lo, spec.bounds[0])
    for i in range(2):
        f = render_frame(spec, i)
        np.testing.assert_array_equal(ds.depth(i), np.rint(f.depth))
        np.testing.assert_array_equal(ds.color(i), f.color)
        np.testing.assert_array_equal(ds.label(i), f.labels)
        np.testing.assert_array_equal(ds.probmap(i).probs, f.probs.probs)
        assert ds.poses()[i].angle_to(spec.trajectory[i]) < 1e-12


def test_export_to_unwritable_path(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("")
    with pytest.raises(OSError, match="file"):
        export_sequence(wall_scene(), blocker / "ds")


def test_scene_text_round_trip(desk):
    again = parse_scene(format_scene(desk))
    assert again == desk
    assert format_scene(again) == format_scene(desk)


def test_benchmark_scene_parses():
    spec = read_scene(SCENE)
    assert spec.num_classes == 5 and len(spec.primitives) == 6 and len(spec.trajectory) == 24
    assert spec.seed == 7 and spec.noise.label_noise == 0.3


@pytest.mark.parametrize("text, line", [
    ("[camera]\nintrinsics = 1 2 3\n", 2),
    ("[scene]\nseed = seven\n", 2),
    ("[camera]\nintrinsics = 100 100 9.5 9.5 20 20 1000\n[primitive 0]\ntype = cone\n"
     "class = 0\ncolor = 1 1 1\nposition = 0 0 0\nsize = 1\n", 3),
    ("[scene]\nseed\n", 2),
    ("seed = 1\n", 1),
])
def test_malformed_scene_names_line(text, line):
    with pytest.raises(SceneFormatError, match=rf"<scene>:{line}:"):
        parse_scene(text)


def test_surface_labels():
    spec = wall_scene(z=1.5)
    label, other = surface_labels(spec, [[-0.5, 0, 1.5], [0.3, 0.2, 1.5]])
    np.testing.assert_array_equal(label, [0, 1])
    np.testing.assert_allclose(other, [0.5, 0.3])


def test_primitive_validation():
    with pytest.raises(ValueError):
        Primitive("sphere", 0, (0, 0, 0), (0, 0, 0), (-1.0,))
