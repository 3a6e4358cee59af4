import numpy as np
import pytest

from semfuse.geometry import Intrinsics, Pose
from semfuse.io import ClassInfo
from semfuse.synth import NoiseModel, Primitive, SceneSpec, orbit_trajectory


def small_k(w=80, h=60, f=60.0):
    return Intrinsics(f, f, (w - 1) / 2, (h - 1) / 2, w, h, 1000.0)


def wall_scene(z=1.5, frames=1, noise=None, k=None):
    """One camera at the origin looking down +z at a large two-class wall.

    The left half (x < 0) is class 0, the right half class 1.
    """
    classes = [ClassInfo(0, "left", (200, 50, 50)), ClassInfo(1, "right", (50, 50, 200))]
    prims = [
        Primitive("quad", 0, (200, 50, 50), (-1.0, 0.0, z), (2.0, 4.0)),
        Primitive("quad", 1, (50, 50, 200), (1.0, 0.0, z), (2.0, 4.0)),
    ]
    return SceneSpec(prims, [Pose.identity()] * frames, k or small_k(), classes,
                     noise or NoiseModel(), seed=0)


def sphere_scene(radius=0.5, frames=12, k=None, noise=None):
    """A single-class sphere at the origin circled by the camera."""
    classes = [ClassInfo(0, "ball", (200, 80, 80)), ClassInfo(1, "other", (80, 80, 80))]
    prims = [Primitive("sphere", 0, (200, 80, 80), (0.0, 0.0, 0.0), (radius,))]
    traj = []
    for elev in (-0.6, 0.0, 0.7):
        traj += orbit_trajectory((0, 0, 0), 1.4, elev, frames // 3, 0, 360)
    traj += [Pose.look_at((0, 0, 1.4), (0, 0, 0), up=(0, 1, 0)),
             Pose.look_at((0, 0, -1.4), (0, 0, 0), up=(0, 1, 0))]
    return SceneSpec(prims, traj, k or small_k(160, 120, 120.0), classes,
                     noise or NoiseModel(), seed=0,
                     bounds=(np.full(3, -0.7), np.full(3, 0.7)))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def grid_patch(origin, du, dv, n, label, C, color):
    """n x n quad grid spanning origin + s du + t dv, two triangles per cell."""
    from semfuse.tsdf import SemanticMesh
    s, t = np.meshgrid(np.linspace(0, 1, n + 1), np.linspace(0, 1, n + 1), indexing="ij")
    verts = (np.asarray(origin, float) + s.reshape(-1, 1) * np.asarray(du, float)
             + t.reshape(-1, 1) * np.asarray(dv, float))
    idx = np.arange((n + 1) ** 2).reshape(n + 1, n + 1)
    a, b, c, d = idx[:-1, :-1].ravel(), idx[1:, :-1].ravel(), idx[:-1, 1:].ravel(), idx[1:, 1:].ravel()
    faces = np.concatenate([np.column_stack([a, b, d]), np.column_stack([a, d, c])])
    normal = np.cross(du, dv)
    normal = normal / np.linalg.norm(normal)
    probs = np.full((len(verts), C), 0.1 / (C - 1))
    probs[:, label] = 0.9
    return SemanticMesh(verts, faces, np.tile(normal, (len(verts), 1)),
                        np.tile(color, (len(verts), 1)), probs)


def uv_sphere(center, radius, n, label, C, color):
    from semfuse.tsdf import SemanticMesh
    th = np.linspace(0, np.pi, n + 1)
    ph = np.linspace(0, 2 * np.pi, 2 * n, endpoint=False)
    T, P = np.meshgrid(th[1:-1], ph, indexing="ij")
    dirs = np.column_stack([np.sin(T).ravel() * np.cos(P).ravel(), np.sin(T).ravel() * np.sin(P).ravel(),
                            np.cos(T).ravel()])
    dirs = np.vstack([dirs, [[0, 0, 1], [0, 0, -1]]])
    rows, cols = n - 1, 2 * n
    idx = np.arange(rows * cols).reshape(rows, cols)
    faces = []
    for r in range(rows - 1):
        for c in range(cols):
            a, b = idx[r, c], idx[r, (c + 1) % cols]
            e, f = idx[r + 1, c], idx[r + 1, (c + 1) % cols]
            faces += [[a, e, f], [a, f, b]]
    top, bot = rows * cols, rows * cols + 1
    for c in range(cols):
        faces.append([top, idx[0, c], idx[0, (c + 1) % cols]])
        faces.append([bot, idx[-1, (c + 1) % cols], idx[-1, c]])
    probs = np.full((len(dirs), C), 0.1 / (C - 1))
    probs[:, label] = 0.9
    return SemanticMesh(np.asarray(center) + radius * dirs, np.array(faces), dirs,
                        np.tile(color, (len(dirs), 1)), probs)


def merge_meshes(parts, class_names=None):
    from semfuse.tsdf import SemanticMesh
    offs = np.cumsum([0] + [len(p) for p in parts[:-1]])
    return SemanticMesh(np.vstack([p.vertices for p in parts]),
                        np.vstack([p.faces + o for p, o in zip(parts, offs)]),
                        np.vstack([p.normals for p in parts]), np.vstack([p.colors for p in parts]),
                        np.vstack([p.probs for p in parts]), class_names)


def room_mesh(n=100, sphere_n=70, seed=0):
    """Floor, three walls and a ball; about 8 n^2 + 4 sphere_n^2 triangles.

    Vertices get a little jitter so that no ray meets a grid exactly on an edge
    by construction.
    """
    C = 3
    parts = [
        grid_patch((-2, -2, 0), (4, 0, 0), (0, 4, 0), n, 0, C, (120, 120, 120)),
        grid_patch((-2, -2, 0), (0, 0, 2.5), (4, 0, 0), n, 1, C, (200, 190, 170)),
        grid_patch((-2, -2, 0), (0, 4, 0), (0, 0, 2.5), n, 1, C, (200, 190, 170)),
        grid_patch((2, -2, 0), (0, 0, 2.5), (0, 4, 0), n, 1, C, (200, 190, 170)),
        uv_sphere((0.3, 0.2, 0.8), 0.5, sphere_n, 2, C, (220, 40, 40)),
    ]
    mesh = merge_meshes(parts, ["floor", "wall", "ball"])
    jitter = np.random.default_rng(seed).normal(0, 1e-4, mesh.vertices.shape)
    return mesh.replace(vertices=mesh.vertices + jitter)


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[n])
