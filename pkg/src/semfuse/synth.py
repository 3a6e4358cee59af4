"""Synthetic RGB-D sequences with exact depth, labels and noisy probability maps.

Scenes are built from quads, boxes and spheres. Depth is found by analytic
ray intersection, ground-truth labels come from the nearest primitive, and
the per-frame probability maps follow a seeded noise model:

* with probability ``label_noise`` a pixel's prediction peaks at a wrong
  class drawn uniformly, otherwise at the true class;
* the peak holds ``label_confidence`` of the mass, the rest is spread evenly;
* within ``2 * label_blur`` pixels of a label boundary, the predicted
  one-hot map is Gaussian-blurred across labels before mixing;
* ``depth_sigma`` adds Gaussian depth noise (meters).

Scene file format
-----------------
Line-oriented ``key = value`` pairs grouped in ``[section]`` headers; ``#``
starts a comment. Vectors are whitespace-separated numbers::

    [scene]
    seed = 0
    bounds = -1 -1 0 1 1 1          # xmin ymin zmin xmax ymax zmax

    [camera]
    intrinsics = 200 200 159.5 119.5 320 240 1000

    [noise]
    depth_sigma = 0
    label_noise = 0.4
    label_confidence = 0.7
    label_blur = 0

    [class 0]
    name = floor
    color = 120 120 120

    [primitive 0]
    type = box                      # quad | box | sphere
    class = 0
    color = 120 120 120
    position = 0 0 -0.05
    rotation = 0 0 0 1              # optional quaternion x y z w
    size = 2 2 0.1                  # quad: sx sy, box: sx sy sz, sphere: r

    [trajectory]
    0 = tx ty tz qx qy qz qw        # one camera-to-world pose per frame

or, instead of explicit poses, an orbit::

    [trajectory]
    orbit_target = 0 0 0.3
    orbit_radius = 1.2
    orbit_height = 0.8
    orbit_frames = 20
    orbit_start_deg = 0
    orbit_arc_deg = 90
"""
from __future__ import annotations

import dataclasses
from pathlib import Path

import numpy as np
from scipy import ndimage

from .fusion import ProbMap
from .geometry import Intrinsics, Pose
from .io import (ClassInfo, frame_name, write_bounds, write_classes, write_color, write_depth,
                 write_intrinsics, write_label, write_poses, write_probmap)

__all__ = [
    "Primitive",
    "NoiseModel",
    "SceneSpec",
    "Frame",
    "SceneFormatError",
    "render_frame",
    "export_sequence",
    "orbit_trajectory",
    "parse_scene",
    "read_scene",
    "format_scene",
    "write_scene",
    "surface_labels",
]

IGNORE = 255
PRIMITIVE_TYPES = ("quad", "box", "sphere")


class SceneFormatError(ValueError):
    """Malformed scene file; the message names the offending line."""


@dataclasses.dataclass(frozen=True, eq=False)
class Primitive:
    kind: str
    class_id: int
    color: tuple[float, float, float]
    position: np.ndarray
    size: np.ndarray
    rotation: np.ndarray = dataclasses.field(default_factory=lambda: np.array([0.0, 0.0, 0.0, 1.0]))

    def __post_init__(self):
        if self.kind not in PRIMITIVE_TYPES:
            raise ValueError(f"unknown primitive type {self.kind!r}")
        object.__setattr__(self, "position", np.asarray(self.position, dtype=np.float64).reshape(3))
        object.__setattr__(self, "size", np.atleast_1d(np.asarray(self.size, dtype=np.float64)))
        object.__setattr__(self, "color", tuple(float(c) for c in self.color))
        need = {"quad": 2, "box": 3, "sphere": 1}[self.kind]
        if self.size.shape != (need,) or np.any(self.size <= 0):
            raise ValueError(f"{self.kind} needs {need} positive size value(s)")
        object.__setattr__(self, "_pose", Pose(self.rotation, self.position))
        object.__setattr__(self, "rotation", self._pose.rotation)

    @property
    def pose(self) -> Pose:
        return self._pose

    def __eq__(self, other):
        return (isinstance(other, Primitive) and self.kind == other.kind
                and self.class_id == other.class_id and self.color == other.color
                and np.array_equal(self.position, other.position)
                and np.array_equal(self.size, other.size)
                and np.array_equal(self.rotation, other.rotation))

    def intersect(self, origin: np.ndarray, dirs: np.ndarray) -> np.ndarray:
        """Ray parameter of the first hit in front of ``origin`` (inf on a miss).

        ``dirs`` need not be unit; the result is in units of ``dirs``.
        """
        R = self.pose.rotation_matrix
        o = R.T @ (origin - self.position)
        d = dirs @ R
        n = len(dirs)
        with np.errstate(divide="ignore", invalid="ignore"):
            if self.kind == "quad":
                t = -o[2] / d[:, 2]
                hx = o[0] + t * d[:, 0]
                hy = o[1] + t * d[:, 1]
                ok = (t > 0) & (np.abs(hx) <= self.size[0] / 2) & (np.abs(hy) <= self.size[1] / 2)
                return np.where(ok, t, np.inf)
            if self.kind == "box":
                h = self.size / 2
                t1 = (-h - o) / d
                t2 = (h - o) / d
                tmin = np.nanmax(np.minimum(t1, t2), axis=1)
                tmax = np.nanmin(np.maximum(t1, t2), axis=1)
                ok = tmax >= np.maximum(tmin, 0)
                # from inside the box the far wall is what the camera sees
                t = np.where(tmin > 0, tmin, tmax)
                return np.where(ok & (t > 0), t, np.inf)
            r = self.size[0]
            a = np.einsum("ij,ij->i", d, d)
            b = 2 * d @ o
            c = o @ o - r * r
            disc = b * b - 4 * a * c
            sq = np.sqrt(np.maximum(disc, 0))
            t_near = (-b - sq) / (2 * a)
            t_far = (-b + sq) / (2 * a)
            t = np.where(t_near > 0, t_near, t_far)
            return np.where((disc >= 0) & (t > 0), t, np.full(n, np.inf))

    def surface_distance(self, points: np.ndarray) -> np.ndarray:
        """Unsigned distance from world points to the primitive surface."""
        p = (np.asarray(points, dtype=np.float64) - self.position) @ self.pose.rotation_matrix
        if self.kind == "sphere":
            return np.abs(np.linalg.norm(p, axis=1) - self.size[0])
        if self.kind == "quad":
            dx = np.maximum(np.abs(p[:, 0]) - self.size[0] / 2, 0)
            dy = np.maximum(np.abs(p[:, 1]) - self.size[1] / 2, 0)
            return np.sqrt(dx * dx + dy * dy + p[:, 2] ** 2)
        q = np.abs(p) - self.size / 2
        outside = np.linalg.norm(np.maximum(q, 0), axis=1)
        inside = np.minimum(q.max(axis=1), 0)
        return np.abs(outside + inside)


@dataclasses.dataclass(frozen=True)
class NoiseModel:
    depth_sigma: float = 0.0
    label_noise: float = 0.0
    label_confidence: float = 0.9
    label_blur: float = 0.0

    def __post_init__(self):
        if self.depth_sigma < 0 or self.label_blur < 0:
            raise ValueError("noise magnitudes must be non-negative")
        if not 0 <= self.label_noise <= 1:
            raise ValueError("label_noise must be in [0, 1]")
        if not 0 < self.label_confidence <= 1:
            raise ValueError("label_confidence must be in (0, 1]")


@dataclasses.dataclass(eq=False)
class SceneSpec:
    primitives: list[Primitive]
    trajectory: list[Pose]
    intrinsics: Intrinsics
    classes: list[ClassInfo]
    noise: NoiseModel = dataclasses.field(default_factory=NoiseModel)
    seed: int = 0
    bounds: tuple[np.ndarray, np.ndarray] | None = None

    def __post_init__(self):
        C = len(self.classes)
        if C < 1:
            raise ValueError("scene needs at least one class")
        if [c.id for c in self.classes] != list(range(C)):
            raise ValueError("class ids must be 0..C-1 in order")
        for prim in self.primitives:
            if not 0 <= prim.class_id < C:
                raise ValueError(f"primitive class {prim.class_id} is not a declared class")
        if self.bounds is not None:
            lo, hi = (np.asarray(b, dtype=np.float64).reshape(3) for b in self.bounds)
            if np.any(hi <= lo):
                raise ValueError("bounds must have max > min")
            self.bounds = (lo, hi)

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    @property
    def class_names(self) -> list[str]:
        return [c.name for c in self.classes]

    def __eq__(self, other):
        if not isinstance(other, SceneSpec):
            return NotImplemented
        same_bounds = (self.bounds is None) == (other.bounds is None) and (
            self.bounds is None or all(np.array_equal(a, b) for a, b in zip(self.bounds, other.bounds)))
        return (self.primitives == other.primitives
                and len(self.trajectory) == len(other.trajectory)
                and all(np.array_equal(a.rotation, b.rotation) and np.array_equal(a.translation, b.translation)
                        for a, b in zip(self.trajectory, other.trajectory))
                and self.intrinsics == other.intrinsics and self.classes == other.classes
                and self.noise == other.noise and self.seed == other.seed and same_bounds)


@dataclasses.dataclass
class Frame:
    depth: np.ndarray
    """Raw depth (meters times depth_scale), float64; 0 where nothing is hit."""
    color: np.ndarray
    """(H, W, 3) uint8."""
    labels: np.ndarray
    """Ground-truth class ids; 255 where nothing is hit."""
    probs: ProbMap


def orbit_trajectory(target, radius: float, height: float, frames: int,
                     start_deg: float = 0.0, arc_deg: float = 360.0) -> list[Pose]:
    """Cameras on a horizontal circle (world z up) looking at ``target``."""
    target = np.asarray(target, dtype=np.float64)
    step = arc_deg / frames if abs(arc_deg) >= 360 else (arc_deg / max(frames - 1, 1))
    poses = []
    for i in range(frames):
        a = np.deg2rad(start_deg + i * step)
        eye = target + np.array([radius * np.cos(a), radius * np.sin(a), height])
        poses.append(Pose.look_at(eye, target, up=(0.0, 0.0, 1.0)))
    return poses


def _rng(seed: int, frame_idx: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(frame_idx)])


def _raycast_scene(spec: SceneSpec, pose: Pose):
    k = spec.intrinsics
    v, u = np.indices(k.shape, dtype=np.float64)
    rays_cam = np.stack([(u - k.cx) / k.fx, (v - k.cy) / k.fy, np.ones_like(u)], axis=-1).reshape(-1, 3)
    # rays with unit camera z: the ray parameter is the depth
    dirs = pose.rotate(rays_cam)
    best = np.full(len(dirs), np.inf)
    which = np.full(len(dirs), -1)
    for i, prim in enumerate(spec.primitives):
        t = prim.intersect(pose.translation, dirs)
        closer = t < best
        best[closer] = t[closer]
        which[closer] = i
    return best.reshape(k.shape), which.reshape(k.shape)


def _boundary_band(labels: np.ndarray, radius: int) -> np.ndarray:
    edge = np.zeros(labels.shape, dtype=bool)
    edge[:, 1:] |= labels[:, 1:] != labels[:, :-1]
    edge[:, :-1] |= labels[:, 1:] != labels[:, :-1]
    edge[1:, :] |= labels[1:, :] != labels[:-1, :]
    edge[:-1, :] |= labels[1:, :] != labels[:-1, :]
    if radius > 0:
        edge = ndimage.binary_dilation(edge, iterations=radius)
    return edge


def render_frame(spec: SceneSpec, frame_idx: int) -> Frame:
    """Render depth, color, ground-truth labels and a noisy probability map."""
    if not 0 <= frame_idx < len(spec.trajectory):
        raise IndexError(f"frame {frame_idx} outside trajectory of {len(spec.trajectory)}")
    k = spec.intrinsics
    noise = spec.noise
    rng = _rng(spec.seed, frame_idx)
    z, which = _raycast_scene(spec, spec.trajectory[frame_idx])
    hit = np.isfinite(z)

    depth = np.where(hit, z, 0.0)
    if noise.depth_sigma > 0:
        depth = np.where(hit, depth + rng.normal(0.0, noise.depth_sigma, depth.shape), 0.0)
        depth = np.maximum(depth, 0.0)
    depth = depth * k.depth_scale

    class_of = np.array([p.class_id for p in spec.primitives] + [IGNORE])
    color_of = np.array([p.color for p in spec.primitives] + [(0.0, 0.0, 0.0)])
    labels = class_of[which]
    color = np.clip(np.rint(color_of[which]), 0, 255).astype(np.uint8)

    C = spec.num_classes
    predicted = np.where(hit, labels, 0)
    if C > 1 and noise.label_noise > 0:
        flip = rng.random(k.shape) < noise.label_noise
        offset = rng.integers(1, C, size=k.shape)
        predicted = np.where(flip & hit, (predicted + offset) % C, predicted)
    onehot = np.zeros(k.shape + (C,))
    np.put_along_axis(onehot, predicted[..., None], 1.0, axis=2)
    if noise.label_blur > 0:
        band = _boundary_band(np.where(hit, labels, -1), int(np.ceil(2 * noise.label_blur))) & hit
        blurred = ndimage.gaussian_filter(onehot, sigma=(noise.label_blur, noise.label_blur, 0))
        blurred /= blurred.sum(axis=2, keepdims=True)
        onehot = np.where(band[..., None], blurred, onehot)
    if C > 1:
        conf = noise.label_confidence
        probs = conf * onehot + (1.0 - conf) / (C - 1) * (1.0 - onehot)
    else:
        probs = np.ones(k.shape + (1,))
    probs[~hit] = 1.0 / C
    return Frame(depth, color, labels.astype(np.int64), ProbMap(probs.astype(np.float32)))


def surface_labels(spec: SceneSpec, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Class of the nearest primitive surface for each point, and the distance
    to the nearest surface of any other class (inf when none exists)."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    dist = np.stack([p.surface_distance(points) for p in spec.primitives], axis=1)
    cls = np.array([p.class_id for p in spec.primitives])
    nearest = np.argmin(dist, axis=1)
    label = cls[nearest]
    other = np.where(cls[None, :] != label[:, None], dist, np.inf).min(axis=1)
    return label, other


def export_sequence(spec: SceneSpec, out_dir) -> Path:
    """Render every frame and write the dataset directory."""
    out = Path(out_dir)
    try:
        for sub in ("depth", "color", "prob", "label"):
            (out / sub).mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create dataset directory {out}: {exc}") from exc
    write_intrinsics(out / "intrinsics.txt", spec.intrinsics)
    write_poses(out / "poses.txt", dict(enumerate(spec.trajectory)))
    write_classes(out / "classes.txt", spec.classes)
    if spec.bounds is not None:
        write_bounds(out / "bounds.txt", *spec.bounds)
    for i in range(len(spec.trajectory)):
        f = render_frame(spec, i)
        name = frame_name(i)
        write_depth(out / "depth" / f"{name}.png", f.depth)
        write_color(out / "color" / f"{name}.png", f.color)
        write_probmap(out / "prob" / f"{name}.sprb", f.probs)
        write_label(out / "label" / f"{name}.png", f.labels)
    return out


# -- scene files ---------------------------------------------------------------

def _parse_sections(text: str, source: str):
    sections: list[tuple[str, int, dict[str, tuple[str, int]]]] = []
    current = None
    for no, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("["):
            if not line.endswith("]"):
                raise SceneFormatError(f"{source}:{no}: unterminated section header")
            current = {}
            sections.append((" ".join(line[1:-1].split()), no, current))
            continue
        if "=" not in line:
            raise SceneFormatError(f"{source}:{no}: expected 'key = value'")
        if current is None:
            raise SceneFormatError(f"{source}:{no}: key outside of a section")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in current:
            raise SceneFormatError(f"{source}:{no}: duplicate key {key!r}")
        current[key] = (value, no)
    return sections


def _vec(entry, source, n=None):
    value, no = entry
    try:
        out = np.array([float(v) for v in value.split()])
    except ValueError:
        raise SceneFormatError(f"{source}:{no}: expected numbers, got {value!r}") from None
    if n is not None and len(out) not in (n if isinstance(n, tuple) else (n,)):
        raise SceneFormatError(f"{source}:{no}: expected {n} numbers, got {len(out)}")
    return out


def _unit(q: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(q)
    if norm == 0:
        raise ValueError("zero quaternion")
    return q if abs(norm - 1.0) <= 1e-12 else q / norm


def _scalar(entry, source, cast=float):
    value, no = entry
    try:
        return cast(value)
    except ValueError:
        raise SceneFormatError(f"{source}:{no}: invalid value {value!r}") from None


def _require(sec: dict, key: str, source: str, line: int):
    if key not in sec:
        raise SceneFormatError(f"{source}:{line}: missing key {key!r}")
    return sec[key]


def parse_scene(text: str, source: str = "<scene>") -> SceneSpec:
    seed = 0
    bounds = None
    intrinsics = None
    noise = NoiseModel()
    classes: dict[int, ClassInfo] = {}
    prims: list[tuple[int, Primitive]] = []
    trajectory: list[Pose] = []

    for name, line, sec in _parse_sections(text, source):
        head, _, arg = name.partition(" ")
        try:
            if head == "scene":
                if "seed" in sec:
                    seed = _scalar(sec["seed"], source, int)
                if "bounds" in sec:
                    b = _vec(sec["bounds"], source, 6)
                    bounds = (b[:3], b[3:])
            elif head == "camera":
                v = _vec(_require(sec, "intrinsics", source, line), source, 7)
                intrinsics = Intrinsics(v[0], v[1], v[2], v[3], int(v[4]), int(v[5]), v[6])
            elif head == "noise":
                kw = {key: _scalar(val, source) for key, val in sec.items()}
                unknown = set(kw) - {f.name for f in dataclasses.fields(NoiseModel)}
                if unknown:
                    key = sorted(unknown)[0]
                    raise SceneFormatError(f"{source}:{sec[key][1]}: unknown noise key {key!r}")
                noise = NoiseModel(**kw)
            elif head == "class":
                cid = _scalar((arg, line), source, int)
                col = _vec(_require(sec, "color", source, line), source, 3)
                classes[cid] = ClassInfo(cid, _require(sec, "name", source, line)[0],
                                         tuple(int(c) for c in col))
            elif head == "primitive":
                order = _scalar((arg, line), source, int)
                kind = _require(sec, "type", source, line)[0]
                rot = _vec(sec["rotation"], source, 4) if "rotation" in sec else np.array([0, 0, 0, 1.0])
                prims.append((order, Primitive(
                    kind=kind,
                    class_id=_scalar(_require(sec, "class", source, line), source, int),
                    color=tuple(_vec(_require(sec, "color", source, line), source, 3)),
                    position=_vec(_require(sec, "position", source, line), source, 3),
                    size=_vec(_require(sec, "size", source, line), source, (1, 2, 3)),
                    rotation=_unit(rot))))
            elif head == "trajectory":
                if "orbit_target" in sec:
                    trajectory = orbit_trajectory(
                        _vec(sec["orbit_target"], source, 3),
                        _scalar(_require(sec, "orbit_radius", source, line), source),
                        _scalar(_require(sec, "orbit_height", source, line), source),
                        _scalar(_require(sec, "orbit_frames", source, line), source, int),
                        _scalar(sec.get("orbit_start_deg", ("0", line)), source),
                        _scalar(sec.get("orbit_arc_deg", ("360", line)), source))
                else:
                    for key in sorted(sec, key=lambda s: _scalar((s, sec[s][1]), source, int)):
                        v = _vec(sec[key], source, 7)
                        trajectory.append(Pose(_unit(v[3:]), v[:3]))
            else:
                raise SceneFormatError(f"{source}:{line}: unknown section [{name}]")
        except SceneFormatError:
            raise
        except ValueError as exc:
            raise SceneFormatError(f"{source}:{line}: [{name}] {exc}") from None

    if intrinsics is None:
        raise SceneFormatError(f"{source}: missing [camera] section")
    if not trajectory:
        raise SceneFormatError(f"{source}: empty trajectory")
    if not prims:
        raise SceneFormatError(f"{source}: no primitives")
    try:
        return SceneSpec(primitives=[p for _, p in sorted(prims, key=lambda t: t[0])],
                         trajectory=trajectory, intrinsics=intrinsics,
                         classes=[classes[c] for c in sorted(classes)],
                         noise=noise, seed=seed, bounds=bounds)
    except ValueError as exc:
        raise SceneFormatError(f"{source}: {exc}") from None


def read_scene(path) -> SceneSpec:
    path = Path(path)
    return parse_scene(path.read_text(), str(path))


def _fmt(values) -> str:
    return " ".join(repr(float(v)) for v in np.ravel(values))


def format_scene(spec: SceneSpec) -> str:
    k = spec.intrinsics
    out = ["[scene]", f"seed = {spec.seed}"]
    if spec.bounds is not None:
        out.append(f"bounds = {_fmt(np.concatenate(spec.bounds))}")
    out += ["", "[camera]",
            f"intrinsics = {k.fx!r} {k.fy!r} {k.cx!r} {k.cy!r} {k.width} {k.height} {k.depth_scale!r}",
            "", "[noise]"]
    out += [f"{f.name} = {getattr(spec.noise, f.name)!r}" for f in dataclasses.fields(NoiseModel)]
    for c in spec.classes:
        out += ["", f"[class {c.id}]", f"name = {c.name}", f"color = {c.color[0]} {c.color[1]} {c.color[2]}"]
    for i, p in enumerate(spec.primitives):
        out += ["", f"[primitive {i}]", f"type = {p.kind}", f"class = {p.class_id}",
                f"color = {_fmt(p.color)}", f"position = {_fmt(p.position)}",
                f"rotation = {_fmt(p.rotation)}", f"size = {_fmt(p.size)}"]
    out += ["", "[trajectory]"]
    out += [f"{i} = {_fmt(np.concatenate([p.translation, p.rotation]))}"
            for i, p in enumerate(spec.trajectory)]
    return "\n".join(out) + "\n"


def write_scene(path, spec: SceneSpec) -> None:
    Path(path).write_text(format_scene(spec))
