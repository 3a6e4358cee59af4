"""File formats: camera files, class palette, probability maps, volume
snapshots, PLY meshes, images, response profiles and the dataset layout.

Dataset directory::

    intrinsics.txt   fx fy cx cy width height depth_scale
    poses.txt        frame_id tx ty tz qx qy qz qw   (camera-to-world)
    classes.txt      id name r g b
    bounds.txt       xmin ymin zmin xmax ymax zmax   (optional)
    depth/NNNNNN.png 16-bit raw depth
    color/NNNNNN.png 8-bit RGB
    prob/NNNNNN.sprb class probabilities
    label/NNNNNN.png 8-bit ground-truth class ids (255 = ignore)
"""
from __future__ import annotations

import dataclasses
import io as _io
import struct
import warnings
from pathlib import Path

import numpy as np
from PIL import Image

from .fusion import ProbMap
from .geometry import Intrinsics, Pose
from .query import Decal, ProfileTable, ResponseProfile
from .tsdf import SemanticMesh, TsdfVolume

__all__ = [
    "FormatError",
    "ClassInfo",
    "Dataset",
    "read_intrinsics", "write_intrinsics",
    "read_poses", "write_poses",
    "read_classes", "write_classes",
    "read_probmap", "write_probmap",
    "save_volume", "load_volume",
    "write_ply", "read_ply",
    "read_depth", "write_depth", "read_color", "write_color", "read_label", "write_label",
    "read_profiles",
    "read_bounds", "write_bounds",
    "frame_name",
]


class FormatError(ValueError):
    """A file does not follow its format; the message names the file and line."""


def _lines(path):
    """Yield (line number, stripped line), skipping blanks and # comments."""
    with open(path) as fh:
        for no, line in enumerate(fh, 1):
            line = line.strip()
            if line and not line.startswith("#"):
                yield no, line


def frame_name(frame_id: int) -> str:
    return f"{frame_id:06d}"


# -- camera ------------------------------------------------------------------

def read_intrinsics(path) -> Intrinsics:
    rows = list(_lines(path))
    if len(rows) != 1:
        raise FormatError(f"{path}: expected one line, found {len(rows)}")
    no, line = rows[0]
    parts = line.split()
    if len(parts) != 7:
        raise FormatError(f"{path}:{no}: expected 'fx fy cx cy width height depth_scale'")
    try:
        fx, fy, cx, cy = (float(v) for v in parts[:4])
        width, height = int(parts[4]), int(parts[5])
        scale = float(parts[6])
        return Intrinsics(fx, fy, cx, cy, width, height, scale)
    except ValueError as exc:
        raise FormatError(f"{path}:{no}: {exc}") from None


def write_intrinsics(path, k: Intrinsics) -> None:
    Path(path).write_text(f"{k.fx!r} {k.fy!r} {k.cx!r} {k.cy!r} {k.width} {k.height} "
                          f"{k.depth_scale!r}\n")


def read_poses(path) -> dict[int, Pose]:
    """Parse a trajectory; duplicates keep the last entry, off-unit quaternions
    are renormalized. Both cases warn."""
    poses: dict[int, Pose] = {}
    for no, line in _lines(path):
        parts = line.split()
        if len(parts) != 8:
            raise FormatError(f"{path}:{no}: expected 'frame_id tx ty tz qx qy qz qw'")
        try:
            fid = int(parts[0])
            vals = np.array([float(v) for v in parts[1:]])
        except ValueError as exc:
            raise FormatError(f"{path}:{no}: {exc}") from None
        if not np.all(np.isfinite(vals)):
            raise FormatError(f"{path}:{no}: non-finite value")
        q = vals[3:]
        norm = np.linalg.norm(q)
        if norm < 1e-12:
            raise FormatError(f"{path}:{no}: zero quaternion")
        if abs(norm - 1.0) > 1e-6:
            warnings.warn(f"{path}:{no}: quaternion norm {norm:.6g} renormalized", stacklevel=2)
        if fid in poses:
            warnings.warn(f"{path}:{no}: duplicate frame id {fid}, last entry wins", stacklevel=2)
        poses[fid] = Pose(q / norm, vals[:3])
    return poses


def write_poses(path, poses: dict[int, Pose]) -> None:
    with open(path, "w") as fh:
        for fid in sorted(poses):
            p = poses[fid]
            vals = " ".join(repr(float(v)) for v in (*p.translation, *p.rotation))
            fh.write(f"{fid} {vals}\n")


def read_bounds(path) -> tuple[np.ndarray, np.ndarray]:
    rows = list(_lines(path))
    if len(rows) != 1 or len(rows[0][1].split()) != 6:
        raise FormatError(f"{path}: expected one line 'xmin ymin zmin xmax ymax zmax'")
    vals = np.array([float(v) for v in rows[0][1].split()])
    return vals[:3], vals[3:]


def write_bounds(path, lo, hi) -> None:
    Path(path).write_text(" ".join(repr(float(v)) for v in (*lo, *hi)) + "\n")


# -- classes -----------------------------------------------------------------

@dataclasses.dataclass(frozen=True)
class ClassInfo:
    id: int
    name: str
    color: tuple[int, int, int]


def read_classes(path) -> list[ClassInfo]:
    out = []
    for no, line in _lines(path):
        parts = line.split()
        if len(parts) != 5:
            raise FormatError(f"{path}:{no}: expected 'id name r g b'")
        try:
            cid = int(parts[0])
            rgb = tuple(int(v) for v in parts[2:])
        except ValueError as exc:
            raise FormatError(f"{path}:{no}: {exc}") from None
        if any(not 0 <= c <= 255 for c in rgb):
            raise FormatError(f"{path}:{no}: color component outside 0..255")
        out.append(ClassInfo(cid, parts[1], rgb))
    ids = sorted(c.id for c in out)
    if ids != list(range(len(out))):
        raise FormatError(f"{path}: class ids must be 0..C-1 without gaps")
    return sorted(out, key=lambda c: c.id)


def write_classes(path, classes: list[ClassInfo]) -> None:
    with open(path, "w") as fh:
        for c in classes:
            fh.write(f"{c.id} {c.name} {c.color[0]} {c.color[1]} {c.color[2]}\n")


# -- probability maps --------------------------------------------------------

_SPRB = struct.Struct("<4sIIII")


def write_probmap(path, pm: ProbMap) -> None:
    with open(path, "wb") as fh:
        fh.write(_SPRB.pack(b"SPRB", 1, pm.width, pm.height, pm.num_classes))
        fh.write(np.ascontiguousarray(pm.probs, dtype="<f4").tobytes())


def read_probmap(path) -> ProbMap:
    data = Path(path).read_bytes()
    if len(data) < _SPRB.size:
        raise FormatError(f"{path}: truncated header")
    magic, version, w, h, C = _SPRB.unpack_from(data)
    if magic != b"SPRB" or version != 1:
        raise FormatError(f"{path}: not an SPRB version 1 file")
    expected = _SPRB.size + 4 * w * h * C
    if len(data) != expected:
        raise FormatError(f"{path}: size {len(data)} bytes, expected {expected}")
    probs = np.frombuffer(data, dtype="<f4", offset=_SPRB.size).reshape(h, w, C)
    return ProbMap(probs.astype(np.float32))


# -- volume snapshots --------------------------------------------------------

_SVOL = struct.Struct("<4sIIIIf3ffI")


def _voxel_dtype(C: int) -> np.dtype:
    return np.dtype([("tsdf", "<f4"), ("weight", "<f4"), ("rgb", "u1", (3,)), ("probs", "<f4", (C,))])


def save_volume(path, vol: TsdfVolume) -> None:
    """Write an SVOL snapshot; voxel records are stored x-fastest."""
    C = vol.num_classes
    rec = np.empty(vol.dims[::-1], dtype=_voxel_dtype(C))
    rec["tsdf"] = vol.tsdf.transpose(2, 1, 0)
    rec["weight"] = vol.weight.transpose(2, 1, 0)
    rec["rgb"] = np.clip(np.rint(vol.color), 0, 255).astype(np.uint8).transpose(2, 1, 0, 3)
    rec["probs"] = vol.probs.transpose(2, 1, 0, 3)
    with open(path, "wb") as fh:
        fh.write(_SVOL.pack(b"SVOL", 1, *vol.dims, vol.voxel_size, *vol.origin, vol.truncation, C))
        fh.write(rec.tobytes())


def load_volume(path, w_max: float = 64.0) -> TsdfVolume:
    data = Path(path).read_bytes()
    if len(data) < _SVOL.size:
        raise FormatError(f"{path}: truncated header")
    magic, version, nx, ny, nz, vs, ox, oy, oz, tau, C = _SVOL.unpack_from(data)
    if magic != b"SVOL" or version != 1:
        raise FormatError(f"{path}: not an SVOL version 1 file")
    dt = _voxel_dtype(C)
    if len(data) != _SVOL.size + dt.itemsize * nx * ny * nz:
        raise FormatError(f"{path}: voxel payload has the wrong size")
    rec = np.frombuffer(data, dtype=dt, offset=_SVOL.size).reshape(nz, ny, nx)
    vol = TsdfVolume((nx, ny, nz), vs, (ox, oy, oz), tau, C, w_max)
    vol.tsdf[:] = rec["tsdf"].transpose(2, 1, 0)
    vol.weight[:] = rec["weight"].transpose(2, 1, 0)
    vol.color[:] = rec["rgb"].transpose(2, 1, 0, 3)
    vol.probs[:] = rec["probs"].transpose(2, 1, 0, 3)
    return vol


# -- PLY ---------------------------------------------------------------------

def write_ply(path, mesh: SemanticMesh, with_probs: bool = True) -> None:
    """ASCII PLY with x y z nx ny nz red green blue label conf [prob_0..prob_C-1]."""
    C = mesh.num_classes
    head = ["ply", "format ascii 1.0", f"comment classes {C}"]
    if mesh.class_names:
        head += [f"comment class {i} {name}" for i, name in enumerate(mesh.class_names)]
    head.append(f"element vertex {len(mesh)}")
    head += [f"property float {p}" for p in ("x", "y", "z", "nx", "ny", "nz")]
    head += [f"property uchar {p}" for p in ("red", "green", "blue")]
    head += ["property ushort label", "property float conf"]
    if with_probs:
        head += [f"property float prob_{c}" for c in range(C)]
    head += [f"element face {len(mesh.faces)}", "property list uchar int vertex_indices",
             "end_header"]

    buf = _io.StringIO()
    buf.write("\n".join(head) + "\n")
    if len(mesh):
        rgb = np.clip(np.rint(mesh.colors), 0, 255).astype(np.int64)
        cols = [mesh.vertices, mesh.normals, rgb, mesh.labels[:, None], mesh.confidence[:, None]]
        fmt = ["%.6f"] * 6 + ["%d"] * 4 + ["%.6f"]
        if with_probs:
            cols.append(mesh.probs)
            fmt += ["%.8g"] * C
        table = np.hstack([np.asarray(c, dtype=np.float64) for c in cols])
        np.savetxt(buf, table, fmt=" ".join(fmt))
    if len(mesh.faces):
        np.savetxt(buf, np.hstack([np.full((len(mesh.faces), 1), 3), mesh.faces]), fmt="%d")
    Path(path).write_text(buf.getvalue())


def read_ply(path, num_classes: int | None = None) -> SemanticMesh:
    """Read a PLY written by :func:`write_ply`.

    Without ``prob_*`` properties the labels are promoted to distributions
    holding ``conf`` on the label and the remainder spread evenly.
    """
    with open(path) as fh:
        text = fh.read()
    if not text.startswith("ply"):
        raise FormatError(f"{path}: not a PLY file")
    header, _, body = text.partition("end_header\n")
    n_vert = n_face = 0
    props: list[str] = []
    names: dict[int, str] = {}
    C = num_classes
    current = None
    for no, line in enumerate(header.splitlines(), 1):
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "format" and parts[1] != "ascii":
            raise FormatError(f"{path}:{no}: only ASCII PLY is supported")
        elif parts[0] == "comment" and len(parts) >= 3 and parts[1] == "classes" and C is None:
            C = int(parts[2])
        elif parts[0] == "comment" and len(parts) >= 4 and parts[1] == "class":
            names[int(parts[2])] = parts[3]
        elif parts[0] == "element":
            current = parts[1]
            if current == "vertex":
                n_vert = int(parts[2])
            elif current == "face":
                n_face = int(parts[2])
        elif parts[0] == "property" and current == "vertex":
            props.append(parts[-1])
    rows = body.splitlines()
    if len(rows) < n_vert + n_face:
        raise FormatError(f"{path}: file ends before all elements were read")
    vdata = (np.loadtxt(rows[:n_vert], ndmin=2) if n_vert
             else np.zeros((0, len(props))))
    col = {p: i for i, p in enumerate(props)}
    for p in ("x", "y", "z"):
        if p not in col:
            raise FormatError(f"{path}: vertex property '{p}' missing")
    if "label" not in col:
        raise FormatError(f"{path}: mesh has no label data")
    verts = vdata[:, [col["x"], col["y"], col["z"]]]
    normals = (vdata[:, [col["nx"], col["ny"], col["nz"]]] if "nx" in col
               else np.zeros_like(verts))
    colors = (vdata[:, [col["red"], col["green"], col["blue"]]] if "red" in col
              else np.zeros_like(verts))
    labels = vdata[:, col["label"]].astype(np.int64)
    prob_cols = sorted((int(p[5:]), i) for p, i in col.items() if p.startswith("prob_"))
    if prob_cols:
        probs = vdata[:, [i for _, i in prob_cols]]
        probs = np.maximum(probs, 0.0)
        probs /= probs.sum(axis=1, keepdims=True)
    else:
        if C is None:
            C = int(labels.max()) + 1 if len(labels) else 1
        conf = vdata[:, col["conf"]] if "conf" in col else np.ones(len(labels))
        conf = np.clip(conf, 0.0, 1.0)
        if C < 2:
            probs = np.ones((len(labels), 1))
        else:
            probs = np.repeat(((1.0 - conf) / (C - 1))[:, None], C, axis=1)
            probs[np.arange(len(labels)), labels] = conf
            probs /= probs.sum(axis=1, keepdims=True)
    faces = np.zeros((0, 3), dtype=np.int64)
    if n_face:
        fdata = np.loadtxt(rows[n_vert:n_vert + n_face], ndmin=2, dtype=np.int64)
        if np.any(fdata[:, 0] != 3):
            raise FormatError(f"{path}: only triangle faces are supported")
        faces = fdata[:, 1:4]
    class_names = [names[i] for i in range(len(names))] if names and sorted(names) == list(
        range(len(names))) else None
    return SemanticMesh(verts, faces, normals, colors, probs, class_names)


# -- images ------------------------------------------------------------------

def write_depth(path, depth: np.ndarray) -> None:
    arr = np.asarray(depth)
    if arr.min(initial=0) < 0 or arr.max(initial=0) > 65535:
        raise ValueError("raw depth outside the 16-bit range")
    Image.fromarray(np.rint(arr).astype(np.uint16)).save(path)


def read_depth(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.array(im).astype(np.uint16)


def write_color(path, color: np.ndarray) -> None:
    Image.fromarray(np.clip(np.rint(color), 0, 255).astype(np.uint8), mode="RGB").save(path)


def read_color(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.array(im.convert("RGB"))


def write_label(path, labels: np.ndarray) -> None:
    Image.fromarray(np.asarray(labels).astype(np.uint8), mode="L").save(path)


def read_label(path) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode not in ("L", "P", "I", "I;16"):
            raise FormatError(f"{path}: label image must be single-channel")
        return np.array(im).astype(np.int64)


# -- response profiles -------------------------------------------------------

def read_profiles(path) -> ProfileTable:
    """``label_id restitution breaks(0|1) decal(hole|dent|none) sound_id``; a line
    starting with ``default`` sets the fallback."""
    table = ProfileTable()
    for no, line in _lines(path):
        parts = line.split()
        if len(parts) != 5:
            raise FormatError(f"{path}:{no}: expected 'label_id restitution breaks decal sound_id'")
        key, rest, brk, decal, sound = parts
        try:
            if brk not in ("0", "1"):
                raise ValueError(f"breaks must be 0 or 1, got {brk!r}")
            prof = ResponseProfile(float(rest), brk == "1", Decal(decal), sound)
            if key == "default":
                table.default = prof
            else:
                table.profiles[int(key)] = prof
        except ValueError as exc:
            raise FormatError(f"{path}:{no}: {exc}") from None
    return table


# -- dataset -----------------------------------------------------------------

class Dataset:
    """Read access to a dataset directory (see the module docstring)."""

    def __init__(self, root):
        self.root = Path(root)
        if not self.root.is_dir():
            raise FileNotFoundError(f"dataset directory {self.root} does not exist")
        self.intrinsics = read_intrinsics(self.root / "intrinsics.txt")
        classes = self.root / "classes.txt"
        self.classes = read_classes(classes) if classes.exists() else None
        depth_dir = self.root / "depth"
        self.frame_ids = sorted(int(p.stem) for p in depth_dir.glob("*.png")) if depth_dir.is_dir() else []

    @property
    def num_classes(self) -> int | None:
        return len(self.classes) if self.classes else None

    @property
    def class_names(self) -> list[str] | None:
        return [c.name for c in self.classes] if self.classes else None

    def poses(self) -> dict[int, Pose]:
        path = self.root / "poses.txt"
        if not path.exists():
            raise FileNotFoundError(f"{path} not found")
        return read_poses(path)

    def bounds(self):
        path = self.root / "bounds.txt"
        return read_bounds(path) if path.exists() else None

    def path(self, kind: str, frame_id: int) -> Path:
        ext = "sprb" if kind == "prob" else "png"
        return self.root / kind / f"{frame_name(frame_id)}.{ext}"

    def depth(self, frame_id: int) -> np.ndarray:
        return read_depth(self.path("depth", frame_id))

    def color(self, frame_id: int) -> np.ndarray | None:
        p = self.path("color", frame_id)
        return read_color(p) if p.exists() else None

    def probmap(self, frame_id: int) -> ProbMap | None:
        p = self.path("prob", frame_id)
        return read_probmap(p) if p.exists() else None

    def label(self, frame_id: int) -> np.ndarray:
        p = self.path("label", frame_id)
        if not p.exists():
            raise FileNotFoundError(f"ground-truth labels for frame {frame_id} not found: {p}")
        return read_label(p)
