"""Oct-tree accelerated semantic ray casting and material response lookup."""
from __future__ import annotations

import dataclasses
import enum

import numba
import numpy as np

from .tsdf import SemanticMesh

__all__ = [
    "OctreeIndex",
    "SemanticHit",
    "RayHits",
    "Decal",
    "ResponseProfile",
    "ProfileTable",
    "Response",
    "build_octree",
    "semantic_raycast",
    "raycast_many",
    "brute_force_raycast",
    "interaction_response",
]


@dataclasses.dataclass(frozen=True, eq=False)
class OctreeIndex:
    """Flattened oct-tree over mesh triangles.

    Node ``i`` has box ``[lo[i], hi[i]]``; ``children[i, c]`` is -1 when absent
    (child bit 0 is +x, bit 1 is +y, bit 2 is +z). Leaves own the slice
    ``tri_ids[start[i]:start[i] + count[i]]``. A triangle is stored in every
    leaf its bounding box overlaps.
    """

    lo: np.ndarray
    hi: np.ndarray
    children: np.ndarray
    depth: np.ndarray
    start: np.ndarray
    count: np.ndarray
    tri_ids: np.ndarray
    triangles: np.ndarray
    """(F, 3, 3) triangle corner positions."""
    max_depth: int
    leaf_capacity: int

    @property
    def num_nodes(self) -> int:
        return len(self.lo)

    def is_leaf(self, i: int) -> bool:
        return bool(np.all(self.children[i] < 0))

    def leaves(self) -> np.ndarray:
        return np.flatnonzero(np.all(self.children < 0, axis=1))

    def leaf_triangles(self, i: int) -> np.ndarray:
        return self.tri_ids[self.start[i]:self.start[i] + self.count[i]]


def _overlaps(tri_lo, tri_hi, lo, hi) -> np.ndarray:
    return np.all((tri_lo <= hi) & (tri_hi >= lo), axis=1)


def build_octree(mesh: SemanticMesh, max_depth: int = 10, leaf_capacity: int = 16) -> OctreeIndex:
    """Subdivide at box centers until a node holds at most ``leaf_capacity``
    triangles or reaches ``max_depth``."""
    if len(mesh.faces) == 0:
        raise ValueError("cannot index an empty mesh")
    if max_depth < 0 or leaf_capacity < 1:
        raise ValueError("max_depth must be >= 0 and leaf_capacity >= 1")
    tris = np.ascontiguousarray(mesh.vertices[mesh.faces])
    tri_lo = tris.min(axis=1)
    tri_hi = tris.max(axis=1)
    root_lo = tri_lo.min(axis=0)
    root_hi = tri_hi.max(axis=0)
    pad = 1e-7 * max(float(np.max(root_hi - root_lo)), 1.0)
    root_lo = root_lo - pad
    root_hi = root_hi + pad

    lo, hi, children, depth, start, count = [], [], [], [], [], []
    tri_chunks = []
    n_stored = 0
    # explicit stack, children pushed in reverse so nodes are numbered depth-first
    stack = [(-1, 0, root_lo, root_hi, 0, np.arange(len(tris)))]
    while stack:
        parent, slot, nlo, nhi, d, ids = stack.pop()
        node = len(lo)
        lo.append(nlo)
        hi.append(nhi)
        children.append([-1] * 8)
        depth.append(d)
        if parent >= 0:
            children[parent][slot] = node
        if len(ids) <= leaf_capacity or d >= max_depth:
            start.append(n_stored)
            count.append(len(ids))
            tri_chunks.append(ids)
            n_stored += len(ids)
            continue
        start.append(n_stored)
        count.append(0)
        mid = 0.5 * (nlo + nhi)
        pending = []
        for c in range(8):
            bits = np.array([(c >> a) & 1 for a in range(3)], dtype=bool)
            clo = np.where(bits, mid, nlo)
            chi = np.where(bits, nhi, mid)
            sub = ids[_overlaps(tri_lo[ids], tri_hi[ids], clo, chi)]
            if len(sub):
                pending.append((node, c, clo, chi, d + 1, sub))
        stack.extend(reversed(pending))

    tri_ids = np.concatenate(tri_chunks).astype(np.int64) if tri_chunks else np.zeros(0, np.int64)
    return OctreeIndex(
        lo=np.array(lo), hi=np.array(hi), children=np.array(children, dtype=np.int64),
        depth=np.array(depth, dtype=np.int64), start=np.array(start, dtype=np.int64),
        count=np.array(count, dtype=np.int64), tri_ids=tri_ids, triangles=tris,
        max_depth=max_depth, leaf_capacity=leaf_capacity)


@numba.njit(cache=True)
def _slab(o, inv, dzero, lo, hi):
    t0 = -np.inf
    t1 = np.inf
    for a in range(3):
        if dzero[a]:
            if o[a] < lo[a] or o[a] > hi[a]:
                return np.inf, -np.inf
        else:
            ta = (lo[a] - o[a]) * inv[a]
            tb = (hi[a] - o[a]) * inv[a]
            if ta > tb:
                ta, tb = tb, ta
            if ta > t0:
                t0 = ta
            if tb < t1:
                t1 = tb
    return t0, t1


@numba.njit(cache=True)
def _watertight(tri, o, kx, ky, kz, sx, sy, sz):
    """Watertight ray/triangle test in the ray's shear frame.

    Returns (hit, t, b0, b1, b2), barycentrics weighting the three corners.
    """
    ax = tri[0, kx] - o[kx]
    ay = tri[0, ky] - o[ky]
    az = tri[0, kz] - o[kz]
    bx = tri[1, kx] - o[kx]
    by = tri[1, ky] - o[ky]
    bz = tri[1, kz] - o[kz]
    cx = tri[2, kx] - o[kx]
    cy = tri[2, ky] - o[ky]
    cz = tri[2, kz] - o[kz]
    ax = ax - sx * az
    ay = ay - sy * az
    bx = bx - sx * bz
    by = by - sy * bz
    cx = cx - sx * cz
    cy = cy - sy * cz
    u = cx * by - cy * bx
    v = ax * cy - ay * cx
    w = bx * ay - by * ax
    if (u < 0.0 or v < 0.0 or w < 0.0) and (u > 0.0 or v > 0.0 or w > 0.0):
        return False, 0.0, 0.0, 0.0, 0.0
    det = u + v + w
    if det == 0.0:
        return False, 0.0, 0.0, 0.0, 0.0
    t = (u * sz * az + v * sz * bz + w * sz * cz) / det
    if t < 0.0:
        return False, 0.0, 0.0, 0.0, 0.0
    return True, t, u / det, v / det, w / det


@numba.njit(cache=True)
def _trace(origins, dirs, lo, hi, children, start, count, tri_ids, tris, max_depth,
           out_tri, out_t, out_bary, out_tests):
    stack_node = np.empty(8 * (max_depth + 2), dtype=np.int64)
    stack_t = np.empty(8 * (max_depth + 2))
    cand_node = np.empty(8, dtype=np.int64)
    cand_t = np.empty(8)
    inv = np.empty(3)
    dzero = np.zeros(3, dtype=np.bool_)
    for r in range(origins.shape[0]):
        o = origins[r]
        d = dirs[r]
        for a in range(3):
            dzero[a] = d[a] == 0.0
            inv[a] = 1.0 / d[a] if not dzero[a] else 0.0
        kz = 0
        if abs(d[1]) > abs(d[kz]):
            kz = 1
        if abs(d[2]) > abs(d[kz]):
            kz = 2
        kx = (kz + 1) % 3
        ky = (kx + 1) % 3
        if d[kz] < 0.0:
            kx, ky = ky, kx
        sx = d[kx] / d[kz]
        sy = d[ky] / d[kz]
        sz = 1.0 / d[kz]

        best_t = np.inf
        best_tri = -1
        b0 = 0.0
        b1 = 0.0
        b2 = 0.0
        tests = 0
        t0, t1 = _slab(o, inv, dzero, lo[0], hi[0])
        sp = 0
        if t0 <= t1 and t1 >= 0.0:
            stack_node[0] = 0
            stack_t[0] = max(t0, 0.0)
            sp = 1
        while sp > 0:
            sp -= 1
            node = stack_node[sp]
            if stack_t[sp] > best_t:
                continue
            is_leaf = True
            nc = 0
            for c in range(8):
                ch = children[node, c]
                if ch >= 0:
                    is_leaf = False
                    c0, c1 = _slab(o, inv, dzero, lo[ch], hi[ch])
                    if c0 <= c1 and c1 >= 0.0:
                        c0 = max(c0, 0.0)
                        if c0 <= best_t:
                            # insertion sort, farthest first so the nearest is popped first
                            pos = nc
                            while pos > 0 and cand_t[pos - 1] < c0:
                                cand_t[pos] = cand_t[pos - 1]
                                cand_node[pos] = cand_node[pos - 1]
                                pos -= 1
                            cand_t[pos] = c0
                            cand_node[pos] = ch
                            nc += 1
            if is_leaf:
                for s in range(start[node], start[node] + count[node]):
                    tri = tri_ids[s]
                    tests += 1
                    hit, t, u, v, w = _watertight(tris[tri], o, kx, ky, kz, sx, sy, sz)
                    if hit and (t < best_t or (t == best_t and tri < best_tri)):
                        best_t = t
                        best_tri = tri
                        b0 = u
                        b1 = v
                        b2 = w
            else:
                for c in range(nc):
                    stack_node[sp] = cand_node[c]
                    stack_t[sp] = cand_t[c]
                    sp += 1
        out_tri[r] = best_tri
        out_t[r] = best_t if best_tri >= 0 else np.nan
        out_bary[r, 0] = b0
        out_bary[r, 1] = b1
        out_bary[r, 2] = b2
        out_tests[r] = tests


@dataclasses.dataclass(frozen=True)
class SemanticHit:
    point: np.ndarray
    normal: np.ndarray
    """Unit surface normal facing the incoming ray."""
    distance: float
    label: int
    confidence: float
    triangle: int
    direction: np.ndarray
    """Unit ray direction."""


@dataclasses.dataclass
class RayHits:
    """Results of a batch of rays; ``triangle == -1`` marks a miss."""

    triangle: np.ndarray
    distance: np.ndarray
    barycentric: np.ndarray
    label: np.ndarray
    confidence: np.ndarray
    point: np.ndarray
    normal: np.ndarray
    triangles_tested: np.ndarray

    @property
    def hit(self) -> np.ndarray:
        return self.triangle >= 0


def _normalize_rays(origins, directions):
    origins = np.ascontiguousarray(np.asarray(origins, dtype=np.float64).reshape(-1, 3))
    dirs = np.asarray(directions, dtype=np.float64).reshape(-1, 3)
    norm = np.linalg.norm(dirs, axis=1, keepdims=True)
    if np.any(norm == 0) or not np.all(np.isfinite(norm)):
        raise ValueError("ray direction must be non-zero and finite")
    if len(origins) == 1 and len(dirs) > 1:
        origins = np.ascontiguousarray(np.broadcast_to(origins, dirs.shape))
    return origins, np.ascontiguousarray(dirs / norm)


def _decorate(mesh: SemanticMesh, origins, dirs, tri, t, bary, tests) -> RayHits:
    n = len(tri)
    hit = tri >= 0
    label = np.full(n, -1, dtype=np.int64)
    conf = np.full(n, np.nan)
    point = np.full((n, 3), np.nan)
    normal = np.full((n, 3), np.nan)
    if hit.any():
        corners = mesh.faces[tri[hit]]
        # barycentric-nearest vertex; ties go to the first corner
        nearest = corners[np.arange(len(corners)), np.argmax(bary[hit], axis=1)]
        label[hit] = mesh.labels[nearest]
        conf[hit] = mesh.confidence[nearest]
        point[hit] = origins[hit] + t[hit, None] * dirs[hit]
        nrm = np.einsum("ij,ijk->ik", bary[hit], mesh.normals[corners])
        length = np.linalg.norm(nrm, axis=1)
        tri_pts = mesh.vertices[corners]
        geo = np.cross(tri_pts[:, 1] - tri_pts[:, 0], tri_pts[:, 2] - tri_pts[:, 0])
        geo /= np.linalg.norm(geo, axis=1, keepdims=True)
        bad = length < 1e-9
        nrm = np.where(bad[:, None], geo, nrm / np.where(bad, 1.0, length)[:, None])
        flip = np.einsum("ij,ij->i", nrm, dirs[hit]) > 0
        nrm[flip] *= -1.0
        normal[hit] = nrm
    return RayHits(tri, t, bary, label, conf, point, normal, tests)


def raycast_many(idx: OctreeIndex, mesh: SemanticMesh, origins, directions) -> RayHits:
    """Nearest semantic hits for a batch of rays (directions need not be unit)."""
    origins, dirs = _normalize_rays(origins, directions)
    n = len(dirs)
    tri = np.empty(n, dtype=np.int64)
    t = np.empty(n)
    bary = np.empty((n, 3))
    tests = np.empty(n, dtype=np.int64)
    _trace(origins, dirs, idx.lo, idx.hi, idx.children, idx.start, idx.count, idx.tri_ids,
           idx.triangles, idx.max_depth, tri, t, bary, tests)
    return _decorate(mesh, origins, dirs, tri, t, bary, tests)


def semantic_raycast(idx: OctreeIndex, mesh: SemanticMesh, origin, direction) -> SemanticHit | None:
    """Nearest hit of one ray, or None on a miss."""
    res = raycast_many(idx, mesh, origin, direction)
    if res.triangle[0] < 0:
        return None
    _, dirs = _normalize_rays(origin, direction)
    return SemanticHit(point=res.point[0], normal=res.normal[0], distance=float(res.distance[0]),
                       label=int(res.label[0]), confidence=float(res.confidence[0]),
                       triangle=int(res.triangle[0]), direction=dirs[0])


def brute_force_raycast(mesh: SemanticMesh, origins, directions) -> RayHits:
    """Reference caster: Moller-Trumbore against every triangle, no index."""
    origins, dirs = _normalize_rays(origins, directions)
    tris = mesh.vertices[mesh.faces]
    v0 = tris[:, 0]
    e1 = tris[:, 1] - v0
    e2 = tris[:, 2] - v0
    n = len(dirs)
    tri_out = np.full(n, -1, dtype=np.int64)
    t_out = np.full(n, np.nan)
    bary = np.zeros((n, 3))
    for r in range(n):
        d = dirs[r]
        pvec = np.cross(d, e2)
        det = np.einsum("ij,ij->i", e1, pvec)
        ok = np.abs(det) > 1e-15
        inv = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
        tvec = origins[r] - v0
        u = np.einsum("ij,ij->i", tvec, pvec) * inv
        qvec = np.cross(tvec, e1)
        v = (qvec @ d) * inv
        t = np.einsum("ij,ij->i", e2, qvec) * inv
        ok &= (u >= 0) & (v >= 0) & (u + v <= 1) & (t >= 0)
        if ok.any():
            t = np.where(ok, t, np.inf)
            j = int(np.argmin(t))  # first minimum, i.e. lowest triangle id on ties
            tri_out[r] = j
            t_out[r] = t[j]
            bary[r] = (1 - u[j] - v[j], u[j], v[j])
    tests = np.full(n, len(tris), dtype=np.int64)
    return _decorate(mesh, origins, dirs, tri_out, t_out, bary, tests)


class Decal(str, enum.Enum):
    HOLE = "hole"
    DENT = "dent"
    NONE = "none"


@dataclasses.dataclass(frozen=True)
class ResponseProfile:
    restitution: float = 0.5
    breaks_projectile: bool = False
    decal: Decal = Decal.NONE
    sound_id: str = "none"

    def __post_init__(self):
        if not 0.0 <= self.restitution <= 1.0:
            raise ValueError(f"restitution {self.restitution} outside [0, 1]")
        object.__setattr__(self, "decal", Decal(self.decal))


@dataclasses.dataclass
class ProfileTable:
    """Label id to response profile, with a fallback for unknown labels."""

    profiles: dict[int, ResponseProfile] = dataclasses.field(default_factory=dict)
    default: ResponseProfile = dataclasses.field(default_factory=ResponseProfile)

    def lookup(self, label: int) -> ResponseProfile:
        return self.profiles.get(int(label), self.default)

    def missing(self, class_ids) -> list[int]:
        """Class ids that fall back to the default profile."""
        return [int(c) for c in class_ids if int(c) not in self.profiles]


@dataclasses.dataclass(frozen=True)
class Response:
    label: int
    kind: str
    """"break" or "bounce"."""
    decal: Decal
    sound_id: str
    velocity: np.ndarray | None
    """Outgoing velocity for a bounce, None for a break."""


def interaction_response(hit: SemanticHit, profiles: ProfileTable, incident=None) -> Response:
    """Material response at a hit.

    The projectile breaks when the label's profile says so; otherwise the
    incident velocity (default: the ray direction) is mirrored about the
    surface normal and scaled by the restitution.
    """
    prof = profiles.lookup(hit.label)
    if prof.breaks_projectile:
        return Response(hit.label, "break", prof.decal, prof.sound_id, None)
    v = np.asarray(hit.direction if incident is None else incident, dtype=np.float64)
    n = np.asarray(hit.normal, dtype=np.float64)
    reflected = prof.restitution * (v - 2.0 * np.dot(v, n) * n)
    return Response(hit.label, "bounce", prof.decal, prof.sound_id, reflected)
