"""Fully connected CRF over mesh vertices with position, color and normal kernels.

The pairwise term between vertices i and j is ``mu(x_i, x_j) * k(f_i, f_j)``
with a Potts ``mu`` and

    k = w1 exp(-|dp|^2 / 2 theta_p^2)
      + w2 exp(-|dp|^2 / 2 theta_pI^2 - |dI|^2 / 2 theta_I^2)
      + w3 exp(-|dp|^2 / 2 theta_pn^2 - |dn|^2 / 2 theta_n^2)

Energies count every unordered vertex pair once.
"""
from __future__ import annotations

import dataclasses
import itertools
import logging

import numpy as np
from numba import njit

from .tsdf import SemanticMesh

__all__ = [
    "CrfParams",
    "VertexFeature",
    "CrfInstance",
    "unaries_from_distributions",
    "kernel",
    "kernel_matrix",
    "crf_energy",
    "mean_field_refine",
    "brute_force_map",
    "refine_mesh",
]

log = logging.getLogger(__name__)

EPS = 1e-6


@dataclasses.dataclass(frozen=True)
class CrfParams:
    w1: float = 3.0
    w2: float = 5.0
    w3: float = 3.0
    theta_p: float = 0.05
    theta_pI: float = 0.08
    theta_I: float = 20.0
    theta_pn: float = 0.05
    theta_n: float = 0.3
    iterations: int = 5
    exact_threshold: int = 20000
    """Largest vertex count handled by the exact O(N^2) message pass."""
    trunc_radius_factor: float = 4.0
    """Neighbour radius of the truncated pass, in multiples of the largest spatial bandwidth."""
    compatibility: str = "potts"

    def __post_init__(self):
        for name in ("w1", "w2", "w3"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        for name in ("theta_p", "theta_pI", "theta_I", "theta_pn", "theta_n"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.trunc_radius_factor <= 0:
            raise ValueError("trunc_radius_factor must be positive")
        if self.compatibility != "potts":
            raise ValueError("only the Potts compatibility is supported")

    @property
    def truncation_radius(self) -> float:
        return self.trunc_radius_factor * max(self.theta_p, self.theta_pI, self.theta_pn)


@dataclasses.dataclass(frozen=True)
class VertexFeature:
    p: np.ndarray
    I: np.ndarray
    n: np.ndarray


@dataclasses.dataclass
class CrfInstance:
    """Vertex features and an (N, C) array of unary costs."""

    positions: np.ndarray
    colors: np.ndarray
    normals: np.ndarray
    unaries: np.ndarray

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        self.colors = np.asarray(self.colors, dtype=np.float64).reshape(-1, 3)
        self.normals = np.asarray(self.normals, dtype=np.float64).reshape(-1, 3)
        self.unaries = np.asarray(self.unaries, dtype=np.float64)
        n = len(self.positions)
        if self.unaries.ndim != 2 or self.unaries.shape[0] != n:
            raise ValueError("unaries must have shape (N, C)")
        if self.unaries.shape[1] < 2:
            raise ValueError("a CRF needs at least two classes")
        if not np.all(np.isfinite(self.unaries)):
            raise ValueError("unaries must be finite")
        if len(self.colors) != n or len(self.normals) != n:
            raise ValueError("feature arrays must have N rows")

    @property
    def num_vertices(self) -> int:
        return len(self.positions)

    @property
    def num_classes(self) -> int:
        return self.unaries.shape[1]

    def feature(self, i: int) -> VertexFeature:
        return VertexFeature(self.positions[i], self.colors[i], self.normals[i])

    @classmethod
    def from_mesh(cls, mesh: SemanticMesh) -> CrfInstance:
        return cls(mesh.vertices, mesh.colors, mesh.normals, unaries_from_distributions(mesh))


def unaries_from_distributions(mesh_or_probs) -> np.ndarray:
    """Unary costs ``-log(max(p, 1e-6))`` from per-vertex distributions."""
    probs = mesh_or_probs.probs if isinstance(mesh_or_probs, SemanticMesh) else mesh_or_probs
    return -np.log(np.maximum(np.asarray(probs, dtype=np.float64), EPS))


def kernel(f_i: VertexFeature, f_j: VertexFeature, p: CrfParams) -> float:
    dp2 = float(np.sum((np.asarray(f_i.p, float) - np.asarray(f_j.p, float)) ** 2))
    dI2 = float(np.sum((np.asarray(f_i.I, float) - np.asarray(f_j.I, float)) ** 2))
    dn2 = float(np.sum((np.asarray(f_i.n, float) - np.asarray(f_j.n, float)) ** 2))
    return (p.w1 * np.exp(-dp2 / (2 * p.theta_p ** 2))
            + p.w2 * np.exp(-dp2 / (2 * p.theta_pI ** 2) - dI2 / (2 * p.theta_I ** 2))
            + p.w3 * np.exp(-dp2 / (2 * p.theta_pn ** 2) - dn2 / (2 * p.theta_n ** 2)))


def _sqdist(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # explicit differences, not the |a|^2 + |b|^2 - 2ab expansion: coincident
    # points must give exactly 0 and the result must be symmetric
    out = np.zeros((len(a), len(b)))
    for c in range(a.shape[1]):
        d = a[:, c, None] - b[None, :, c]
        out += d * d
    return out


def _kernel_from_sq(dp2, dI2, dn2, p: CrfParams):
    return (p.w1 * np.exp(-dp2 / (2 * p.theta_p ** 2))
            + p.w2 * np.exp(-dp2 / (2 * p.theta_pI ** 2) - dI2 / (2 * p.theta_I ** 2))
            + p.w3 * np.exp(-dp2 / (2 * p.theta_pn ** 2) - dn2 / (2 * p.theta_n ** 2)))


def kernel_matrix(inst: CrfInstance, p: CrfParams, rows=None) -> np.ndarray:
    """Dense kernel values between ``rows`` (default all) and every vertex.

    The self-pair entries are zero.
    """
    idx = np.arange(inst.num_vertices) if rows is None else np.asarray(rows)
    K = _kernel_from_sq(_sqdist(inst.positions[idx], inst.positions),
                        _sqdist(inst.colors[idx], inst.colors),
                        _sqdist(inst.normals[idx], inst.normals), p)
    K[np.arange(len(idx)), idx] = 0.0
    return K


def crf_energy(labeling, inst: CrfInstance, p: CrfParams) -> float:
    labeling = np.asarray(labeling, dtype=np.int64)
    if labeling.shape != (inst.num_vertices,):
        raise ValueError(f"labeling must have length {inst.num_vertices}")
    unary = inst.unaries[np.arange(inst.num_vertices), labeling].sum()
    K = kernel_matrix(inst, p)
    differ = labeling[:, None] != labeling[None, :]
    return float(unary + 0.5 * np.sum(K * differ))


@njit(cache=True)
def _pair_kernel(P, I, Nm, i, j, w, a):
    dp2 = 0.0
    dI2 = 0.0
    dn2 = 0.0
    for c in range(3):
        d = P[i, c] - P[j, c]
        dp2 += d * d
        d = I[i, c] - I[j, c]
        dI2 += d * d
        d = Nm[i, c] - Nm[j, c]
        dn2 += d * d
    return (w[0] * np.exp(-dp2 * a[0]) + w[1] * np.exp(-dp2 * a[1] - dI2 * a[2])
            + w[2] * np.exp(-dp2 * a[3] - dn2 * a[4])), dp2


@njit(cache=True)
def _messages_all(P, I, Nm, Q, w, a, out):
    n, C = Q.shape
    out[:] = 0.0
    for i in range(n):
        for j in range(i + 1, n):
            k, _ = _pair_kernel(P, I, Nm, i, j, w, a)
            for c in range(C):
                out[i, c] += k * Q[j, c]
                out[j, c] += k * Q[i, c]


@njit(cache=True)
def _messages_grid(P, I, Nm, Q, w, a, r2, cell, keys, starts, order, dims, out):
    # vertices sorted by cell; keys/starts describe the occupied cells
    n, C = Q.shape
    out[:] = 0.0
    nk = len(keys)
    for i in range(n):
        cx, cy, cz = cell[i, 0], cell[i, 1], cell[i, 2]
        for dz in range(-1, 2):
            z = cz + dz
            if z < 0 or z >= dims[2]:
                continue
            for dy in range(-1, 2):
                y = cy + dy
                if y < 0 or y >= dims[1]:
                    continue
                for dx in range(-1, 2):
                    x = cx + dx
                    if x < 0 or x >= dims[0]:
                        continue
                    key = x + dims[0] * (y + dims[1] * z)
                    s = np.searchsorted(keys, key)
                    if s >= nk or keys[s] != key:
                        continue
                    for t in range(starts[s], starts[s + 1]):
                        j = order[t]
                        if j <= i:
                            continue
                        k, dp2 = _pair_kernel(P, I, Nm, i, j, w, a)
                        if dp2 > r2:
                            continue
                        for c in range(C):
                            out[i, c] += k * Q[j, c]
                            out[j, c] += k * Q[i, c]


def _coefficients(p: CrfParams):
    w = np.array([p.w1, p.w2, p.w3], dtype=np.float64)
    a = 0.5 / np.array([p.theta_p, p.theta_pI, p.theta_I, p.theta_pn, p.theta_n]) ** 2
    return w, a


class _ExactMessages:
    """m_i(c) = sum_{j != i} k_ij Q_j(c) over every pair."""

    def __init__(self, inst: CrfInstance, p: CrfParams):
        self.inst = inst
        self.w, self.a = _coefficients(p)

    def __call__(self, Q: np.ndarray) -> np.ndarray:
        out = np.empty_like(Q)
        i = self.inst
        _messages_all(i.positions, i.colors, i.normals, Q, self.w, self.a, out)
        return out


class _TruncatedMessages:
    """Messages over pairs at most ``radius`` apart, found through a uniform grid
    of radius-sized cells; kernels are evaluated on the fly."""

    def __init__(self, inst: CrfInstance, p: CrfParams, radius: float):
        self.inst = inst
        self.w, self.a = _coefficients(p)
        self.r2 = radius * radius
        P = inst.positions
        lo = P.min(axis=0) if len(P) else np.zeros(3)
        cell = np.floor((P - lo) / radius).astype(np.int64)
        dims = cell.max(axis=0) + 1 if len(P) else np.ones(3, dtype=np.int64)
        key = cell[:, 0] + dims[0] * (cell[:, 1] + dims[1] * cell[:, 2])
        self.order = np.argsort(key, kind="stable")
        keys, starts = np.unique(key[self.order], return_index=True)
        self.keys = keys
        self.starts = np.append(starts, len(P)).astype(np.int64)
        self.cell, self.dims = cell, dims.astype(np.int64)

    def __call__(self, Q: np.ndarray) -> np.ndarray:
        out = np.empty_like(Q)
        i = self.inst
        _messages_grid(i.positions, i.colors, i.normals, Q, self.w, self.a, self.r2, self.cell,
                       self.keys, self.starts, self.order, self.dims, out)
        return out


def _softmax_neg(cost: np.ndarray) -> np.ndarray:
    z = -cost
    z -= z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def mean_field_refine(inst: CrfInstance, p: CrfParams, truncated: bool | None = None,
                      callback=None) -> tuple[np.ndarray, np.ndarray]:
    """Mean-field marginals of the fully connected CRF.

    Starting from ``Q ∝ exp(-unary)``, each iteration computes messages from
    the previous ``Q`` and replaces every row at once with
    ``normalize(exp(-unary - sum_{c' != c} m(c')))``.

    ``truncated`` picks the message pass; by default the exact pass is used
    up to ``p.exact_threshold`` vertices and the radius-truncated one above.
    ``callback(iteration, Q)`` is called after every iteration.

    Returns the (N, C) marginals and their argmax labeling.
    """
    n = inst.num_vertices
    if truncated is None:
        truncated = n > p.exact_threshold
    messages = (_TruncatedMessages(inst, p, p.truncation_radius) if truncated
                else _ExactMessages(inst, p))
    Q = _softmax_neg(inst.unaries)
    for it in range(1, p.iterations + 1):
        m = messages(Q)
        pairwise = m.sum(axis=1, keepdims=True) - m  # Potts: sum over c' != c
        Q_next = _softmax_neg(inst.unaries + pairwise)
        if not np.all(np.isfinite(Q_next)):
            raise FloatingPointError(f"mean-field iteration {it} produced non-finite marginals")
        Q = Q_next
        if callback is not None:
            callback(it, Q)
    return Q, np.argmax(Q, axis=1)


def brute_force_map(inst: CrfInstance, p: CrfParams, max_labelings: int = 10 ** 6) -> np.ndarray:
    """Exact minimum-energy labeling by enumeration.

    Ties go to the lexicographically smallest labeling.
    """
    n, C = inst.num_vertices, inst.num_classes
    if C ** n > max_labelings:
        raise ValueError(f"{C}^{n} labelings exceed the enumeration limit {max_labelings}")
    labelings = np.array(list(itertools.product(range(C), repeat=n)), dtype=np.int64)
    energy = inst.unaries[np.arange(n), labelings].sum(axis=1)
    K = kernel_matrix(inst, p)
    for i in range(n):
        for j in range(i + 1, n):
            energy += K[i, j] * (labelings[:, i] != labelings[:, j])
    return labelings[int(np.argmin(energy))]


def refine_mesh(mesh: SemanticMesh, p: CrfParams, truncated: bool | None = None) -> SemanticMesh:
    """Mesh with vertex distributions replaced by mean-field marginals."""
    if len(mesh) == 0:
        raise ValueError("cannot refine an empty mesh")
    inst = CrfInstance.from_mesh(mesh)
    Q, _ = mean_field_refine(inst, p, truncated=truncated)
    return mesh.replace(probs=Q)
