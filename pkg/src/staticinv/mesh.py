"""
Tetrahedral meshes, Tetgen file I/O, boundary sets and material-cluster weights.

Indices are 0-based everywhere inside the package. Tetgen ``.node``/``.ele``
files are 1-based; the conversion happens in :func:`load_mesh` and
:func:`save_mesh` only.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "MeshError",
    "TetMesh",
    "ClusterMap",
    "PoseObservation",
    "load_mesh",
    "save_mesh",
    "save_node",
    "load_node",
    "load_fixed_vertices",
    "load_cluster_labels",
    "element_volume",
    "element_volumes",
    "edge_matrices",
    "build_cluster_weights",
    "surface_vertices",
]

MAX_GRAVITY = 2 * 9.81


class MeshError(ValueError):
    """Malformed mesh, boundary, label or pose data."""


@dataclass(frozen=True, eq=False)
class TetMesh:
    """Rest-state tetrahedral mesh.

    Attributes
    ----------
    nodes : ndarray, shape (n, 3)
        Rest positions in meters.
    tets : ndarray of int, shape (m, 4)
        Element connectivity, 0-based.
    fixed_vertices : ndarray of int
        Sorted indices of nodes pinned to their rest position.
    """

    nodes: np.ndarray
    tets: np.ndarray
    fixed_vertices: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __post_init__(self):
        nodes = np.array(self.nodes, dtype=np.float64)
        tets = np.array(self.tets, dtype=np.int64).reshape(-1, 4)
        fixed = np.unique(np.asarray(self.fixed_vertices, dtype=np.int64))
        if nodes.ndim != 2 or nodes.shape[1] != 3:
            raise MeshError(f"nodes must have shape (n, 3), got {nodes.shape}")
        n = nodes.shape[0]
        bad = np.flatnonzero(((tets < 0) | (tets >= n)).any(axis=1))
        if bad.size:
            raise MeshError(f"element indices out of range [0, {n}) in elements {bad.tolist()}")
        if fixed.size and (fixed[0] < 0 or fixed[-1] >= n):
            raise MeshError(f"fixed vertex index out of range [0, {n})")
        nodes.setflags(write=False)
        tets.setflags(write=False)
        fixed.setflags(write=False)
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "tets", tets)
        object.__setattr__(self, "fixed_vertices", fixed)

    @property
    def n_nodes(self) -> int:
        return self.nodes.shape[0]

    @property
    def n_tets(self) -> int:
        return self.tets.shape[0]

    @property
    def free_vertices(self) -> np.ndarray:
        mask = np.ones(self.n_nodes, dtype=bool)
        mask[self.fixed_vertices] = False
        return np.flatnonzero(mask)

    def free_dofs(self) -> np.ndarray:
        """Flat indices (3*node + axis) of unconstrained coordinates."""
        free = self.free_vertices
        return (3 * free[:, None] + np.arange(3)).ravel()

    def with_fixed(self, fixed_vertices) -> "TetMesh":
        return TetMesh(self.nodes, self.tets, fixed_vertices)

    def with_nodes(self, nodes) -> "TetMesh":
        return TetMesh(nodes, self.tets, self.fixed_vertices)

    def diameter(self) -> float:
        return float(np.linalg.norm(self.nodes.max(axis=0) - self.nodes.min(axis=0)))


@dataclass(frozen=True, eq=False)
class ClusterMap:
    """Per-element blend weights over ``num_clusters`` material clusters.

    ``weights`` is stored dense, shape (m, c); rows are sparse in practice
    but c is small.
    """

    num_clusters: int
    weights: np.ndarray

    def __post_init__(self):
        w = np.array(self.weights, dtype=np.float64)
        if w.ndim != 2 or w.shape[1] != self.num_clusters:
            raise MeshError(f"weights must have shape (m, {self.num_clusters}), got {w.shape}")
        if (w < 0).any():
            raise MeshError("cluster weights must be non-negative")
        if w.shape[0] and np.abs(w.sum(axis=1) - 1.0).max() > 1e-12:
            raise MeshError("cluster weight rows must sum to 1")
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)

    def row(self, e: int) -> dict[int, float]:
        """Nonzero weights of element ``e`` as ``{cluster: weight}``."""
        r = self.weights[e]
        return {int(i): float(r[i]) for i in np.flatnonzero(r)}

    @classmethod
    def homogeneous(cls, n_tets: int) -> "ClusterMap":
        return cls(1, np.ones((n_tets, 1)))


@dataclass(frozen=True, eq=False)
class PoseObservation:
    """Observed surface positions under one gravity vector in the canonical frame."""

    gravity: np.ndarray
    observed_ids: np.ndarray
    targets: np.ndarray

    def __post_init__(self):
        g = np.array(self.gravity, dtype=np.float64).reshape(3)
        ids = np.array(self.observed_ids, dtype=np.int64).reshape(-1)
        tg = np.array(self.targets, dtype=np.float64).reshape(-1, 3)
        if ids.size != tg.shape[0]:
            raise MeshError(f"{ids.size} observed ids but {tg.shape[0]} target positions")
        if np.unique(ids).size != ids.size:
            raise MeshError("observed ids must be unique")
        if np.linalg.norm(g) > MAX_GRAVITY:
            raise MeshError(f"|gravity| = {np.linalg.norm(g):.3f} exceeds {MAX_GRAVITY}")
        for a in (g, ids, tg):
            a.setflags(write=False)
        object.__setattr__(self, "gravity", g)
        object.__setattr__(self, "observed_ids", ids)
        object.__setattr__(self, "targets", tg)

    def validate(self, mesh: TetMesh) -> None:
        ids = self.observed_ids
        if ids.size and (ids.min() < 0 or ids.max() >= mesh.n_nodes):
            raise MeshError(f"observed ids out of range [0, {mesh.n_nodes})")
        clash = np.intersect1d(ids, mesh.fixed_vertices)
        if clash.size:
            raise MeshError(f"observed ids overlap fixed vertices: {clash.tolist()}")

    def residual(self, x: np.ndarray) -> np.ndarray:
        """``S x - x_bar`` as an (s, 3) array."""
        return np.asarray(x).reshape(-1, 3)[self.observed_ids] - self.targets


# ---------------------------------------------------------------------------
# geometry

def edge_matrices(positions: np.ndarray, tets: np.ndarray) -> np.ndarray:
    """Per-element edge matrices ``[p1-p0, p2-p0, p3-p0]`` (edges as columns), shape (m, 3, 3)."""
    p = np.asarray(positions).reshape(-1, 3)[tets]
    return np.ascontiguousarray((p[:, 1:, :] - p[:, :1, :]).transpose(0, 2, 1))


def element_volumes(positions: np.ndarray, tets: np.ndarray) -> np.ndarray:
    """Signed volumes of all elements."""
    return np.linalg.det(edge_matrices(positions, tets)) / 6.0


def element_volume(mesh: TetMesh, e: int) -> float:
    """Signed rest volume of element ``e``: det of the edge matrix over 6."""
    d = edge_matrices(mesh.nodes, mesh.tets[e:e + 1])[0]
    return float(np.linalg.det(d) / 6.0)


# ---------------------------------------------------------------------------
# Tetgen I/O

def _data_lines(path):
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if line:
                yield lineno, line.split()


def _parse_header(path, lines, what, width):
    try:
        lineno, tok = next(lines)
    except StopIteration:
        raise MeshError(f"{path}: empty {what} file") from None
    try:
        vals = [int(t) for t in tok]
    except ValueError:
        raise MeshError(f"{path}:{lineno}: malformed {what} header {' '.join(tok)!r}") from None
    if len(vals) < 2 or vals[0] < 0 or vals[1] != width:
        raise MeshError(f"{path}:{lineno}: expected '<count> {width} ...' header, got {' '.join(tok)!r}")
    return vals


def load_node(path) -> np.ndarray:
    """Read a Tetgen ``.node`` file; returns positions ordered by vertex id."""
    lines = _data_lines(path)
    header = _parse_header(path, lines, ".node", 3)
    count = header[0]
    n_attr = header[2] if len(header) > 2 else 0
    n_mark = header[3] if len(header) > 3 else 0
    out = np.empty((count, 3))
    seen = 0
    first_id = None
    for lineno, tok in lines:
        if seen == count:
            raise MeshError(f"{path}:{lineno}: more vertex rows than the header count {count}")
        if len(tok) != 4 + n_attr + n_mark:
            raise MeshError(f"{path}:{lineno}: expected {4 + n_attr + n_mark} columns, got {len(tok)}")
        try:
            vid = int(tok[0])
            xyz = [float(t) for t in tok[1:4]]
        except ValueError:
            raise MeshError(f"{path}:{lineno}: malformed vertex row") from None
        if first_id is None:
            first_id = vid
        idx = vid - first_id
        if idx != seen:
            raise MeshError(f"{path}:{lineno}: vertex ids must be consecutive, got {vid}")
        out[seen] = xyz
        seen += 1
    if seen != count:
        raise MeshError(f"{path}: header declares {count} vertices, found {seen}")
    if first_id not in (None, 1):
        raise MeshError(f"{path}: vertex ids must start at 1, got {first_id}")
    return out


def _load_ele(path, n_nodes):
    lines = _data_lines(path)
    header = _parse_header(path, lines, ".ele", 4)
    count = header[0]
    n_attr = header[2] if len(header) > 2 else 0
    out = np.empty((count, 4), dtype=np.int64)
    seen = 0
    for lineno, tok in lines:
        if seen == count:
            raise MeshError(f"{path}:{lineno}: more element rows than the header count {count}")
        if len(tok) != 5 + n_attr:
            raise MeshError(f"{path}:{lineno}: expected {5 + n_attr} columns, got {len(tok)}")
        try:
            ids = [int(t) for t in tok[1:5]]
        except ValueError:
            raise MeshError(f"{path}:{lineno}: malformed element row") from None
        for v in ids:
            if not 1 <= v <= n_nodes:
                raise MeshError(f"{path}:{lineno}: vertex index {v} out of range [1, {n_nodes}]")
        out[seen] = ids
        seen += 1
    if seen != count:
        raise MeshError(f"{path}: header declares {count} elements, found {seen}")
    return out - 1


def load_mesh(node_path, ele_path) -> TetMesh:
    """Load a Tetgen ASCII mesh and check every element has positive volume.

    Raises
    ------
    MeshError
        On malformed files (message carries the line number), out-of-range
        indices, or elements with non-positive signed volume.
    FileNotFoundError
        If either file is missing.
    """
    for p in (node_path, ele_path):
        if not os.path.exists(p):
            raise FileNotFoundError(f"mesh file not found: {p}")
    nodes = load_node(node_path)
    tets = _load_ele(ele_path, nodes.shape[0])
    vols = element_volumes(nodes, tets)
    bad = np.flatnonzero(~(vols > 0))
    if bad.size:
        raise MeshError(f"non-positive volume in elements {bad.tolist()}")
    return TetMesh(nodes, tets)


def save_node(path, positions) -> None:
    """Write positions as a Tetgen ``.node`` file (repr floats, round-trips exactly)."""
    positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    rows = [f"{len(positions)} 3 0 0"]
    rows += [f"{i + 1} {p[0]!r} {p[1]!r} {p[2]!r}" for i, p in enumerate(positions.tolist())]
    _atomic_write_text(path, "\n".join(rows) + "\n")


def save_mesh(mesh: TetMesh, node_path, ele_path) -> None:
    save_node(node_path, mesh.nodes)
    rows = [f"{mesh.n_tets} 4 0"]
    rows += [f"{e + 1} {t[0] + 1} {t[1] + 1} {t[2] + 1} {t[3] + 1}" for e, t in enumerate(mesh.tets.tolist())]
    _atomic_write_text(ele_path, "\n".join(rows) + "\n")


def _atomic_write_text(path, text):
    tmp = f"{path}.tmp{os.getpid()}"
    with open(tmp, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _load_int_column(path, what):
    out = []
    for lineno, tok in _data_lines(path):
        if len(tok) != 1:
            raise MeshError(f"{path}:{lineno}: expected one integer per line in {what} file")
        try:
            out.append(int(tok[0]))
        except ValueError:
            raise MeshError(f"{path}:{lineno}: malformed integer {tok[0]!r}") from None
    return np.array(out, dtype=np.int64)


def load_fixed_vertices(path) -> np.ndarray:
    """One 0-based node index per line; ``#`` starts a comment."""
    return _load_int_column(path, "fixed-vertex")


def load_cluster_labels(path) -> np.ndarray:
    """One integer cluster id per element, in element order."""
    return _load_int_column(path, "cluster label")


# ---------------------------------------------------------------------------
# clusters

def build_cluster_weights(mesh: TetMesh, labels, num_clusters: int) -> ClusterMap:
    """Blend weights from hard per-element labels.

    Interior elements get weight 1 on their own label. An element sharing a
    vertex with an element of another label gets uniform weights over the
    distinct labels in its vertex-adjacent neighborhood (itself included).
    """
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.size != mesh.n_tets:
        raise MeshError(f"{labels.size} labels for {mesh.n_tets} elements")
    bad = np.flatnonzero((labels < 0) | (labels >= num_clusters))
    if bad.size:
        raise MeshError(f"cluster labels out of range [0, {num_clusters}) in elements {bad[:20].tolist()}")
    n = mesh.n_nodes
    # labels present at each vertex
    present = np.zeros((n, num_clusters), dtype=bool)
    present[mesh.tets.ravel(), np.repeat(labels, 4)] = True
    hood = present[mesh.tets].any(axis=1)
    weights = hood / hood.sum(axis=1, keepdims=True)
    return ClusterMap(num_clusters, weights)


def surface_vertices(mesh: TetMesh) -> np.ndarray:
    """Sorted ids of vertices on boundary faces (faces owned by exactly one element)."""
    t = mesh.tets
    faces = np.concatenate([t[:, [1, 2, 3]], t[:, [0, 3, 2]], t[:, [0, 1, 3]], t[:, [0, 2, 1]]])
    key = np.sort(faces, axis=1)
    uniq, counts = np.unique(key, axis=0, return_counts=True)
    return np.unique(uniq[counts == 1])
