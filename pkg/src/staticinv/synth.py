"""
Synthetic benchmark: a block of hexahedral cells split into tets, banded
material clusters and rotated-gravity observations.
"""

from __future__ import annotations

import numpy as np

from .elasticity import MaterialModel
from .forward import DEFAULT_DENSITY, ForwardSolveError, SolverConfig, solve_quasistatic
from .mesh import PoseObservation, TetMesh, build_cluster_weights, element_volumes, surface_vertices

__all__ = [
    "GRAVITY",
    "make_block",
    "band_labels",
    "fixed_face",
    "rotation_angles",
    "rotated_gravity",
    "synthesize_poses",
    "banded_material",
]

GRAVITY = 9.81

_AXES = {"x": 0, "y": 1, "z": 2}

# corners of a unit cell indexed by (dx, dy, dz); two mirrored 5-tet splits
_EVEN = [((0, 0, 0), (1, 0, 0), (0, 1, 0), (0, 0, 1)),
         ((1, 1, 0), (0, 1, 0), (1, 0, 0), (1, 1, 1)),
         ((1, 0, 1), (1, 0, 0), (0, 0, 1), (1, 1, 1)),
         ((0, 1, 1), (0, 0, 1), (0, 1, 0), (1, 1, 1)),
         ((1, 0, 0), (0, 1, 0), (0, 0, 1), (1, 1, 1))]
_ODD = [tuple(tuple(1 - c if i == 0 else c for i, c in enumerate(v)) for v in tet) for tet in _EVEN]


def fixed_face(nodes, face="x-", tol=1e-12) -> np.ndarray:
    """Ids of nodes on an axis-aligned bounding face, e.g. ``"x-"`` or ``"z+"``."""
    ax = _AXES[face[0]]
    c = nodes[:, ax]
    target = c.min() if face[1] == "-" else c.max()
    return np.flatnonzero(np.abs(c - target) <= tol * max(1.0, abs(target)))


def make_block(cells=(2, 2, 10), cell_size=0.01, fixed="x-") -> TetMesh:
    """Axis-aligned block of ``cells`` hexahedra, five tets each, one face fixed.

    Cells alternate between two mirrored splits so face diagonals match.
    """
    nx, ny, nz = cells
    grid = np.stack(np.meshgrid(np.arange(nx + 1), np.arange(ny + 1), np.arange(nz + 1),
                                indexing="ij"), axis=-1).reshape(-1, 3)
    nodes = grid * float(cell_size)

    def vid(i, j, k):
        return (i * (ny + 1) + j) * (nz + 1) + k

    tets = []
    for i in range(nx):
        for j in range(ny):
            for k in range(nz):
                split = _EVEN if (i + j + k) % 2 == 0 else _ODD
                for tet in split:
                    tets.append([vid(i + a, j + b, k + c) for a, b, c in tet])
    tets = np.array(tets, dtype=np.int64)
    neg = element_volumes(nodes, tets) < 0
    tets[neg] = tets[neg][:, [0, 2, 1, 3]]
    fixed = fixed_face(nodes, fixed) if fixed else np.zeros(0, dtype=np.int64)
    return TetMesh(nodes, tets, fixed)


def band_labels(mesh: TetMesh, n_bands=3, axis="z") -> np.ndarray:
    """Label elements by equal-width bands of their centroid along ``axis``."""
    ax = _AXES[axis]
    cen = mesh.nodes[mesh.tets].mean(axis=1)[:, ax]
    lo, hi = mesh.nodes[:, ax].min(), mesh.nodes[:, ax].max()
    return np.minimum((n_bands * (cen - lo) / (hi - lo)).astype(np.int64), n_bands - 1)


def rotation_angles(n_poses, step_deg=30.0) -> np.ndarray:
    """Angles (degrees) evenly spaced by ``step_deg``, centred on 0, ascending.

    ``rotation_angles(5)`` is ``[-60, -30, 0, 30, 60]``.
    """
    return (np.arange(n_poses) - (n_poses - 1) / 2.0) * step_deg


def rotated_gravity(theta_deg, plane="xz", magnitude=GRAVITY) -> np.ndarray:
    """Gravity rotated by ``theta`` in ``plane``; the second axis is "down".

    For ``plane="xz"``: ``magnitude * (sin t, 0, -cos t)``.
    """
    a, b = _AXES[plane[0]], _AXES[plane[1]]
    t = np.deg2rad(theta_deg)
    g = np.zeros(3)
    g[a] = magnitude * np.sin(t)
    g[b] = -magnitude * np.cos(t)
    return g


def synthesize_poses(mesh: TetMesh, material: MaterialModel, gravities, density=DEFAULT_DENSITY,
                     noise_std=0.0, rng=None, observed=None, solver: SolverConfig | None = None):
    """Forward-simulate ``mesh.nodes`` under each gravity and observe the free surface.

    Returns ``(poses, states)``. Targets get i.i.d. Gaussian noise of
    ``noise_std`` meters per coordinate.
    """
    if observed is None:
        observed = np.setdiff1d(surface_vertices(mesh), mesh.fixed_vertices)
    rng = np.random.default_rng() if rng is None else rng
    poses, states = [], []
    for k, g in enumerate(gravities):
        state = solve_quasistatic(mesh, material, g, density, config=solver)
        if not state.converged:
            raise ForwardSolveError(state.message, state, pose=k)
        targets = state.positions[observed]
        if noise_std:
            targets = targets + rng.normal(0.0, noise_std, size=targets.shape)
        poses.append(PoseObservation(g, observed, targets))
        states.append(state)
    return poses, states


def banded_material(mesh, cluster_E, n_bands=None, axis="z", poisson=0.43) -> MaterialModel:
    cluster_E = np.asarray(cluster_E, dtype=np.float64)
    n_bands = cluster_E.size if n_bands is None else n_bands
    labels = band_labels(mesh, n_bands, axis)
    return MaterialModel(cluster_E, build_cluster_weights(mesh, labels, n_bands), poisson)
