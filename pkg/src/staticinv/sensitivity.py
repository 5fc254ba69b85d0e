"""
Adjoint gradients of the multi-pose surface-fitting objective.

For each pose the objective term is ``0.5 * |S x - x_bar|^2`` where ``x``
solves the equilibrium equations. One adjoint solve per pose,

    K(x) lam = S^T (S x - x_bar)        (free coordinates, lam = 0 at fixed ones)

with ``K`` the unprojected stiffness, gives

    dg/dE_e = -lam . dF_e/dE_e            (elastic forces are linear in E_e)
    dg/dX   = lam . (d f_ext/dX - d(grad_x W)/dX) + alpha dR/dX

where ``R(X) = W(X0, X, P0)`` is the elastic-energy regularizer.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import elasticity as el
from .forward import (
    DEFAULT_DENSITY,
    EquilibriumState,
    ForwardSolveError,
    SolverConfig,
    factorize,
    gravity_rest_derivative,
    solve_quasistatic,
)
from .mesh import PoseObservation, TetMesh

__all__ = [
    "ObjectiveReport",
    "adjoint_solve",
    "adjoint_rhs",
    "gradient_wrt_clusters",
    "gradient_wrt_rest",
    "regularizer",
    "Objective",
    "evaluate_objective",
]

log = logging.getLogger(__name__)


@dataclass
class ObjectiveReport:
    value: float
    data_term: float
    reg_term: float
    alpha: float
    grad_clusters: np.ndarray | None
    grad_rest: np.ndarray | None
    per_pose_rms: list
    per_pose_data: list
    states: list = field(default_factory=list)
    adjoint_shift: float = 0.0


def adjoint_rhs(x, pose: PoseObservation, n_nodes: int) -> np.ndarray:
    """``S^T (S x - x_bar)`` as a flat length-3n vector."""
    rhs = np.zeros((n_nodes, 3))
    rhs[pose.observed_ids] = pose.residual(x)
    return rhs.ravel()


def _adjoint(equilibrium, mesh, material, pose, rest, threshold):
    X = mesh.nodes if rest is None else np.asarray(rest).reshape(-1, 3)
    x = equilibrium.positions
    rhs = adjoint_rhs(x, pose, mesh.n_nodes)
    lam = np.zeros(3 * mesh.n_nodes)
    free = mesh.free_dofs()
    b = rhs[free]
    if free.size == 0 or not np.any(b):
        return lam, 0.0
    K = el.total_hessian(X, x, mesh.tets, material, threshold)[free][:, free]
    fac = factorize(K, b)
    lam[free] = fac.solve(b)
    return lam, fac.shift


def adjoint_solve(equilibrium: EquilibriumState, mesh: TetMesh, material, pose: PoseObservation,
                  rest=None, threshold=el.DEFAULT_THRESHOLD) -> np.ndarray:
    """Solve the adjoint system with the exact (unprojected) stiffness at equilibrium.

    Returns the adjoint vector, flat length 3n, zero at fixed vertices.
    """
    lam, _ = _adjoint(equilibrium, mesh, material, pose, rest, threshold)
    return lam


def gradient_wrt_clusters(lam, equilibrium: EquilibriumState, mesh: TetMesh, material,
                          rest=None, threshold=el.DEFAULT_THRESHOLD) -> np.ndarray:
    """Derivative of the data term with respect to each cluster's Young's modulus (m^2/Pa)."""
    X = mesh.nodes if rest is None else rest
    prod = el.element_force_products(X, equilibrium.positions, lam, mesh.tets, material, threshold)
    dE_elem = -prod / material.element_E()
    return material.cluster_map.weights.T @ dE_elem


def regularizer(X, X0, tets, P0, threshold=el.DEFAULT_THRESHOLD) -> float:
    """``R(X) = W(X0, X, P0)``: elastic energy of deforming ``X0`` into ``X``."""
    return el.total_energy(X0, X, tets, P0, threshold)


def gradient_wrt_rest(lam, equilibrium: EquilibriumState, mesh: TetMesh, material, pose: PoseObservation,
                      alpha, X0, P0, density=DEFAULT_DENSITY, rest=None,
                      threshold=el.DEFAULT_THRESHOLD, include_regularizer=True) -> np.ndarray:
    """Derivative of the objective with respect to rest positions, flat length 3n.

    Adds ``alpha * dR/dX`` when ``include_regularizer`` is set; fixed
    coordinates are zeroed.
    """
    X = np.asarray(mesh.nodes if rest is None else rest).reshape(-1, 3)
    tets = mesh.tets
    grad = gravity_rest_derivative(X, tets, density, pose.gravity, lam)
    grad -= el.rest_derivative_of_force_product(X, equilibrium.positions, lam, tets, material, threshold)
    if include_regularizer and alpha:
        grad += alpha * el.total_gradient(X0, X, tets, P0, threshold)
    grad = grad.reshape(-1, 3)
    grad[mesh.fixed_vertices] = 0.0
    return grad.ravel()


class Objective:
    """Multi-pose objective over (rest shape, cluster moduli) with adjoint gradients.

    Keeps the last displacement field per pose to warm-start the next
    forward solves; everything else is recomputed on each call.
    """

    def __init__(self, mesh: TetMesh, material: "el.MaterialModel", poses, alpha=0.0, X0=None, P0=None,
                 density=DEFAULT_DENSITY, solver: SolverConfig | None = None, threads=1,
                 warm_start=True):
        if not poses:
            raise ValueError("at least one pose is required")
        for p in poses:
            p.validate(mesh)
        self.mesh = mesh
        self.material = material
        self.poses = list(poses)
        self.alpha = float(alpha)
        self.X0 = mesh.nodes if X0 is None else np.asarray(X0).reshape(-1, 3)
        self.P0 = P0
        if self.alpha and P0 is None:
            raise ValueError("a regularizer material is required when alpha > 0")
        self.density = density
        self.solver = solver or SolverConfig()
        self.threads = max(1, int(threads))
        self.warm_start = warm_start
        self._disp = [None] * len(self.poses)
        self.n_evals = 0

    @property
    def threshold(self):
        return self.solver.inversion_threshold

    def forward(self, X, cluster_E, k):
        X = np.asarray(X).reshape(-1, 3)
        mat = self.material.with_E(cluster_E)
        x_init = X + self._disp[k] if (self.warm_start and self._disp[k] is not None) else None
        state = solve_quasistatic(self.mesh, mat, self.poses[k].gravity, self.density, x_init,
                                  self.solver, rest=X)
        if not state.converged and x_init is not None:
            state = solve_quasistatic(self.mesh, mat, self.poses[k].gravity, self.density, None,
                                      self.solver, rest=X)
        if not state.converged:
            raise ForwardSolveError(state.message, state, pose=k)
        return state

    def _pose_terms(self, X, cluster_E, k, want_E, want_X):
        mat = self.material.with_E(cluster_E)
        pose = self.poses[k]
        state = self.forward(X, cluster_E, k)
        res = pose.residual(state.positions)
        data = 0.5 * float((res**2).sum())
        rms = float(np.sqrt((res**2).sum(axis=1).mean())) if len(res) else 0.0
        gE = gX = None
        shift = 0.0
        if want_E or want_X:
            lam, shift = _adjoint(state, self.mesh, mat, pose, X, self.threshold)
            if want_E:
                gE = gradient_wrt_clusters(lam, state, self.mesh, mat, X, self.threshold)
            if want_X:
                gX = gradient_wrt_rest(lam, state, self.mesh, mat, pose, 0.0, None, None, self.density,
                                       X, self.threshold, include_regularizer=False)
        return state, data, rms, gE, gX, shift

    def __call__(self, X, cluster_E, want_E=True, want_X=True) -> ObjectiveReport:
        X = np.asarray(X, dtype=np.float64).reshape(-1, 3)
        cluster_E = np.asarray(cluster_E, dtype=np.float64)
        ks = range(len(self.poses))
        if self.threads > 1 and len(self.poses) > 1:
            with ThreadPoolExecutor(max_workers=min(self.threads, len(self.poses))) as ex:
                results = list(ex.map(lambda k: self._pose_terms(X, cluster_E, k, want_E, want_X), ks))
        else:
            results = [self._pose_terms(X, cluster_E, k, want_E, want_X) for k in ks]
        self.n_evals += 1
        data = 0.0
        gE = np.zeros(cluster_E.size) if want_E else None
        gX = np.zeros(X.size) if want_X else None
        states, rms, datas = [], [], []
        shift = 0.0
        for k, (state, d, r, ge, gx, sh) in enumerate(results):
            data += d
            datas.append(d)
            rms.append(r)
            states.append(state)
            shift = max(shift, sh)
            if want_E:
                gE += ge
            if want_X:
                gX += gx
            self._disp[k] = state.positions - X
        reg = 0.0
        if self.alpha:
            reg = regularizer(X, self.X0, self.mesh.tets, self.P0, self.threshold)
            if want_X:
                gR = el.total_gradient(self.X0, X, self.mesh.tets, self.P0, self.threshold).reshape(-1, 3)
                gR[self.mesh.fixed_vertices] = 0.0
                gX += self.alpha * gR.ravel()
        return ObjectiveReport(data + self.alpha * reg, data, reg, self.alpha, gE, gX, rms, datas,
                               states, shift)


def evaluate_objective(mesh: TetMesh, X, material, poses, alpha=0.0, X0=None, P0=None,
                       density=DEFAULT_DENSITY, config: SolverConfig | None = None, threads=1,
                       want_E=True, want_X=True) -> ObjectiveReport:
    """One cold-started evaluation of the multi-pose objective and both gradient blocks."""
    obj = Objective(mesh, material, poses, alpha, X0, P0, density, config, threads, warm_start=False)
    return obj(X, material.cluster_E, want_E, want_X)
