"""
Quasi-static equilibrium under gravity.

Solves ``grad_x W(X, x, P) = f_ext(X)`` on the free vertices with a
projected Newton method: element stiffness blocks are projected to PSD, the
step is capped so no element loses more than 99% of its current volume, and
a halving line search keeps the potential ``W - f_ext . (x - X)``
non-increasing.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import elasticity as el
from .mesh import TetMesh, edge_matrices, element_volumes

__all__ = [
    "DEFAULT_DENSITY",
    "SolverConfig",
    "EquilibriumState",
    "ForwardSolveError",
    "FactorizationError",
    "gravity_force",
    "gravity_rest_derivative",
    "residual_tolerance",
    "factorize",
    "max_noninversion_step",
    "solve_quasistatic",
    "free_residual_norm",
]

log = logging.getLogger(__name__)

DEFAULT_DENSITY = 1000.0


class ForwardSolveError(RuntimeError):
    """A quasi-static solve did not converge."""

    def __init__(self, message, state=None, pose=None):
        if pose is not None:
            message = f"pose {pose}: {message}"
        super().__init__(message)
        self.state = state
        self.pose = pose


class FactorizationError(RuntimeError):
    """The stiffness matrix could not be factorized even with a Tikhonov shift."""


@dataclass
class SolverConfig:
    """Newton solver settings.

    ``residual_tol=None`` selects the force-scale tolerance
    ``1e-8 * n * |g| * rho * mean_volume`` (times ``tol_scale``), floored at
    ``1e-12 * mean_E * mean_volume**(2/3)`` so that unloaded problems stop at
    round-off.

    ``polish_iters`` extra Newton steps are taken after the tolerance is met,
    each kept only while it at least halves the residual. Finite-difference
    oracles use this to push the equilibrium down to round-off.
    """

    residual_tol: float | None = None
    tol_scale: float = 1.0
    max_newton_iters: int = 100
    inversion_threshold: float = el.DEFAULT_THRESHOLD
    polish_iters: int = 0

    def __post_init__(self):
        if self.residual_tol is not None and not self.residual_tol > 0:
            raise ValueError("residual_tol must be positive")
        if not (self.tol_scale > 0 and self.max_newton_iters > 0 and self.inversion_threshold > 0):
            raise ValueError("solver settings must be positive")
        if self.polish_iters < 0:
            raise ValueError("polish_iters must be non-negative")


@dataclass
class EquilibriumState:
    positions: np.ndarray
    residual_norm: float
    iterations: int
    tikhonov_shift: float = 0.0
    converged: bool = True
    tolerance: float = 0.0
    potentials: list = field(default_factory=list)
    psd_projected: int = 0
    polished: int = 0
    message: str = ""

    @property
    def flat(self) -> np.ndarray:
        return self.positions.ravel()


def gravity_force(mesh: TetMesh, density: float, g, rest=None) -> np.ndarray:
    """Lumped gravity load: each element puts ``rho * V_e * g / 4`` on each vertex.

    ``V_e`` is the rest volume, computed from ``rest`` (defaults to the mesh nodes).
    Returns a flat length-3n vector.
    """
    if not density > 0:
        raise ValueError("density must be positive")
    X = mesh.nodes if rest is None else np.asarray(rest).reshape(-1, 3)
    vols = element_volumes(X, mesh.tets)
    per = (density * vols / 4.0)[:, None, None] * np.asarray(g, dtype=np.float64)[None, None, :]
    return el.scatter_nodes(np.broadcast_to(per, (mesh.n_tets, 4, 3)), mesh.tets, mesh.n_nodes)


def gravity_rest_derivative(X, tets, density, g, weights_vec) -> np.ndarray:
    """Gradient over rest positions of ``weights_vec . gravity_force``, flat length 3n."""
    X = np.asarray(X).reshape(-1, 3)
    Dm = edge_matrices(X, tets)
    H = np.linalg.inv(Dm)
    V = np.linalg.det(Dm) / 6.0
    lw = np.asarray(weights_vec).reshape(-1, 3)[tets].sum(axis=1) @ np.asarray(g, dtype=np.float64)
    dDm = (0.25 * density * lw * V)[:, None, None] * H.transpose(0, 2, 1)
    return el.scatter_edge_gradient(dDm, tets, X.shape[0])


def residual_tolerance(mesh, material, g, density, config: SolverConfig, rest=None) -> float:
    if config.residual_tol is not None:
        return config.residual_tol * config.tol_scale
    X = mesh.nodes if rest is None else rest
    vbar = float(np.abs(element_volumes(X, mesh.tets)).mean())
    load = 1e-8 * mesh.n_nodes * float(np.linalg.norm(g)) * density * vbar
    floor = 1e-12 * float(material.element_E().mean()) * vbar ** (2.0 / 3.0)
    return max(load, floor) * config.tol_scale


def free_residual_norm(mesh, rest, x, material, g, density, threshold=el.DEFAULT_THRESHOLD):
    """Infinity norm of ``grad W - f_ext`` over free coordinates."""
    r = el.total_gradient(rest, x, mesh.tets, material, threshold) - gravity_force(mesh, density, g, rest)
    free = mesh.free_dofs()
    return float(np.abs(r[free]).max()) if free.size else 0.0


# ---------------------------------------------------------------------------
# linear algebra

class _Factor:
    def __init__(self, lu, shift):
        self.lu = lu
        self.shift = shift

    def solve(self, b):
        return self.lu.solve(b)


def factorize(K: sp.spmatrix, check_rhs=None) -> _Factor:
    """Sparse LU of a symmetric matrix, escalating a Tikhonov shift on failure.

    The shift starts at zero, then tries powers of ten from ``1e-12 * max|diag|``
    upward. A factorization counts as failed when SuperLU reports a singular
    factor or when the solve of ``check_rhs`` (if given) is not finite or has
    a relative residual above 1e-8.
    """
    K = sp.csc_matrix(K)
    N = K.shape[0]
    if not np.all(np.isfinite(K.data)):
        raise FactorizationError("stiffness matrix has non-finite entries")
    dmax = float(np.abs(K.diagonal()).max()) if N else 1.0
    start = int(np.floor(np.log10(max(dmax, 1e-300) * 1e-12)))
    shifts = [0.0] + [10.0**k for k in range(start, start + 15)]
    eye = sp.identity(N, format="csc")
    for shift in shifts:
        A = K if shift == 0.0 else (K + shift * eye).tocsc()
        try:
            lu = spla.splu(A, permc_spec="MMD_AT_PLUS_A")
        except RuntimeError:
            continue
        if check_rhs is not None:
            y = lu.solve(check_rhs)
            if not np.all(np.isfinite(y)):
                continue
            res = np.linalg.norm(A @ y - check_rhs)
            if res > 1e-8 * max(np.linalg.norm(check_rhs), 1e-300):
                continue
        if shift:
            log.warning("stiffness factorization needed Tikhonov shift %.3e", shift)
        return _Factor(lu, shift)
    raise FactorizationError("stiffness matrix singular even after Tikhonov escalation")


# ---------------------------------------------------------------------------
# step control

def max_noninversion_step(X, dX, tets, beta_init=1.0, eps=0.01, safety=0.9) -> float:
    """Largest step along ``X - beta * dX`` keeping every element volume above ``eps`` times its current value.

    Each element's signed volume is a cubic in beta; the smallest positive
    root of ``vol(beta) - eps * vol(0)`` bounds the step. If no root lies
    below ``beta_init`` the full ``beta_init`` is returned, otherwise the
    smallest root times ``safety``. Elements that are already non-positive
    are ignored.
    """
    A = edge_matrices(X, tets)
    B = edge_matrices(dX, tets)
    a0, a1, a2 = A[:, :, 0], A[:, :, 1], A[:, :, 2]
    b0, b1, b2 = B[:, :, 0], B[:, :, 1], B[:, :, 2]
    dot = lambda u, v: np.einsum("ei,ei->e", u, v)  # noqa: E731
    c0 = dot(a0, np.cross(a1, a2))
    c1 = dot(b0, np.cross(a1, a2)) + dot(b1, np.cross(a2, a0)) + dot(b2, np.cross(a0, a1))
    c2 = dot(a0, np.cross(b1, b2)) + dot(a1, np.cross(b2, b0)) + dot(a2, np.cross(b0, b1))
    c3 = dot(b0, np.cross(b1, b2))
    ok = c0 > 0
    if not ok.any():
        return beta_init
    # det(A - beta B) - eps c0 = k0 (1 + a beta + b beta^2 + c beta^3); roots in u = 1/beta are monic
    k0 = (1.0 - eps) * c0[ok]
    pa, pb, pc = -c1[ok] / k0, c2[ok] / k0, -c3[ok] / k0
    comp = np.zeros((k0.size, 3, 3))
    comp[:, 0, 0], comp[:, 0, 1], comp[:, 0, 2] = -pa, -pb, -pc
    comp[:, 1, 0] = comp[:, 2, 1] = 1.0
    u = np.linalg.eigvals(comp)
    scale = np.maximum(np.abs(u).max(axis=1, keepdims=True), 1e-300)
    real = np.abs(u.imag) <= 1e-7 * scale
    upos = np.where(real & (u.real > 0), u.real, 0.0).max(axis=1)
    hits = upos > 0
    if not hits.any():
        return beta_init
    beta_root = float((1.0 / upos[hits]).min())
    if beta_root >= beta_init:
        return beta_init
    beta = safety * beta_root
    vol0 = c0[ok]
    for _ in range(60):
        vol = np.linalg.det(A[ok] - beta * B[ok])
        if np.all(vol >= eps * vol0):
            break
        beta *= 0.5
    return beta


# ---------------------------------------------------------------------------
# Newton solver

def solve_quasistatic(mesh: TetMesh, material, g, density=DEFAULT_DENSITY, x_init=None,
                      config: SolverConfig | None = None, rest=None, callback=None) -> EquilibriumState:
    """Find deformed positions balancing elastic and gravity forces.

    Parameters
    ----------
    mesh : TetMesh
        Topology and fixed vertices. ``mesh.nodes`` is the rest shape unless
        ``rest`` is given.
    material : MaterialModel
    g : array_like, shape (3,)
        Gravity acceleration in m/s^2.
    density : float
    x_init : array_like, optional
        Starting positions (default: the rest shape). Fixed vertices are
        reset to their rest positions.
    config : SolverConfig, optional
    rest : array_like, optional
        Rest positions overriding ``mesh.nodes``.
    callback : callable, optional
        Called as ``callback(X, x)`` with the rest shape and every accepted
        iterate, starting with the initial positions.

    Returns
    -------
    EquilibriumState
        ``converged`` is False when the iteration cap is reached or the line
        search stalls; the diagnostics are filled in either way.
    """
    config = config or SolverConfig()
    X = np.array(mesh.nodes if rest is None else rest, dtype=np.float64).reshape(-1, 3)
    tets = mesh.tets
    thr = config.inversion_threshold
    x = np.array(X if x_init is None else x_init, dtype=np.float64).reshape(-1, 3)
    fixed = mesh.fixed_vertices
    x[fixed] = X[fixed]
    free = mesh.free_dofs()
    f_ext = gravity_force(mesh, density, g, X)
    tol = residual_tolerance(mesh, material, g, density, config, X)
    ref = el.element_reference(X, tets)

    def potential(y):
        _, _, psi, _, _ = el._prepare(X, y, tets, material, thr, False, False, ref)
        return float((ref.rest_volume * psi).sum() - f_ext @ (y - X).ravel())

    def residual(y):
        _, _, _, P, _ = el._prepare(X, y, tets, material, thr, True, False, ref)
        G = el._expand_inverse(ref.inv_rest_shape)
        fe = ref.rest_volume[:, None, None] * np.einsum("ekj,eaj->eak", P, G)
        return el.scatter_nodes(fe, tets, X.shape[0]) - f_ext

    state = EquilibriumState(x, np.inf, 0, tolerance=tol)
    if free.size == 0:
        state.residual_norm = 0.0
        return state
    phi = potential(x)
    state.potentials.append(phi)
    if callback is not None:
        callback(X, x)
    r = residual(x)
    shift_max = 0.0
    polish = None
    for it in range(config.max_newton_iters + 1):
        rnorm = float(np.abs(r[free]).max())
        if polish is not None:
            # keep a polishing step only if it halved the residual
            if not rnorm <= 0.5 * state.residual_norm:
                x, phi, r = polish
                state.potentials.pop()
                state.polished -= 1
                break
            polish = None
        state.residual_norm = rnorm
        state.iterations = it
        if rnorm <= tol:
            if it >= config.max_newton_iters or state.polished >= config.polish_iters:
                break
            state.polished += 1
            polish = (x, phi, r)
        if it == config.max_newton_iters:
            state.converged = False
            state.message = f"no convergence after {it} Newton iterations (|r| = {rnorm:.3e}, tol = {tol:.3e})"
            break
        _, _, _, _, A = el._prepare(X, x, tets, material, thr, False, True, ref)
        G = el._expand_inverse(ref.inv_rest_shape)
        K = np.einsum("ekjlq,eaj,ebq->eakbl", A, G, G, optimize=True)
        K = (K * ref.rest_volume[:, None, None, None, None]).reshape(-1, 12, 12)
        K = 0.5 * (K + K.transpose(0, 2, 1))
        K, nproj = el.project_psd(K)
        state.psd_projected = nproj
        Kff = el.assemble(K, tets, X.shape[0])[free][:, free]
        rhs = -r[free]
        try:
            fac = factorize(Kff, rhs)
        except FactorizationError as exc:
            if polish is not None:
                state.polished -= 1
                break
            state.converged = False
            state.message = str(exc)
            break
        shift_max = max(shift_max, fac.shift)
        d = np.zeros(X.size)
        d[free] = fac.solve(rhs)
        d = d.reshape(-1, 3)
        slope = float(r @ d.ravel())
        beta = max_noninversion_step(x, -d, tets)
        roundoff = 64 * np.finfo(float).eps * (abs(phi) + abs(float(f_ext @ (x - X).ravel())) + 1e-300)
        accepted = False
        while beta >= 1e-12:
            x_try = x + beta * d
            phi_try = potential(x_try)
            if phi_try <= phi:
                accepted = True
                break
            if abs(slope) * beta <= roundoff:
                # decrease is below round-off of the potential; fall back to the residual
                r_try = residual(x_try)
                if np.abs(r_try[free]).max() < rnorm:
                    accepted = True
                    break
            beta *= 0.5
        if not accepted and polish is not None:
            state.polished -= 1
            break
        if not accepted:
            state.converged = False
            state.message = f"line search stalled at Newton iteration {it} (|r| = {rnorm:.3e})"
            break
        x = x_try
        phi = phi_try
        state.potentials.append(phi)
        if callback is not None:
            callback(X, x)
        r = residual(x)
    state.positions = x
    state.tikhonov_shift = shift_max
    return state
