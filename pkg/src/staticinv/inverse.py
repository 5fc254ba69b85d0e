"""
Inverse problem: cluster moduli and gravity-free rest shape from posed observations.

Block coordinate descent alternates

* a bound-constrained quasi-Newton solve over cluster moduli (in log10 E),
  with the rest shape fixed, and
* gradient descent over the rest shape with a step cap that keeps every
  element from inverting and a sufficient-decrease (Armijo) backtracking
  line search, with the moduli fixed.

Both phases descend the same objective
``sum_o 0.5 |S_o x_o - xbar_o|^2 + alpha W(X0, X, P0)``.
"""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import elasticity as el
from .forward import (
    DEFAULT_DENSITY,
    ForwardSolveError,
    SolverConfig,
    max_noninversion_step,
    solve_quasistatic,
)
from .mesh import ClusterMap, PoseObservation, TetMesh, element_volumes
from .sensitivity import Objective, regularizer

__all__ = [
    "InverseConfig",
    "HistoryRecord",
    "InversionResult",
    "MaterialResult",
    "RestShapeResult",
    "initial_rest_guess",
    "default_alpha",
    "minimize_box_bfgs",
    "optimize_materials",
    "optimize_rest_shape",
    "max_noninversion_step",
    "block_coordinate_descent",
    "ValidationReport",
    "validate_model",
]

log = logging.getLogger(__name__)

LN10 = np.log(10.0)


@dataclass
class InverseConfig:
    """Settings of the outer optimization.

    ``alpha=None`` picks the regularization weight automatically (see
    :func:`default_alpha`). Gradient tolerances are absolute: the material
    one on the log10-modulus gradient (m^2), the rest-shape one on the
    infinity norm of the rest-position gradient (m).
    """

    alpha: float | None = None
    alpha_scale: float = 1e-3
    P_lower: float = 1e3
    P_upper: float = 1e6
    E_init: float = 1e6
    wolfe_gamma: float = 1e-4
    material_max_iters: int = 50
    restshape_max_iters: int = 30
    bcd_max_outer: int = 10
    bcd_rel_tol: float = 1e-4
    grad_tol_material: float = 1e-16
    grad_tol_rest: float = 1e-10
    restshape_rel_tol: float = 1e-3
    material_rel_tol: float = 1e-10
    material_max_step: float = 1.0
    restshape_beta_init: float = 1.0
    min_step: float = 1e-12
    inversion_eps: float = 0.01
    inversion_safety: float = 0.9

    def __post_init__(self):
        if not 0 < self.P_lower < self.P_upper:
            raise ValueError("need 0 < P_lower < P_upper")
        if not self.P_lower <= self.E_init <= self.P_upper:
            raise ValueError("E_init must lie within [P_lower, P_upper]")
        if not 0 < self.wolfe_gamma < 1:
            raise ValueError("wolfe_gamma must lie in (0, 1)")
        if self.alpha is not None and self.alpha < 0:
            raise ValueError("alpha must be non-negative")

    def to_E(self, z):
        """Map log10 moduli to Pa, returning the bounds exactly when ``z`` sits on them."""
        lo, hi = np.log10(self.P_lower), np.log10(self.P_upper)
        E = np.where(z <= lo, self.P_lower, np.where(z >= hi, self.P_upper, 10.0 ** np.asarray(z)))
        return np.clip(E, self.P_lower, self.P_upper)


@dataclass
class HistoryRecord:
    phase: str
    iter: int
    objective: float
    data_term: float
    reg_term: float
    grad_norm: float
    step: float
    cluster_E: list
    min_volume: float = float("nan")


@dataclass
class MaterialResult:
    cluster_E: np.ndarray
    objective: float
    iterations: int
    converged: bool
    reason: str
    history: list


@dataclass
class RestShapeResult:
    rest_shape: np.ndarray
    objective: float
    iterations: int
    converged: bool
    reason: str
    history: list


@dataclass
class InversionResult:
    rest_shape: np.ndarray
    cluster_E: np.ndarray
    history: list
    converged: bool
    reason: str = ""
    alpha: float = 0.0
    X0: np.ndarray | None = None
    objective: float = float("nan")
    runtime: float = 0.0
    meta: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------

def initial_rest_guess(mesh: TetMesh, observed_neutral, material0, g_neutral, density=DEFAULT_DENSITY,
                       solver: SolverConfig | None = None) -> np.ndarray:
    """Rest-shape guess: simulate the observed neutral shape under reversed gravity."""
    obs = np.asarray(observed_neutral, dtype=np.float64).reshape(-1, 3)
    g = -np.asarray(g_neutral, dtype=np.float64)
    if not np.any(g):
        return obs.copy()
    state = solve_quasistatic(mesh, material0, g, density, config=solver, rest=obs)
    if not state.converged:
        raise ForwardSolveError(f"inverse-gravity solve failed: {state.message}", state)
    return state.positions


def default_alpha(mesh, X0, P0, scale=1e-3):
    """``scale / (mean_E(P0) * mean_edge_length(X0))``.

    ``alpha * K(P0)`` then has entries of order ``scale``, while the data
    term's curvature for observed coordinates is of order one, so the
    regularizer stays a small fraction of the fit and does not dominate
    the rest-shape descent steps.
    """
    X0 = np.asarray(X0).reshape(-1, 3)
    t = mesh.tets
    edges = X0[t[:, [1, 2, 3, 2, 3, 3]]] - X0[t[:, [0, 0, 0, 1, 1, 2]]]
    h = float(np.linalg.norm(edges, axis=2).mean())
    return scale / (float(P0.element_E().mean()) * h)


# ---------------------------------------------------------------------------
# bound-constrained quasi-Newton

def minimize_box_bfgs(fun, z0, lower, upper, max_iter=50, gtol=1e-16, rtol=1e-10, gamma=1e-4,
                      max_step=1.0, callback=None):
    """Minimize ``fun`` over a box with projected gradient steps and BFGS curvature.

    ``fun(z)`` returns ``(value, gradient)`` or raises to signal an
    unusable point (treated as a rejected trial step). Variables at a
    bound whose gradient pushes outward are held fixed; the BFGS inverse
    Hessian restricted to the free variables gives the direction, and a
    projected backtracking search enforces sufficient decrease. Every
    trial point is clipped into the box before evaluation.

    Returns ``(z, f, g, iterations, converged, reason)``.
    """
    lower = np.asarray(lower, dtype=np.float64)
    upper = np.asarray(upper, dtype=np.float64)
    z = np.clip(np.asarray(z0, dtype=np.float64), lower, upper)
    f, g = fun(z)
    n = z.size
    Hinv = None
    it = 0
    reason = "max_iter"
    converged = False
    while True:
        pg = z - np.clip(z - g, lower, upper)
        if np.abs(pg).max() <= gtol:
            reason, converged = "gradient", True
            break
        if it >= max_iter:
            break
        active = ((z <= lower) & (g > 0)) | ((z >= upper) & (g < 0))
        free = ~active
        d = np.zeros(n)
        if Hinv is not None:
            d[free] = -Hinv[np.ix_(free, free)] @ g[free]
            if g @ d >= 0:
                Hinv = None
        if Hinv is None:
            d[free] = -g[free]
        big = np.abs(d).max()
        if big > max_step or Hinv is None:
            d *= max_step / big
        t = 1.0
        accepted = False
        while t >= 1e-10:
            zt = np.clip(z + t * d, lower, upper)
            if np.array_equal(zt, z):
                break
            try:
                ft, gt = fun(zt)
            except ForwardSolveError as exc:
                log.info("material trial step rejected: %s", exc)
                t *= 0.5
                continue
            if ft <= f + gamma * (g @ (zt - z)):
                accepted = True
                break
            t *= 0.5
        if not accepted:
            reason, converged = "stalled", True
            break
        s, y = zt - z, gt - g
        sy = s @ y
        if sy > 1e-12 * np.linalg.norm(s) * np.linalg.norm(y):
            if Hinv is None:
                Hinv = np.eye(n) * (sy / (y @ y))
            rho = 1.0 / sy
            V = np.eye(n) - rho * np.outer(s, y)
            Hinv = V @ Hinv @ V.T + rho * np.outer(s, s)
        decrease = f - ft
        z, f, g = zt, ft, gt
        it += 1
        if callback is not None:
            callback(it, z, f, g, t)
        if decrease <= rtol * max(abs(f), 1e-300):
            reason, converged = "ftol", True
            break
    return z, f, g, it, converged, reason


def _grad_norm(g):
    return float(np.linalg.norm(g))


def optimize_materials(mesh: TetMesh, X, poses, material_init: "el.MaterialModel",
                       config: InverseConfig | None = None, objective: Objective | None = None,
                       density=DEFAULT_DENSITY, solver: SolverConfig | None = None, threads=1,
                       phase="material") -> MaterialResult:
    """Fit cluster moduli for a fixed rest shape ``X`` under box bounds.

    Works in log10 E; bounds map to ``[log10 P_lower, log10 P_upper]``.
    Every evaluated iterate lies inside the bounds exactly.
    """
    config = config or InverseConfig()
    X = np.asarray(X, dtype=np.float64).reshape(-1, 3)
    if objective is None:
        objective = Objective(mesh, material_init, poses, 0.0, density=density, solver=solver,
                              threads=threads)
    lo = np.full(material_init.num_clusters, np.log10(config.P_lower))
    hi = np.full(material_init.num_clusters, np.log10(config.P_upper))
    z0 = np.clip(np.log10(config.to_E(np.log10(material_init.cluster_E))), lo, hi)
    history = []
    last = {}
    vmin = float(element_volumes(X, mesh.tets).min())

    def fun(z):
        E = config.to_E(z)
        rep = objective(X, E, want_E=True, want_X=False)
        last[z.tobytes()] = rep
        return rep.value, rep.grad_clusters * E * LN10

    def record(it, z, f, g, t):
        rep = last[z.tobytes()]
        history.append(HistoryRecord(phase, it, rep.value, rep.data_term, rep.reg_term, _grad_norm(g), t,
                                     config.to_E(z).tolist(), vmin))

    f0, g0 = fun(z0)
    record(0, z0, f0, g0, 0.0)
    z, f, g, its, converged, reason = minimize_box_bfgs(
        fun, z0, lo, hi, max_iter=config.material_max_iters, gtol=config.grad_tol_material,
        rtol=config.material_rel_tol, gamma=config.wolfe_gamma, max_step=config.material_max_step,
        callback=lambda *a: (record(*a), last.clear() if len(last) > 64 else None))
    return MaterialResult(config.to_E(z), f, its, converged, reason, history)


def optimize_rest_shape(mesh: TetMesh, material, poses, X_init, X0_reference=None,
                        config: InverseConfig | None = None, objective: Objective | None = None,
                        alpha=None, P0=None, density=DEFAULT_DENSITY, solver: SolverConfig | None = None,
                        threads=1, phase="rest") -> RestShapeResult:
    """Gradient descent on the rest shape with an inversion-safe, sufficient-decrease line search.

    Each step starts at the largest ``beta`` that keeps all elements
    non-inverted along ``X - beta * grad`` and halves until
    ``g(X - beta grad) <= g(X) - gamma * beta * |grad|^2``. Fixed vertices
    have zero gradient and never move.
    """
    config = config or InverseConfig()
    X = np.array(X_init, dtype=np.float64).reshape(-1, 3)
    if objective is None:
        if alpha is None:
            alpha = 0.0
        X0_reference = X.copy() if X0_reference is None else X0_reference
        if alpha and P0 is None:
            P0 = el.MaterialModel.homogeneous(mesh.n_tets, config.E_init, material.poisson)
        objective = Objective(mesh, material, poses, alpha, X0_reference, P0, density, solver, threads)
    E = material.cluster_E
    rep = objective(X, E, want_E=False, want_X=True)
    history = [HistoryRecord(phase, 0, rep.value, rep.data_term, rep.reg_term, _grad_norm(rep.grad_rest), 0.0,
                             E.tolist(), float(element_volumes(X, mesh.tets).min()))]
    reason, converged = "max_iter", False
    it = 0
    while True:
        grad = rep.grad_rest
        if np.abs(grad).max() <= config.grad_tol_rest:
            reason, converged = "gradient", True
            break
        if it >= config.restshape_max_iters:
            break
        D = grad.reshape(-1, 3)
        slope = float(grad @ grad)
        beta = max_noninversion_step(X, D, mesh.tets, config.restshape_beta_init, config.inversion_eps,
                                     config.inversion_safety)
        accepted = False
        while beta >= config.min_step:
            Xt = X - beta * D
            try:
                rt = objective(Xt, E, want_E=False, want_X=True)
            except ForwardSolveError as exc:
                log.info("rest-shape trial step rejected: %s", exc)
                beta *= 0.5
                continue
            if rt.value <= rep.value - config.wolfe_gamma * beta * slope:
                accepted = True
                break
            beta *= 0.5
        if not accepted:
            reason, converged = "stalled", True
            break
        decrease = rep.value - rt.value
        X, rep = Xt, rt
        it += 1
        history.append(HistoryRecord(phase, it, rep.value, rep.data_term, rep.reg_term,
                                     _grad_norm(rep.grad_rest), beta, E.tolist(),
                                     float(element_volumes(X, mesh.tets).min())))
        if decrease <= config.restshape_rel_tol * abs(history[-2].objective):
            reason, converged = "ftol", True
            break
    return RestShapeResult(X, rep.value, it, converged, reason, history)


# ---------------------------------------------------------------------------

def block_coordinate_descent(mesh: TetMesh, poses, observed_neutral, cluster_map: ClusterMap,
                             config: InverseConfig | None = None, g_neutral=None, density=DEFAULT_DENSITY,
                             poisson=el.DEFAULT_POISSON, solver: SolverConfig | None = None,
                             threads=1) -> InversionResult:
    """Full pipeline: inverse-gravity rest guess, single-pose warm start, then alternating phases.

    ``g_neutral`` defaults to the gravity of the first pose. The loop stops
    when one outer round lowers the objective by less than ``bcd_rel_tol``
    (relative) or after ``bcd_max_outer`` rounds. The best (lowest-objective)
    state seen is returned.
    """
    config = config or InverseConfig()
    t0 = time.perf_counter()
    poses = list(poses)
    g_neutral = poses[0].gravity if g_neutral is None else np.asarray(g_neutral, dtype=np.float64)
    c = cluster_map.num_clusters
    E = np.full(c, config.E_init)
    P0 = el.MaterialModel.homogeneous(mesh.n_tets, config.E_init, poisson)
    material = el.MaterialModel(E, cluster_map, poisson)
    history: list[HistoryRecord] = []
    meta = {}

    try:
        X0 = initial_rest_guess(mesh, observed_neutral, P0, g_neutral, density, solver)
    except ForwardSolveError as exc:
        log.error("inversion aborted: %s", exc)
        obs = np.asarray(observed_neutral, dtype=np.float64).reshape(-1, 3)
        return InversionResult(obs.copy(), E, history, False, f"aborted: {exc}", config.alpha, obs,
                               float("nan"), time.perf_counter() - t0, meta)
    X = X0.copy()

    alpha = config.alpha
    if alpha is None:
        alpha = default_alpha(mesh, X0, P0, config.alpha_scale)
    meta["alpha"] = alpha

    def objective_for(ps):
        return Objective(mesh, material, ps, alpha, X0, P0, density, solver, threads)

    best = None
    try:
        warm = optimize_materials(mesh, X, poses[:1], material, config, objective_for(poses[:1]),
                                  phase="material_warm")
        history += warm.history
        E = warm.cluster_E
        full = objective_for(poses)
        current = full(X, E, want_E=False, want_X=False).value
        best = (current, X.copy(), E.copy())
        stalled_rounds = 0
        converged, reason = False, "max_outer"
        for outer in range(config.bcd_max_outer):
            start = current
            mres = optimize_materials(mesh, X, poses, material.with_E(E), config, full,
                                      phase=f"material_{outer}")
            history += mres.history
            material_progress = mres.objective < current
            if mres.objective <= current:
                E, current = mres.cluster_E, mres.objective
            rres = optimize_rest_shape(mesh, material.with_E(E), poses, X, X0, config, full,
                                       phase=f"rest_{outer}")
            history += rres.history
            rest_progress = rres.objective < current
            if rres.objective <= current:
                X, current = rres.rest_shape, rres.objective
            if current < best[0]:
                best = (current, X.copy(), E.copy())
            if not (material_progress or rest_progress):
                stalled_rounds += 1
                converged, reason = True, "stalled"
                break
            if start - current < config.bcd_rel_tol * abs(start):
                converged, reason = True, "rel_tol"
                break
    except ForwardSolveError as exc:
        log.error("inversion aborted: %s", exc)
        if best is None:
            best = (float("nan"), X.copy(), np.asarray(E).copy())
        return InversionResult(best[1], best[2], history, False, f"aborted: {exc}", alpha, X0, best[0],
                               time.perf_counter() - t0, meta)
    return InversionResult(best[1], best[2], history, converged, reason, alpha, X0, best[0],
                           time.perf_counter() - t0, meta)


# ---------------------------------------------------------------------------
# validation against held-out poses

@dataclass
class ValidationReport:
    names: list
    total_error: list
    mean_vertex_error: list
    failures: list = field(default_factory=list)

    @property
    def aggregate_mean(self) -> float:
        v = [e for e in self.mean_vertex_error if np.isfinite(e)]
        return float(np.mean(v)) if v else float("nan")

    @property
    def aggregate_total(self) -> float:
        return float(np.nansum(self.total_error))

    def as_dict(self):
        return asdict(self)


def validate_model(mesh: TetMesh, rest_shape, material, poses, density=DEFAULT_DENSITY,
                   solver: SolverConfig | None = None) -> ValidationReport:
    """Forward-simulate ``(rest_shape, material)`` under each pose and measure vertex errors.

    Per pose: total (sum) and mean Euclidean distance between simulated and
    observed vertices. Failed solves are recorded and reported as NaN.
    """
    names, tot, mean, failures = [], [], [], []
    for k, pose in enumerate(poses):
        names.append(f"pose_{k}")
        state = solve_quasistatic(mesh, material, pose.gravity, density, config=solver, rest=rest_shape)
        if not state.converged:
            failures.append((k, state.message))
            tot.append(float("nan"))
            mean.append(float("nan"))
            continue
        d = np.linalg.norm(pose.residual(state.positions), axis=1)
        tot.append(float(d.sum()))
        mean.append(float(d.mean()))
    return ValidationReport(names, tot, mean, failures)


def data_misfit_rms(mesh, rest_shape, material, pose: PoseObservation, density=DEFAULT_DENSITY, solver=None):
    state = solve_quasistatic(mesh, material, pose.gravity, density, config=solver, rest=rest_shape)
    res = pose.residual(state.positions)
    return float(np.sqrt((res**2).sum(axis=1).mean()))


def regularizer_value(mesh, X, X0, P0, threshold=el.DEFAULT_THRESHOLD):
    return regularizer(X, X0, mesh.tets, P0, threshold)
