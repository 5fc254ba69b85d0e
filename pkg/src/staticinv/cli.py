"""
Command-line driver: ``staticinv {forward,synth,invert,gradcheck,validate}``.

Exit codes: 0 success, 1 solver failure or aborted run, 2 configuration or
input error, 3 gradient check failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
import time

import numpy as np

from . import __version__
from . import elasticity as el
from .config import ConfigError, RunConfig, load_config
from .forward import ForwardSolveError, SolverConfig, free_residual_norm, solve_quasistatic
from .inverse import block_coordinate_descent, validate_model
from .io import (FORMAT_VERSION, atomic_write, read_json, read_poses, write_history_csv, write_json, write_poses,
                 write_validation_csv)
from .mesh import (MeshError, TetMesh, build_cluster_weights, load_cluster_labels, load_fixed_vertices,
                   load_mesh, load_node, save_mesh, save_node)
from .sensitivity import Objective
from .synth import (band_labels, make_block, rotated_gravity, rotation_angles, synthesize_poses)

log = logging.getLogger("staticinv")

EXIT_OK, EXIT_FAILURE, EXIT_CONFIG, EXIT_GRADCHECK = 0, 1, 2, 3


# ---------------------------------------------------------------------------
# loading helpers

def _require(path, what):
    if not path:
        raise ConfigError(f"missing config key paths.{what}")
    if not os.path.exists(path):
        raise ConfigError(f"paths.{what}: file not found: {path}")
    return path


def load_problem_mesh(cfg: RunConfig) -> TetMesh:
    mesh = load_mesh(_require(cfg.paths.node, "node"), _require(cfg.paths.ele, "ele"))
    fixed = load_fixed_vertices(_require(cfg.paths.fixed, "fixed"))
    return mesh.with_fixed(fixed)


def load_cluster_map(cfg: RunConfig, mesh):
    labels = load_cluster_labels(_require(cfg.paths.labels, "labels"))
    return build_cluster_weights(mesh, labels, int(labels.max()) + 1 if labels.size else 1)


def _output_dir(args, cfg):
    out = args.output or "."
    os.makedirs(out, exist_ok=True)
    return out


def _solver(cfg: RunConfig) -> SolverConfig:
    return cfg.solver


# ---------------------------------------------------------------------------
# commands

def cmd_forward(cfg: RunConfig, args) -> int:
    """Simulate the configured mesh under one gravity vector."""
    mesh = load_problem_mesh(cfg)
    if cfg.paths.labels:
        cmap = load_cluster_map(cfg, mesh)
        if args.E is None:
            raise ConfigError("forward with a label file needs --E (one modulus per cluster)")
        material = el.MaterialModel(args.E, cmap, cfg.physics.poisson)
    else:
        material = el.MaterialModel.homogeneous(mesh.n_tets, (args.E or [cfg.inverse.E_init])[0],
                                                cfg.physics.poisson)
    g = np.asarray(args.gravity, dtype=np.float64)
    t0 = time.perf_counter()
    state = solve_quasistatic(mesh, material, g, cfg.physics.density, config=_solver(cfg))
    out = _output_dir(args, cfg)
    energy = el.total_energy(mesh.nodes, state.positions, mesh.tets, material, cfg.solver.inversion_threshold)
    check = free_residual_norm(mesh, mesh.nodes, state.positions, material, g, cfg.physics.density,
                               cfg.solver.inversion_threshold)
    save_node(os.path.join(out, "deformed.node"), state.positions)
    write_json(os.path.join(out, "forward.json"), {
        "format_version": FORMAT_VERSION,
        "converged": state.converged,
        "residual_norm": state.residual_norm,
        "residual_recheck": check,
        "tolerance": state.tolerance,
        "iterations": state.iterations,
        "tikhonov_shift": state.tikhonov_shift,
        "energy": energy,
        "gravity": g,
        "runtime": time.perf_counter() - t0,
        "message": state.message,
    })
    if not state.converged:
        print(f"error: forward solve failed: {state.message}", file=sys.stderr)
        return EXIT_FAILURE
    print(f"converged in {state.iterations} Newton iterations, |r| = {state.residual_norm:.3e}")
    return EXIT_OK


def cmd_synth(cfg: RunConfig, args) -> int:
    """Generate a benchmark: mesh files, poses, held-out poses, ground truth and a run config."""
    out = _output_dir(args, cfg)
    sc = cfg.synth
    if cfg.paths.node:
        mesh = load_problem_mesh(cfg)
        labels = load_cluster_labels(_require(cfg.paths.labels, "labels"))
    else:
        mesh = make_block(sc.cells, sc.cell_size, sc.fixed_face)
        labels = band_labels(mesh, sc.bands, sc.band_axis)
    E_true = np.asarray(args.true_E, dtype=np.float64)
    nclust = int(labels.max()) + 1
    if E_true.size != nclust:
        raise ConfigError(f"--true-E needs {nclust} values, got {E_true.size}")
    lo, hi = cfg.inverse.P_lower, cfg.inverse.P_upper
    if np.any((E_true < lo) | (E_true > hi)):
        raise ConfigError(f"--true-E values must lie within [{lo}, {hi}] Pa")
    material = el.MaterialModel(E_true, build_cluster_weights(mesh, labels, nclust), cfg.physics.poisson)
    plane = args.plane or sc.plane
    angles = rotation_angles(args.n_poses, sc.step_deg)
    gravities = [rotated_gravity(t, plane, cfg.physics.gravity) for t in angles]
    rng = np.random.default_rng(args.seed)
    try:
        poses, states = synthesize_poses(mesh, material, gravities, cfg.physics.density, args.noise, rng,
                                         solver=_solver(cfg))
        heldout, _ = synthesize_poses(mesh, material,
                                      [rotated_gravity(t, plane, cfg.physics.gravity) for t in sc.heldout_angles],
                                      cfg.physics.density, args.noise, rng, solver=_solver(cfg))
    except ForwardSolveError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    neutral = int(np.argmin(np.abs(angles)))
    save_mesh(mesh, os.path.join(out, "mesh.node"), os.path.join(out, "mesh.ele"))
    _write_lines(os.path.join(out, "fixed.txt"), mesh.fixed_vertices, "# fixed vertices, 0-based")
    _write_lines(os.path.join(out, "labels.txt"), labels, "# cluster label per element")
    write_poses(os.path.join(out, "poses.json"), poses)
    write_poses(os.path.join(out, "heldout.json"), heldout)
    save_node(os.path.join(out, "observed_neutral.node"), states[neutral].positions)
    write_json(os.path.join(out, "ground_truth.json"), {
        "format_version": FORMAT_VERSION,
        "rest_shape": mesh.nodes,
        "cluster_E": E_true,
        "angles_deg": angles,
        "heldout_angles_deg": list(sc.heldout_angles),
        "plane": plane,
        "noise_std": args.noise,
        "seed": args.seed,
    })
    run = RunConfig.from_flat(cfg.to_flat())
    run.paths.node, run.paths.ele = "mesh.node", "mesh.ele"
    run.paths.fixed, run.paths.labels = "fixed.txt", "labels.txt"
    run.paths.poses, run.paths.heldout = "poses.json", "heldout.json"
    run.paths.observed_neutral = "observed_neutral.node"
    run.physics.neutral_pose = neutral
    atomic_write(os.path.join(out, "run.cfg"), run.to_text())
    print(f"wrote {len(poses)} poses ({mesh.n_nodes} nodes, {mesh.n_tets} tets) to {out}")
    return EXIT_OK


def _write_lines(path, values, header):
    atomic_write(path, header + "\n" + "".join(f"{int(v)}\n" for v in values))


def _load_inverse_inputs(cfg):
    mesh = load_problem_mesh(cfg)
    cmap = load_cluster_map(cfg, mesh)
    poses = read_poses(_require(cfg.paths.poses, "poses"))
    if not poses:
        raise ConfigError("poses file is empty")
    obs = load_node(_require(cfg.paths.observed_neutral, "observed_neutral"))
    if obs.shape != mesh.nodes.shape:
        raise ConfigError("observed_neutral must list every mesh vertex")
    for p in poses:
        p.validate(mesh)
    return mesh, cmap, poses, obs


def cmd_invert(cfg: RunConfig, args) -> int:
    """Run block coordinate descent and write rest shape, moduli, history and metadata."""
    mesh, cmap, poses, obs = _load_inverse_inputs(cfg)
    out = _output_dir(args, cfg)
    k = cfg.physics.neutral_pose
    if not 0 <= k < len(poses):
        raise ConfigError(f"physics.neutral_pose {k} out of range for {len(poses)} poses")
    threads = cfg.thread_count()
    res = block_coordinate_descent(mesh, poses, obs, cmap, cfg.inverse, poses[k].gravity,
                                   cfg.physics.density, cfg.physics.poisson, _solver(cfg), threads)
    write_history_csv(os.path.join(out, "history.csv"), res.history, cmap.num_clusters)
    save_node(os.path.join(out, "rest.node"), res.rest_shape)
    save_node(os.path.join(out, "rest_guess.node"), res.X0)
    write_json(os.path.join(out, "moduli.json"), {
        "format_version": FORMAT_VERSION,
        "cluster_E": res.cluster_E,
        "objective": res.objective,
        "converged": res.converged,
        "reason": res.reason,
    })
    write_json(os.path.join(out, "metadata.json"), {
        "format_version": FORMAT_VERSION,
        "package_version": __version__,
        "config": cfg.to_flat(),
        "alpha": res.alpha,
        "runtime": res.runtime,
        "threads": threads,
        "reason": res.reason,
    })
    if res.reason.startswith("aborted"):
        print(f"error: {res.reason}", file=sys.stderr)
        return EXIT_FAILURE
    print(f"E = {np.array2string(res.cluster_E, precision=6)} Pa ({res.reason}, objective {res.objective:.6e})")
    return EXIT_OK


def gradient_check(mesh, cmap, poses, obs, cfg: RunConfig, n_probes=10, seed=0, corrupt=False):
    """Compare adjoint gradients with central differences of the objective.

    Evaluates at the inverse-gravity rest guess with midpoint moduli.
    Cluster probes compare ``E * dJ/dE`` along each coordinate axis and then
    along random unit directions, ``n_probes`` in total; rest-shape probes
    use ``n_probes`` random free coordinates. Returns a list of
    ``(block, index, analytic, fd, rel_err)`` rows, where the relative error
    is floored (see :func:`rel_error`) at the larger of 1e-6 of the block's
    largest gradient entry and ``1e4`` times the round-off bound of the
    difference quotient, so entries too small for central differences to
    resolve are judged against that bound (see :func:`objective_roundoff`).
    An empty list means the gradient is already at the optimum (norm below
    1e-9 of the objective scale) and no comparison was made.
    """
    from .inverse import default_alpha, initial_rest_guess
    rng = np.random.default_rng(seed)
    # tolerance tightened 100x, then polished to round-off so that the
    # differences are not dominated by where Newton happened to stop
    solver = dataclasses.replace(cfg.solver, tol_scale=cfg.solver.tol_scale * 1e-2, polish_iters=3)
    P0 = el.MaterialModel.homogeneous(mesh.n_tets, cfg.inverse.E_init, cfg.physics.poisson)
    g0 = poses[cfg.physics.neutral_pose].gravity
    X0 = initial_rest_guess(mesh, obs, P0, g0, cfg.physics.density, solver)
    E = np.sqrt(cfg.inverse.P_lower * cfg.inverse.P_upper) * np.ones(cmap.num_clusters)
    material = el.MaterialModel(E, cmap, cfg.physics.poisson)
    alpha = cfg.inverse.alpha if cfg.inverse.alpha is not None else default_alpha(mesh, X0, P0,
                                                                                   cfg.inverse.alpha_scale)
    obj = Objective(mesh, material, poses, alpha, X0, P0, cfg.physics.density, solver, cfg.thread_count(),
                    warm_start=False)
    X = X0
    rep = obj(X, E)
    gE, gX = rep.grad_clusters.copy(), rep.grad_rest.copy()
    if corrupt:
        gE *= 1.5
        gX *= 1.5
    scale = max(abs(rep.value), 1e-300)
    if max(np.abs(gE).max(), np.abs(gX).max()) < 1e-9 * scale or rep.data_term == 0.0:
        return []
    dJ = objective_roundoff(obj, X, E, rep.value)
    rows = []
    # cluster probes: every coordinate axis, then random directions in relative (log) E
    gl = gE * E
    h = 1e-5
    floorE = max(1e-6 * np.abs(gl).max(), 1e4 * dJ / h)
    for k in range(n_probes):
        if k < E.size:
            v, block, idx = np.eye(E.size)[k], "E", k
        else:
            v = rng.standard_normal(E.size)
            v /= np.linalg.norm(v)
            block, idx = "E_dir", k - E.size
        fd = (obj(X, E * (1 + h * v), False, False).value - obj(X, E * (1 - h * v), False, False).value) / (2 * h)
        a = float(gl @ v)
        rows.append((block, int(idx), a, fd, rel_error(a, fd, floorE)))
    free = mesh.free_dofs()
    h = 1e-5 * mesh.diameter()
    floorX = max(1e-6 * np.abs(gX).max(), 1e4 * dJ / h)
    for j in rng.choice(free, size=min(n_probes, free.size), replace=False):
        Xp, Xm = X.ravel().copy(), X.ravel().copy()
        Xp[j] += h
        Xm[j] -= h
        fd = (obj(Xp, E, False, False).value - obj(Xm, E, False, False).value) / (2 * h)
        rows.append(("X", int(j), float(gX[j]), fd, rel_error(gX[j], fd, floorX)))
    return rows


def objective_roundoff(obj, X, E, value):
    """Bound on the rounding error of one objective evaluation.

    Each misfit ``x - t`` subtracts coordinates of size ``|x|`` to get
    differences of size ``|r|``, so its square carries an absolute error of
    about ``eps * |r| * (|x| + |t|)``. A central difference with step ``h``
    therefore cannot resolve derivatives below ``bound / h``.
    """
    total = abs(value)
    for k, pose in enumerate(obj.poses):
        x = obj.forward(X, E, k).positions[pose.observed_ids]
        total += float((np.abs(x - pose.targets) * (np.abs(x) + np.abs(pose.targets))).sum())
    return float(np.finfo(float).eps * total)


def rel_error(analytic, fd, floor=0.0):
    """``|a - fd| / max(|a|, |fd|, floor)``; ``floor`` keeps exact zeros from scoring round-off as 100%."""
    den = max(abs(analytic), abs(fd), floor)
    return 0.0 if den == 0 else abs(analytic - fd) / den


def cmd_gradcheck(cfg: RunConfig, args) -> int:
    """Print a table of adjoint vs finite-difference gradient entries; fail above 1e-3."""
    mesh, cmap, poses, obs = _load_inverse_inputs(cfg)
    if mesh.n_tets > 5000:
        print(f"warning: gradient check on {mesh.n_tets} elements will be slow", file=sys.stderr)
    rows = gradient_check(mesh, cmap, poses, obs, cfg, args.probes, args.seed or 0, args.corrupt)
    if not rows:
        print("at optimum: analytic gradient norm below 1e-9 of the objective, comparison skipped")
        return EXIT_OK
    print(f"{'block':>5} {'index':>6} {'analytic':>14} {'finite diff':>14} {'rel err':>10}")
    for block, idx, a, f, r in rows:
        print(f"{block:>5} {idx:>6d} {a:>14.6e} {f:>14.6e} {r:>10.2e}")
    worst = max(r[-1] for r in rows)
    print(f"max relative error {worst:.2e}")
    return EXIT_GRADCHECK if worst > 1e-3 else EXIT_OK


def cmd_validate(cfg: RunConfig, args) -> int:
    """Simulate the inverted model and the naive baseline on held-out poses."""
    mesh = load_problem_mesh(cfg)
    cmap = load_cluster_map(cfg, mesh)
    heldout_path = args.heldout or cfg.paths.heldout
    heldout = read_poses(_require(heldout_path, "heldout"))
    if not heldout:
        raise ConfigError(f"held-out poses file is empty: {heldout_path}")
    run_dir = args.run or args.output or "."
    rest = load_node(_require(os.path.join(run_dir, "rest.node"), "rest (inversion output)"))
    moduli = read_json(_require(os.path.join(run_dir, "moduli.json"), "moduli (inversion output)"))
    E = np.asarray(moduli["cluster_E"], dtype=np.float64)
    obs = load_node(_require(cfg.paths.observed_neutral, "observed_neutral"))
    naive_E = cfg.validate.naive_E if cfg.validate.naive_E is not None else float(E.min())
    solver = _solver(cfg)
    inverted = validate_model(mesh, rest, el.MaterialModel(E, cmap, cfg.physics.poisson), heldout,
                              cfg.physics.density, solver)
    naive = validate_model(mesh, obs, el.MaterialModel.homogeneous(mesh.n_tets, naive_E, cfg.physics.poisson),
                           heldout, cfg.physics.density, solver)
    out = _output_dir(args, cfg)
    write_validation_csv(os.path.join(out, "validation.csv"), {"inverted": inverted, "naive": naive})
    for name, rep in (("inverted", inverted), ("naive", naive)):
        print(f"{name:>9}: total {rep.aggregate_total:.6e} m, mean vertex error {rep.aggregate_mean:.6e} m")
        for k, msg in rep.failures:
            print(f"warning: {name} pose {k} failed: {msg}", file=sys.stderr)
    return EXIT_OK


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="staticinv", description=__doc__.splitlines()[1])
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--threads", help="worker threads (overrides config), integer or 'auto'")
    p.add_argument("--output", help="output directory")
    p.add_argument("--seed", type=int, default=None, help="seed for noise and probe sampling")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    f = sub.add_parser("forward", help="quasi-static simulation under one gravity vector")
    f.add_argument("--gravity", type=float, nargs=3, default=[0.0, 0.0, -9.81], metavar=("GX", "GY", "GZ"))
    f.add_argument("--E", type=float, nargs="+", help="Young's modulus per cluster (Pa)")

    s = sub.add_parser("synth", help="generate a synthetic benchmark")
    s.add_argument("--true-E", type=float, nargs="+", default=[2e4, 2e5, 8e5])
    s.add_argument("--n-poses", type=int, default=5)
    s.add_argument("--plane", help="rotation plane, e.g. xz or yz (second axis points down)")
    s.add_argument("--noise", type=float, default=0.0, help="target noise std (m)")

    sub.add_parser("invert", help="recover rest shape and cluster moduli")

    g = sub.add_parser("gradcheck", help="adjoint vs finite-difference gradient check")
    g.add_argument("--probes", type=int, default=10)
    g.add_argument("--corrupt", action="store_true", help=argparse.SUPPRESS)

    v = sub.add_parser("validate", help="score an inversion on held-out poses")
    v.add_argument("--heldout", help="held-out poses JSON (default paths.heldout)")
    v.add_argument("--run", help="inversion output directory (default --output)")
    return p


COMMANDS = {"forward": cmd_forward, "synth": cmd_synth, "invert": cmd_invert,
            "gradcheck": cmd_gradcheck, "validate": cmd_validate}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config) if args.config else RunConfig()
        if args.threads is not None:
            cfg.threads = args.threads
            cfg.thread_count()
        return COMMANDS[args.command](cfg, args)
    except (ConfigError, MeshError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ForwardSolveError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
