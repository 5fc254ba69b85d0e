"""
staticinv: recover a gravity-free rest shape and clustered Neo-Hookean
stiffness of a tetrahedral soft body from a few static poses observed under
known gravity directions.

Modules
-------
mesh         TetMesh, cluster weights, pose observations, Tetgen I/O
elasticity   compressible Neo-Hookean energy, forces and stiffness
forward      quasi-static Newton solver with an inversion-safe line search
sensitivity  multi-pose objective and adjoint gradients
inverse      material / rest-shape optimizers and block coordinate descent
synth        built-in block benchmark and rotated-gravity poses
io, config   file formats and the flat run configuration
cli          the ``staticinv`` command
"""

__version__ = "0.1.0"

from .mesh import ClusterMap, MeshError, PoseObservation, TetMesh, load_mesh  # noqa: E402
from .elasticity import MaterialModel  # noqa: E402
from .forward import EquilibriumState, ForwardSolveError, SolverConfig, solve_quasistatic  # noqa: E402
from .sensitivity import Objective, evaluate_objective  # noqa: E402
from .inverse import (InverseConfig, InversionResult, block_coordinate_descent,  # noqa: E402
                      optimize_materials, optimize_rest_shape, validate_model)

__all__ = [
    "__version__",
    "TetMesh",
    "ClusterMap",
    "PoseObservation",
    "MeshError",
    "load_mesh",
    "MaterialModel",
    "SolverConfig",
    "EquilibriumState",
    "ForwardSolveError",
    "solve_quasistatic",
    "Objective",
    "evaluate_objective",
    "InverseConfig",
    "InversionResult",
    "optimize_materials",
    "optimize_rest_shape",
    "block_coordinate_descent",
    "validate_model",
]
