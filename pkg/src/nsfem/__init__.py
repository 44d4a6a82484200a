"""Mixed finite elements for the 2D incompressible Navier-Stokes equations,
advanced in time by a linearly implicit Backward Euler scheme, with a
harness for checking the discrete stability bounds and convergence rates."""

__version__ = "0.1.0"

from .elements import Pair, build_space, interpolate
from .mesh import Mesh, generate_structured_square, read_mesh, refine_uniform, write_mesh
from .solver import LIBESolver, SolverConfig, Trajectory, run

__all__ = [
    "__version__", "Pair", "build_space", "interpolate", "Mesh", "generate_structured_square",
    "read_mesh", "refine_uniform", "write_mesh", "LIBESolver", "SolverConfig", "Trajectory", "run",
]
