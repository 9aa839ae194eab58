"""Mean-field SDE/BSDE solvers and maximum-principle checks under
time-changed Gaussian/Poisson noise."""

__version__ = "0.1.0"

from .errors import ExplosionError, InvalidArgument, RegressionError, TcmfError
from .noise import IntensityModel, LevyGrid, MarkFunction, TimeGrid, discretize_levy, sample_noise
from .measures import empirical, law_flow_distance, wasserstein2
from .mfsde import EnsembleConfig, interacting_particle_solve, picard_law_solve
from .mfbsde import Driver, LinearCoefficients, picard_bsde, solve_linear
from .control import ControlPath, Scenario, check_necessary, check_sufficient, gateaux_derivative, solve_adjoint
from .vasicek import VasicekScenario, riccati_oracle, run_example

__all__ = [
    "ControlPath", "Driver", "EnsembleConfig", "ExplosionError", "IntensityModel", "InvalidArgument",
    "LevyGrid", "LinearCoefficients", "MarkFunction", "RegressionError", "Scenario", "TcmfError",
    "TimeGrid", "VasicekScenario", "check_necessary", "check_sufficient", "discretize_levy", "empirical",
    "gateaux_derivative", "interacting_particle_solve", "law_flow_distance", "picard_bsde",
    "picard_law_solve", "riccati_oracle", "run_example", "sample_noise", "solve_adjoint", "solve_linear",
    "wasserstein2",
]
