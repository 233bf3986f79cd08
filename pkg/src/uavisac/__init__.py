"""Joint hybrid beamforming and UAV trajectory design for cell-free
multi-static integrated sensing and communication."""

from .baselines import Scheme, bistatic_scenario, map_decompose, run_scheme
from .errors import (InfeasibleInit, NonFiniteValue, ParseError, SchemeInfeasible, SubsolverStall,
                     UavIsacError, ValidationError)
from .harness import ExperimentConfig, emit_outputs, load_config, run_experiment
from .metrics import Beamformers, FeasibilityReport, Tolerances, certify, sensing_snr, wsr
from .pdd import Solution, SolutionTrace, SolverConfig, solve
from .scenario import PhaseMode, PhysicalParams, Scenario, init_trajectory, make_scenario

__version__ = "0.1.0"
