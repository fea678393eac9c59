"""Exit problems for regime-switching diffusions in the small-noise limit."""
from .model import (ConfigError, SwitchingModel, BoundaryData, ExperimentSettings, EpsilonLadder,
                    Problem, load_problem, dump_problem, validate_model)
from .domain import DomainGeometry, DomainError

__version__ = "0.1.0"
