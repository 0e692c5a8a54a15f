"""System identification for buck converters with spline-edge networks.

The toolkit learns per-sample state differences from closed-loop
trajectories, snaps the learned edge functions to symbolic primitives,
folds the result into affine state equations, and assembles/verifies a
state-space model against the plant that generated the data.
"""

from .data import (SidDataset, Trajectory, build_dataset, finite_diff,
                   input_ranges, read_trajectory_csv, write_trajectory_csv)
from .errors import (ConfigError, DegenerateDataError, KansidError,
                     ModelFormatError, NotSymbolicError,
                     SimulationDivergedError, TrainingDivergedError)
from .network import (KanNetwork, activation_stats, backward, fix_input_zero,
                      fix_symbolic, forward, load_model, new_network, prune,
                      save_model, suggest_symbolic, to_equation)
from .optimize import (TrainConfig, TrainReport, lbfgs_train, logcosh,
                       minimize_lbfgs, objective)
from .pipeline import (PipelineConfig, PipelineResult, assemble_state_space,
                       compare_models, full_pipeline, identify_state,
                       report_json, report_to_dict, verify_model)
from .plant import (BuckParams, PiController, ReferenceProfile,
                    StateSpaceModel, averaged_derivatives, load_statespace,
                    pi_step, save_statespace, simulate_plant,
                    simulate_statespace, true_state_space)
from .splines import (SplineGrid, basis_derivatives, basis_values,
                      grid_from_samples, make_uniform_grid)
from .svgplot import emit_plot
from .symbolic import (SymbolicEquation, SymbolicFit, SymbolicOverride,
                       fit_primitive, r_squared, suggest_primitives)

__version__ = "0.1.0"

__all__ = [
    "BuckParams", "ConfigError", "DegenerateDataError", "KanNetwork",
    "KansidError", "ModelFormatError", "NotSymbolicError", "PiController",
    "PipelineConfig", "PipelineResult", "ReferenceProfile", "SidDataset",
    "SimulationDivergedError", "SplineGrid", "StateSpaceModel",
    "SymbolicEquation", "SymbolicFit", "SymbolicOverride", "TrainConfig",
    "TrainReport", "Trajectory", "TrainingDivergedError",
    "activation_stats", "assemble_state_space", "averaged_derivatives",
    "backward", "basis_derivatives", "basis_values", "build_dataset",
    "compare_models", "emit_plot", "finite_diff", "fit_primitive",
    "fix_input_zero", "fix_symbolic", "forward", "full_pipeline",
    "grid_from_samples", "identify_state", "input_ranges", "lbfgs_train",
    "load_model", "load_statespace", "logcosh", "make_uniform_grid",
    "minimize_lbfgs", "new_network", "objective", "pi_step", "prune",
    "r_squared", "read_trajectory_csv", "report_json", "report_to_dict",
    "save_model", "save_statespace", "simulate_plant", "simulate_statespace",
    "suggest_primitives", "suggest_symbolic", "to_equation",
    "true_state_space", "verify_model", "write_trajectory_csv",
]
