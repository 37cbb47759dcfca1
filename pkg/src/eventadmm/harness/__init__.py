"""Data generators, experiment specifications, study drivers and the command line."""
from .data import gen_general_instance, gen_noniid_regression, gen_nonconvex_toy, local_minimizers
from .spec import ExperimentSpec, SpecError, default_spec
from .studies import (SweepResult, best_per_policy, best_savings, run_certify_grid, run_decay_study,
                      run_drop_study, run_graph_study, run_nonconvex_study, run_tradeoff_sweep)

__all__ = ["ExperimentSpec", "SpecError", "SweepResult", "best_per_policy", "best_savings",
           "default_spec", "gen_general_instance", "gen_noniid_regression", "gen_nonconvex_toy",
           "local_minimizers", "run_certify_grid", "run_decay_study", "run_drop_study",
           "run_graph_study", "run_nonconvex_study", "run_tradeoff_sweep"]
