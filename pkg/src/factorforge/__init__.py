"""Constrained matrix and tensor factorization with alternating
optimization and ADMM-solved factor subproblems."""

from .admm import (AdmmReport, Counters, InitializationError, KernelCache,
                   admm_general, admm_ls, build_cache, residuals,
                   solve_ls_system)
from .config import (ConfigError, config_hash, load_config, loss_from_dict,
                     parse_config, problem_from_config, reg_from_dict,
                     reg_to_dict, serialize_config)
from .driver import (FitResult, ProblemConfig, TraceRecord,
                     constraint_violation, evaluate, fit, fit_two_stage,
                     init_factors, objective, update_mu)
from .harness import (CompletionVariant, SplitSpec, SynthSpec, congruence,
                      gen_ratings, gen_synthetic, plant_dictionary,
                      run_completion_cv, run_dictlearn, sample_observed)
from .losses import (DenseSplitState, LossSpec, SparseSplitState, loss_value,
                     v_update, y_update)
from .prox import RegularizerSpec, prox_apply, reg_value, violation
from .tensors import (BudgetError, DenseTensor, SparseTensor, full,
                      gram_hadamard, khatri_rao, kr_skip, matricize, model_at,
                      mttkrp, relative_error, validate_factors)
from .tensorio import (TensorFormatError, infer_format, load_factors,
                       load_tensor, loads_coo, save_factors, save_tensor)

__version__ = "0.1.0"

__all__ = [
    "AdmmReport", "BudgetError", "CompletionVariant", "ConfigError",
    "Counters", "DenseSplitState", "DenseTensor", "FitResult",
    "InitializationError", "KernelCache", "LossSpec", "ProblemConfig",
    "RegularizerSpec", "SparseSplitState", "SparseTensor", "SplitSpec",
    "SynthSpec", "TensorFormatError", "TraceRecord", "admm_general",
    "admm_ls", "build_cache", "config_hash", "congruence",
    "constraint_violation", "evaluate", "fit", "fit_two_stage", "full",
    "gen_ratings", "gen_synthetic", "gram_hadamard", "infer_format",
    "init_factors", "khatri_rao", "kr_skip", "load_config", "load_factors",
    "load_tensor", "loads_coo", "loss_from_dict", "loss_value", "matricize",
    "model_at", "mttkrp", "objective", "parse_config", "plant_dictionary",
    "problem_from_config", "prox_apply", "reg_from_dict", "reg_to_dict",
    "reg_value", "relative_error", "residuals", "run_completion_cv",
    "run_dictlearn", "sample_observed", "save_factors", "save_tensor",
    "serialize_config", "solve_ls_system", "update_mu", "v_update",
    "validate_factors", "violation", "y_update",
]
