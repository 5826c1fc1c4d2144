"""Infinite-width kernel and tangent-kernel recursions for pre-LN Transformers, with a finite-width lab to test them."""
import os as _os

# BLAS reads its thread count at import time, so honour WIDEFORMER_THREADS
# before numpy is first imported.
_threads = _os.environ.get("WIDEFORMER_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        _os.environ.setdefault(_var, _threads)

from .arch_plan import ArchSpec, Constants, Scale, ScalingPlan, ScalingStrategy, build_plan, plan_table  # noqa: E402
from .config import ConfigError, RunConfig, load_config, parse_config  # noqa: E402
from .kernel_engine import PropagationError, propagate_kernels  # noqa: E402
from .ntk_engine import propagate  # noqa: E402

__all__ = [
    "ArchSpec",
    "ConfigError",
    "Constants",
    "PropagationError",
    "RunConfig",
    "Scale",
    "ScalingPlan",
    "ScalingStrategy",
    "build_plan",
    "load_config",
    "parse_config",
    "plan_table",
    "propagate",
    "propagate_kernels",
]
