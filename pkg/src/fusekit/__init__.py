"""fusekit: importance-scored selective merging of model checkpoints."""

__version__ = "0.1.0"

from .errors import CheckpointFormatError, CompatibilityError, FusekitError, InvariantError, ValidationError
from .tensor_store import (
    Dtype,
    TensorMap,
    TensorRecord,
    from_f32,
    read_checkpoint,
    to_f32,
    validate_compat,
    write_checkpoint,
)
from .quantiles import ImportanceStats, dynamic_threshold, exact_quartiles, global_quartiles
from .fusion import (
    FusionParams,
    Granularity,
    elementwise_kl,
    fuse_models,
    fuse_tensors,
    importance_scores,
    selective_merge,
    softmax_normalize,
)
from .baselines import linear_merge, task_arithmetic_merge
from .synth import SynthSpec, generate_synthetic_checkpoint, perturb_expert
from .recipe import MergeRecipe, MergeReport, compare_plans, execute, load_recipe, parse_recipe

__all__ = [
    "CheckpointFormatError", "CompatibilityError", "Dtype", "FusekitError", "FusionParams",
    "Granularity", "ImportanceStats", "InvariantError", "MergeRecipe", "MergeReport", "SynthSpec",
    "TensorMap", "TensorRecord", "ValidationError", "compare_plans", "dynamic_threshold",
    "elementwise_kl", "exact_quartiles", "execute", "from_f32", "fuse_models", "fuse_tensors",
    "generate_synthetic_checkpoint", "global_quartiles", "importance_scores", "linear_merge",
    "load_recipe", "parse_recipe", "perturb_expert", "read_checkpoint", "selective_merge",
    "softmax_normalize", "task_arithmetic_merge", "to_f32", "validate_compat", "write_checkpoint",
]
