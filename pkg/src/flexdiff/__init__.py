"""flexdiff: a desk-scale diffusion transformer that can trade patch size
against compute at inference time, with exact cost accounting."""

from .backbone import Model, ModelConfig, flexify, forward, init_model, merge_loras, predict
from .diffusion import NoiseSchedule, linear_betas
from .scheduling import (
    GuidanceConfig,
    InferencePlan,
    cfg_combine,
    make_plan,
    parse_plan,
    sample_with_plan,
    serialize_plan,
)
from .tokenizer import PatchSpec

__version__ = "0.1.0"

__all__ = [
    "Model",
    "ModelConfig",
    "PatchSpec",
    "NoiseSchedule",
    "GuidanceConfig",
    "InferencePlan",
    "init_model",
    "flexify",
    "merge_loras",
    "forward",
    "predict",
    "linear_betas",
    "make_plan",
    "parse_plan",
    "serialize_plan",
    "cfg_combine",
    "sample_with_plan",
    "__version__",
]
