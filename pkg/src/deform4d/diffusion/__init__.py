"""Token-space denoising diffusion over shape and motion features."""

from .schedule import (
    DiffusionSchedule,
    ScheduleError,
    ddim_step,
    ddim_timesteps,
    forward_noise,
    make_schedule,
    timestep_embedding,
)
from .models import (
    DenoiserConfig,
    MotionDenoiser,
    ShapeDenoiser,
    TokenNorm,
    denormalize_features,
    normalize_features,
)
from .train import (
    DiffusionTrainConfig,
    MotionDiffusionModel,
    ShapeDiffusionModel,
    train_motion_diffusion,
    train_shape_diffusion,
)
from .sample import ddim_sample_motion, ddim_sample_shape, outpaint_extend

__all__ = [
    "DiffusionSchedule",
    "ScheduleError",
    "make_schedule",
    "forward_noise",
    "timestep_embedding",
    "ddim_timesteps",
    "ddim_step",
    "DenoiserConfig",
    "TokenNorm",
    "ShapeDenoiser",
    "MotionDenoiser",
    "normalize_features",
    "denormalize_features",
    "ShapeDiffusionModel",
    "MotionDiffusionModel",
    "DiffusionTrainConfig",
    "train_shape_diffusion",
    "train_motion_diffusion",
    "ddim_sample_shape",
    "ddim_sample_motion",
    "outpaint_extend",
]
