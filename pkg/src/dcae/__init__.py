"""Deep-compression autoencoders with residual shortcuts and staged training."""

from .checkpoint import load_checkpoint, save_checkpoint
from .errors import (
    CheckpointError, ConfigError, DataError, DCAEError, NumericError, PipelineError, ShapeError,
)
from .model import DCAE, AutoencoderConfig, build, parameter_groups, preset
from .shuffle_ops import channel_average, channel_duplicate, channel_to_space, space_to_channel
from .training import PhaseSpec, run_phase, run_pipeline

__version__ = "0.1.0"
