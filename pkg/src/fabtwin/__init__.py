"""Variation-aware fabrication digital twin: virtual fab, noise-injected cGAN, metrics."""

__version__ = "0.1.0"

from .estimators import GenFab, UNetEnsemble, UNetRegressor  # noqa: E402
from .exceptions import (FabTwinError, InvalidConfigError, InvalidInputError,  # noqa: E402
                         InvalidSpecError, TrainingDivergedError, UnsupportedFormatError)
from .fab import FabParams, fab_batch, fab_sample  # noqa: E402
from .patterns import SynthSpec, make_eval_structure, synth_fourier_pattern  # noqa: E402
from .training import TrainConfig  # noqa: E402

__all__ = [
    "FabParams", "FabTwinError", "GenFab", "InvalidConfigError", "InvalidInputError",
    "InvalidSpecError", "SynthSpec", "TrainConfig", "TrainingDivergedError", "UNetEnsemble",
    "UNetRegressor", "UnsupportedFormatError", "fab_batch", "fab_sample", "make_eval_structure",
    "synth_fourier_pattern",
]
