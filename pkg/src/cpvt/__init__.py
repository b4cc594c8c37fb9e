"""Vision transformers with convolutional conditional positional encodings."""

from .errors import (
    ConfigError,
    ContractError,
    CorruptionError,
    CPVTError,
    DeterminismError,
    DivergenceError,
    ResolutionError,
    ShapeError,
    VersionError,
)
from .tensor import Tensor, backward, grad_check, no_grad
from .grid import TokenGrid
from .posenc import EncodingScheme, PEGSpec, apply_scheme, peg_forward, peg_forward_masked
from .model import (
    CPVT,
    ModelConfig,
    attention_scores,
    build_model,
    count_params_flops,
    forward,
    forward_variable_resolution,
)
from .checkpoint import load_checkpoint, save_checkpoint

__version__ = "0.1.0"

__all__ = [
    "CPVT",
    "CPVTError",
    "ConfigError",
    "ContractError",
    "CorruptionError",
    "DeterminismError",
    "DivergenceError",
    "EncodingScheme",
    "ModelConfig",
    "PEGSpec",
    "ResolutionError",
    "ShapeError",
    "Tensor",
    "TokenGrid",
    "VersionError",
    "apply_scheme",
    "attention_scores",
    "backward",
    "build_model",
    "count_params_flops",
    "forward",
    "forward_variable_resolution",
    "grad_check",
    "load_checkpoint",
    "no_grad",
    "peg_forward",
    "peg_forward_masked",
    "save_checkpoint",
]
