"""numpy-only vehicle detector: Ghost convolutions, CBAM attention and DCNv2 heads on a YOLO-style network."""

from .errors import (BuildError, FormatError, IntegrityError, NonFiniteLossError, ParameterError, ParseError,
                     ShapeError, VdetError)
from .model import DEFAULT_CLASSES, Model, ModelConfig, build_model, load_checkpoint, save_checkpoint
from .tensor import Tape, Tensor

__all__ = ["BuildError", "DEFAULT_CLASSES", "FormatError", "IntegrityError", "Model", "ModelConfig",
           "NonFiniteLossError", "ParameterError", "ParseError", "ShapeError", "Tape", "Tensor", "VdetError",
           "build_model", "load_checkpoint", "save_checkpoint"]
__version__ = "0.1.0"
