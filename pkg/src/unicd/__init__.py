"""Unified bitemporal change detection on a small numpy autodiff core."""
from .config import ConfigError, ModelConfig, TaskKind
from .model import ChangeModel

__all__ = ["ChangeModel", "ConfigError", "ModelConfig", "TaskKind"]
__version__ = "0.1.0"
