"""
crossdiff - dual-level cross-modal differential attention for 3D visual grounding.

A numpy tensor kernel with reverse-mode gradients, point-level and
cluster-level differential attention, the dual-geometry task-harmonized loss,
a synthetic scene corpus and a rule/LLM implicit-relation filter.
"""

__version__ = "0.1.0"

from .config import RunConfig
from .errors import CrossDiffError
from .model import GroundingModel, ModelConfig
from .tensor import Tensor, GradTape, grad_check

__all__ = ["RunConfig", "CrossDiffError", "GroundingModel", "ModelConfig", "Tensor", "GradTape", "grad_check",
           "__version__"]
