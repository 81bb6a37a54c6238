"""RGBT object tracking with pixel-level fusion, cross-modal feature
interaction and decision-level refinement."""

from .backends import active_backend_name
from .tensor import Tensor, backward, no_grad, set_mode

__version__ = "0.1.0"

__all__ = ["Tensor", "backward", "no_grad", "set_mode", "active_backend_name", "__version__"]
