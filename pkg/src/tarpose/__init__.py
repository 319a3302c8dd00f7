"""Joint-centric temporal pose estimation on a small numpy autodiff core."""
from .backbone import BackboneConfig
from .fusion import FusionConfig
from .model import ModelConfig, forward, forward_baseline, init_params, predict
from .tensor import Tape, Tensor, no_grad

__all__ = [
    "BackboneConfig", "FusionConfig", "ModelConfig", "Tape", "Tensor",
    "forward", "forward_baseline", "init_params", "no_grad", "predict",
]
__version__ = "0.1.0"
