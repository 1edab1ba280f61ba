"""dusklab: a desk-scale color-thermal test-time adaptation laboratory.

Submodules:
  tensor   float64 tensors + tape autodiff + gradient checker
  layers   conv / batchnorm / activations / pooling / softmax / cross-entropy
  models   color, thermal and interaction branches with shared-attention rectification
  fusion   per-pixel entropy weighting and teacher-logit synthesis
  tta      adaptation loop: losses, dynamic branch weights, BN-affine updates
  scenes   synthetic day/night color-thermal scene generator and dataset IO
  metrics  confusion matrix, per-class IoU, mIoU
  harness  experiment drivers (gen / pretrain / adapt / ablate / report / selftest)
"""

from .tensor import Tensor, Tape, backward, grad_check

__all__ = ["Tensor", "Tape", "backward", "grad_check"]
__version__ = "0.1.0"
