"""Salient-point-primed monocular depth estimation on synthetic scenes.

Subpackages build on a small reverse-mode autodiff engine (``tensor``):
fixed Gaussian-derivative filtering (``filters``), the training loss family
(``losses``), normalized-convolution confidence propagation (``nconv``),
keypoint detection and salient-point machinery (``saliency``), the two-pass
fusion/saliency network and its trainer (``model``, ``train``), evaluation
metrics (``metrics``), a synthetic scene generator (``synth``), and file and
command line plumbing (``fileio``, ``config``, ``cli``).
"""

from .tensor import Tensor, backward, gradcheck, no_grad

__all__ = ["Tensor", "backward", "gradcheck", "no_grad"]
__version__ = "0.1.0"
