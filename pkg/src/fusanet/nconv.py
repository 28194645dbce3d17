"""Normalized convolution: joint propagation of features and confidence.

A normalized convolution weights its input by a per-pixel confidence map,
divides by the convolved confidence, and emits an updated confidence.
Kernel weights are kept strictly positive through a softplus
reparameterization, which gives two structural guarantees: confidence can
never flip sign, and raising the confidence of any input pixel can only
raise downstream confidences.

Conventions used here:
  y  = conv(c * x, W) / (conv(c, W) + 1e-20) + b
  c' = clamp01( mean over output channels of conv(c, W) / sum(W) )

The bias sits outside the normalization so that a fully unobserved input
(c = 0) yields exactly the bias instead of an indeterminate ratio, and full
confidence (c = 1) reduces to an ordinary kernel-normalized convolution
plus bias.
"""

import numpy as np

from . import tensor as T
from .layers import Module

_EPS = 1e-20


def _inverse_softplus(y):
    # value v with softplus(v) = y, for y > 0
    return float(np.log(np.expm1(y)))


class NConv2d(Module):
    """One normalized-convolution layer; see the module docstring."""

    def __init__(self, cin, cout, ksize, rng, stride=1, padding=None):
        self.stride = stride
        self.padding = ksize // 2 if padding is None else padding
        # effective weights start near a uniform averaging kernel
        centre = _inverse_softplus(1.0 / (cin * ksize * ksize))
        self.raw_weight = T.Tensor(
            centre + 0.35 * rng.standard_normal((cout, cin, ksize, ksize)),
            requires_grad=True,
        )
        self.bias = T.Tensor(np.zeros(cout), requires_grad=True)

    def effective_weight(self):
        return T.softplus(self.raw_weight)

    def __call__(self, x, c):
        return nconv_forward(x, c, self)


def nconv_forward(x, c, layer):
    """Apply one normalized convolution.

    x: (N, Cin, H, W) features; c: (N, 1, H, W) confidence in [0, 1].
    Returns (y, c') with y (N, Cout, H', W') and c' (N, 1, H', W') in [0, 1].
    Differentiable in x, c, and the layer parameters.
    """
    x, c = T.as_tensor(x), T.as_tensor(c)
    if x.ndim != 4 or c.ndim != 4 or c.shape[1] != 1 or x.shape[0] != c.shape[0] \
            or x.shape[2:] != c.shape[2:]:
        raise ValueError(f"features {x.shape} and confidence {c.shape} are not aligned")
    w = layer.effective_weight()
    cout, cin = w.shape[0], w.shape[1]
    if x.shape[1] != cin:
        raise ValueError(f"nconv: input channels {x.shape[1]} != kernel channels {cin}")

    num = T.conv2d(T.mul(x, c), w, stride=layer.stride, padding=layer.padding)
    # denominator: same kernel applied to the broadcast confidence
    w_csum = T.reduce_sum(w, axes=1, keepdims=True)
    den = T.conv2d(c, w_csum, stride=layer.stride, padding=layer.padding)
    y = T.add(T.div(num, T.add(den, _EPS)),
              T.reshape(layer.bias, (1, cout, 1, 1)))

    w_total = T.reshape(T.reduce_sum(w, axes=(1, 2, 3)), (1, cout, 1, 1))
    c_next = T.clamp01(T.reduce_mean(T.div(den, w_total), axes=1, keepdims=True))
    return y, c_next


class ConfidencePredictor(Module):
    """Chain of normalized convolutions with a terminal sigmoid.

    Propagates features and confidence jointly; the sigmoid of the last
    feature map (collapsed to one channel) is the predicted confidence.
    """

    def __init__(self, cin, hidden, depth, rng, ksize=3):
        if depth < 1:
            raise ValueError("confidence predictor needs at least one layer")
        chans = [cin] + [hidden] * (depth - 1) + [1]
        self.chain = [NConv2d(chans[i], chans[i + 1], ksize, rng) for i in range(depth)]

    def __call__(self, features, c):
        y = features
        for layer in self.chain:
            y, c = layer(y, c)
        return T.sigmoid(y)
