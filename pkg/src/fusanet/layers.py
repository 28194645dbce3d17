"""Parameter containers and basic learned layers."""

import numpy as np

from . import tensor as T


class Module:
    """Parameter registry.  Tensors with requires_grad and child Modules
    assigned as attributes (or in lists/tuples of them) are collected by
    named_parameters in attribute insertion order.  Shared submodules are
    visited once, under their first name."""

    def named_parameters(self, prefix=""):
        yield from self._named_parameters(prefix, set())

    def _named_parameters(self, prefix, seen):
        for name, val in vars(self).items():
            key = f"{prefix}{name}"
            if isinstance(val, T.Tensor):
                if val.requires_grad and id(val) not in seen:
                    seen.add(id(val))
                    yield key, val
            elif isinstance(val, Module):
                if id(val) not in seen:
                    seen.add(id(val))
                    yield from val._named_parameters(f"{key}.", seen)
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module) and id(item) not in seen:
                        seen.add(id(item))
                        yield from item._named_parameters(f"{key}.{i}.", seen)
                    elif isinstance(item, T.Tensor) and item.requires_grad \
                            and id(item) not in seen:
                        seen.add(id(item))
                        yield f"{key}.{i}", item

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def n_parameters(self):
        return sum(p.size for p in self.parameters())


class Conv2d(Module):
    """Learned 2D cross-correlation with He-normal init.

    `weight_scale` shrinks the init, used where several branches sum so the
    variance does not grow per block."""

    def __init__(self, cin, cout, ksize, rng, stride=1, padding=None, dilation=1,
                 bias=True, weight_scale=1.0):
        self.stride = stride
        self.dilation = dilation
        self.padding = (ksize // 2) * dilation if padding is None else padding
        std = weight_scale * np.sqrt(2.0 / (cin * ksize * ksize))
        self.weight = T.Tensor(rng.standard_normal((cout, cin, ksize, ksize)) * std,
                               requires_grad=True)
        self.bias = T.Tensor(np.zeros(cout), requires_grad=True) if bias else None

    def __call__(self, x):
        return T.conv2d(x, self.weight, self.bias,
                        stride=self.stride, dilation=self.dilation, padding=self.padding)


class Linear(Module):
    def __init__(self, nin, nout, rng):
        std = np.sqrt(2.0 / nin)
        self.weight = T.Tensor(rng.standard_normal((nin, nout)) * std, requires_grad=True)
        self.bias = T.Tensor(np.zeros(nout), requires_grad=True)

    def __call__(self, x):
        return T.add(T.matmul(x, self.weight), self.bias)
