"""
Parameter containers and the basic trainable layers.

"""
import collections
import math

import numpy as np

from . import tensor as T
from .errors import FormatError, ShapeError


class Parameter(T.Tensor):
    """A trainable leaf tensor."""

    def __init__(self, data, name=None):
        super(Parameter, self).__init__(np.array(data, dtype=np.float64), requires_grad=True, name=name)


class Module(object):
    """Base class; parameters and sub-modules are discovered in attribute order."""

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def named_parameters(self, prefix=''):
        for name, value in vars(self).items():
            if name.startswith('_'):
                continue
            full = prefix + name
            if isinstance(value, Parameter):
                yield full, value
            elif isinstance(value, Module):
                for item in value.named_parameters(full + '.'):
                    yield item
            elif isinstance(value, (list, tuple)):
                for index, element in enumerate(value):
                    if isinstance(element, Module):
                        for item in element.named_parameters('%s.%d.' % (full, index)):
                            yield item
                    elif isinstance(element, Parameter):
                        yield '%s.%d' % (full, index), element

    def parameters(self):
        return [parameter for _, parameter in self.named_parameters()]

    def count_parameters(self):
        return int(np.sum([parameter.size for parameter in self.parameters()]))

    def zero_grad(self):
        for parameter in self.parameters():
            parameter.zero_grad()

    def state_dict(self):
        return collections.OrderedDict((name, parameter.data.copy()) for name, parameter in self.named_parameters())

    def load_state_dict(self, state):
        own = collections.OrderedDict(self.named_parameters())
        missing = [name for name in own if name not in state]
        unexpected = [name for name in state if name not in own]
        if missing or unexpected:
            raise FormatError('State mismatch: missing %s, unexpected %s' % (missing[:3], unexpected[:3]))
        for name, parameter in own.items():
            value = np.asarray(state[name], dtype=np.float64)
            if value.shape != parameter.shape:
                raise ShapeError("Parameter '%s' has shape %s, state holds %s" % (name, parameter.shape, value.shape))
            parameter.data = value.copy()


def uniform(rng, bound, shape):
    return rng.uniform(-bound, bound, size=shape)


class Linear(Module):
    """``y = x @ weight + bias`` with ``weight`` of shape (in, out)."""

    def __init__(self, n_in, n_out, rng, bias=True):
        bound = 1.0 / math.sqrt(n_in)
        self.weight = Parameter(uniform(rng, bound, (n_in, n_out)))
        self.bias = Parameter(uniform(rng, bound, (n_out,))) if bias else None

    def forward(self, x):
        return T.linear(x, self.weight, self.bias)


class Conv2d(Module):

    def __init__(self, n_in, n_out, kernel_size, rng, stride=1, padding=None, groups=1, padding_mode='reflect', bias=True):
        if n_in % groups or n_out % groups:
            raise ShapeError('Conv2d channels %d -> %d not divisible by %d groups' % (n_in, n_out, groups))
        fan_in = (n_in // groups) * kernel_size * kernel_size
        bound = 1.0 / math.sqrt(fan_in)
        self.weight = Parameter(uniform(rng, bound, (n_out, n_in // groups, kernel_size, kernel_size)))
        self.bias = Parameter(uniform(rng, bound, (n_out,))) if bias else None
        self._stride = stride
        self._padding = kernel_size // 2 if padding is None else padding
        self._groups = groups
        self._padding_mode = padding_mode

    def forward(self, x):
        return T.conv2d(x, self.weight, self.bias, stride=self._stride, padding=self._padding,
                        padding_mode=self._padding_mode, groups=self._groups)


class LayerNorm(Module):
    """Normalization over the last axis with a learned affine map."""

    def __init__(self, n_features):
        self.gamma = Parameter(np.ones(n_features))
        self.beta = Parameter(np.zeros(n_features))

    def forward(self, x):
        return T.layer_norm(x, self.gamma, self.beta)


def to_tokens(x):
    """``(b, c, h, w) -> (b, h, w, c)``."""
    return T.transpose(x, (0, 2, 3, 1))


def to_image(x):
    """``(b, h, w, c) -> (b, c, h, w)``."""
    return T.transpose(x, (0, 3, 1, 2))
