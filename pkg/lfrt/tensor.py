"""
A small numpy tensor with reverse-mode automatic differentiation.

Every operation records its parents and a closure mapping the output
gradient to one gradient per parent. ``Tensor.backward`` walks the recorded
graph once in reverse topological order. Image operations use the batch-first
layout ``(n, c, h, w)``.

"""
##############################################################################
# imports
##############################################################################

import contextlib
import logging
import math

import numpy as np
from scipy import special

from .errors import NumericFault, ShapeError
from .lightfield import bilinear_matrix, decimation_matrix

logger = logging.getLogger(__name__)

##############################################################################
# globals
##############################################################################

_grad_enabled = True
_checked = False

LAYER_NORM_EPS = 1e-5


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording a graph."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


@contextlib.contextmanager
def checked(enabled=True):
    """Raise NumericFault as soon as an op produces a NaN or Inf."""
    global _checked
    previous = _checked
    _checked = enabled
    try:
        yield
    finally:
        _checked = previous


def is_grad_enabled():
    return _grad_enabled

##############################################################################
# Tensor
##############################################################################

class Tensor(object):
    """N-D array node of a computation graph.

    Parameters
    ----------
    data : array_like
        Values; non-floating input is converted to float64.
    requires_grad : bool, optional, default=False
        Leaves with ``requires_grad`` receive ``.grad`` after ``backward``.

    """
    __array_priority__ = 1000

    def __init__(self, data, requires_grad=False, name=None):
        data = np.asarray(data)
        if not np.issubdtype(data.dtype, np.floating):
            data = data.astype(np.float64)
        self.data = data
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents = ()
        self._backward = None
        self._op = 'leaf'

    def __repr__(self):
        return 'Tensor(shape=%s, op=%s, requires_grad=%s)' % (self.shape, self._op, self.requires_grad)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every reachable leaf.

        Raises
        ------
        ShapeError
            If ``self`` is not a scalar and no seed gradient is given.

        """
        if grad is None:
            if self.data.size != 1:
                raise ShapeError('backward needs a scalar loss, got shape %s' % (self.shape,))
            grad = np.ones_like(self.data)
        grads = {id(self): np.asarray(grad, dtype=self.dtype)}
        for node in reversed(_topological_order(self)):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, parent_grad in zip(node._parents, node._backward(g)):
                if parent_grad is None or not parent.requires_grad:
                    continue
                if _checked and not np.all(np.isfinite(parent_grad)):
                    raise NumericFault('Non-finite gradient flowing out of %s' % node._op)
                key = id(parent)
                grads[key] = parent_grad if key not in grads else grads[key] + parent_grad

    # operators
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return getitem(self, index)

    # methods
    def sum(self, axis=None, keepdims=False):
        return sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def abs(self):
        return absolute(self)


def tensor(data, requires_grad=False):
    return Tensor(np.array(data, dtype=np.float64), requires_grad=requires_grad)


def _as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else np.float64
    return Tensor(np.asarray(x, dtype=dtype))


as_tensor = _as_tensor


def _pair(a, b):
    """Wrap constants, taking the dtype of the tensor operand."""
    if not isinstance(a, Tensor):
        a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    return a, _as_tensor(b, a)


def _make(data, parents, backward, op):
    if _checked and not np.all(np.isfinite(data)):
        raise NumericFault('Non-finite values produced by %s' % op)
    out = Tensor(data)
    if _grad_enabled and any(parent.requires_grad for parent in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
        out._op = op
    return out


def _topological_order(root):
    """Parents before children; iterative post-order DFS."""
    order = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))
    return order


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (reverse of numpy broadcasting)."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _normalize_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if np.isscalar(axis):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))

##############################################################################
# elementwise
##############################################################################

def add(a, b):
    a, b = _pair(a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)
    return _make(a.data + b.data, (a, b), backward, 'add')


def sub(a, b):
    a, b = _pair(a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)
    return _make(a.data - b.data, (a, b), backward, 'sub')


def mul(a, b):
    a, b = _pair(a, b)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)
    return _make(a.data * b.data, (a, b), backward, 'mul')


def div(a, b):
    a, b = _pair(a, b)
    out = a.data / b.data

    def backward(g):
        return _unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)
    return _make(out, (a, b), backward, 'div')


def neg(a):
    return _make(-a.data, (a,), lambda g: (-g,), 'neg')


def power(a, exponent):
    if not np.isscalar(exponent):
        raise ShapeError('power supports scalar exponents only')

    def backward(g):
        return (g * exponent * a.data ** (exponent - 1),)
    return _make(a.data ** exponent, (a,), backward, 'power')


def square(a):
    return _make(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,), 'square')


def sqrt(a):
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (0.5 * g / out,), 'sqrt')


def exp(a):
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), 'exp')


def log(a):
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,), 'log')


def absolute(a):
    return _make(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),), 'abs')


def tanh(a):
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),), 'tanh')


def sigmoid(a):
    out = special.expit(a.data)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),), 'sigmoid')


def gelu(a):
    """Exact GELU, ``x * Phi(x)``."""
    x = a.data
    cdf = 0.5 * (1.0 + special.erf(x / math.sqrt(2.0)))
    pdf = np.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)
    return _make(x * cdf, (a,), lambda g: (g * (cdf + x * pdf),), 'gelu')


def clip(a, lo, hi):
    """Clamp to ``[lo, hi]``; the gradient is zero where the clamp is active."""
    mask = (a.data >= lo) & (a.data <= hi)
    return _make(np.clip(a.data, lo, hi), (a,), lambda g: (g * mask,), 'clip')

##############################################################################
# reductions
##############################################################################

def sum(a, axis=None, keepdims=False):
    axes = _normalize_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape),)
    return _make(out, (a,), backward, 'sum')


def mean(a, axis=None, keepdims=False):
    axes = _normalize_axes(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes]))
    return mul(sum(a, axes, keepdims), 1.0 / count)


def _extreme(a, axis, keepdims, reducer, op):
    axes = _normalize_axes(axis, a.ndim)
    kept = reducer(a.data, axis=axes, keepdims=True)
    mask = (a.data == kept).astype(a.dtype)
    mask = mask / mask.sum(axis=axes, keepdims=True)
    out = kept if keepdims else np.squeeze(kept, axis=axes)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (g * mask,)
    return _make(out, (a,), backward, op)


def amax(a, axis=None, keepdims=False):
    """Maximum; tied maxima share the gradient evenly."""
    return _extreme(a, axis, keepdims, np.amax, 'amax')


def amin(a, axis=None, keepdims=False):
    return _extreme(a, axis, keepdims, np.amin, 'amin')

##############################################################################
# shape manipulation
##############################################################################

def reshape(a, shape):
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), 'reshape')


def transpose(a, axes=None):
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inverse = np.argsort(axes)
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),), 'transpose')


def swap_last(a):
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, tuple(axes))


def _is_basic_index(index):
    if not isinstance(index, tuple):
        index = (index,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in index)


def getitem(a, index):
    basic = _is_basic_index(index)

    def backward(g):
        out = np.zeros_like(a.data)
        if basic:
            out[index] = g
        else:
            np.add.at(out, index, g)
        return (out,)
    return _make(a.data[index], (a,), backward, 'getitem')


def take(a, indices, axis):
    """``np.take`` along ``axis`` with 1-D integer ``indices``."""
    indices = np.asarray(indices, dtype=np.intp)
    axis = axis % a.ndim

    def backward(g):
        out = np.zeros_like(a.data)
        np.add.at(np.moveaxis(out, axis, 0), indices, np.moveaxis(g, axis, 0))
        return (out,)
    return _make(np.take(a.data, indices, axis=axis), (a,), backward, 'take')


def concat(tensors, axis=0):
    tensors = [_as_tensor(t) for t in tensors]
    axis = axis % tensors[0].ndim
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))
    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward, 'concat')


def split(a, sections, axis=0):
    """Split into ``sections`` equal parts along ``axis``."""
    size = a.shape[axis]
    if size % sections:
        raise ShapeError('Cannot split axis of size %d into %d equal parts' % (size, sections))
    step = size // sections
    prefix = (slice(None),) * (axis % a.ndim)
    return [getitem(a, prefix + (slice(i * step, (i + 1) * step),)) for i in range(sections)]


def pad2d(x, padding, mode='reflect'):
    """Pad the last two axes by ``(top, bottom, left, right)`` (or one int).

    'reflect' mirrors without repeating the edge sample; 'zero' pads zeros.
    """
    if np.isscalar(padding):
        padding = (padding,) * 4
    top, bottom, left, right = (int(p) for p in padding)
    if not any((top, bottom, left, right)):
        return x
    if mode == 'zero':
        widths = [(0, 0)] * (x.ndim - 2) + [(top, bottom), (left, right)]
        h, w = x.shape[-2:]

        def backward(g):
            return (g[..., top:top + h, left:left + w],)
        return _make(np.pad(x.data, widths), (x,), backward, 'pad2d')
    if mode == 'reflect':
        h, w = x.shape[-2:]
        rows = np.pad(np.arange(h), (top, bottom), mode='reflect')
        cols = np.pad(np.arange(w), (left, right), mode='reflect')
        return take(take(x, rows, -2), cols, -1)
    raise ShapeError("Unknown padding mode '%s'" % mode)

##############################################################################
# linear algebra
##############################################################################

def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError('matmul needs operands of rank >= 2, got %s and %s' % (a.shape, b.shape))
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError('matmul inner dims differ: %s @ %s' % (a.shape, b.shape))

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)
    return _make(np.matmul(a.data, b.data), (a, b), backward, 'matmul')


def linear(x, weight, bias=None):
    """``x @ weight + bias`` with ``weight`` of shape (in, out)."""
    out = matmul(x, weight)
    if bias is not None:
        out = add(out, bias)
    return out


def softmax(a, axis=-1):
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)
    return _make(out, (a,), backward, 'softmax')


def normalize_last(a, eps=LAYER_NORM_EPS):
    """Zero-mean, unit-variance normalization over the last axis."""
    mu = a.data.mean(axis=-1, keepdims=True)
    centered = a.data - mu
    inv_std = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv_std

    def backward(g):
        gx = g - g.mean(axis=-1, keepdims=True) - xhat * (g * xhat).mean(axis=-1, keepdims=True)
        return (gx * inv_std,)
    return _make(xhat, (a,), backward, 'layer_norm')


def layer_norm(a, gamma=None, beta=None, eps=LAYER_NORM_EPS):
    """Per-token normalization over the last (channel) axis with optional affine."""
    out = normalize_last(a, eps)
    if gamma is not None:
        out = mul(out, gamma)
    if beta is not None:
        out = add(out, beta)
    return out


def attention_weights(q, k):
    """``softmax(q k^T / sqrt(d))`` over the key axis."""
    if q.shape[-1] != k.shape[-1]:
        raise ShapeError('Query dim %d differs from key dim %d' % (q.shape[-1], k.shape[-1]))
    if q.shape[-1] < 1:
        raise ShapeError('Attention needs d >= 1')
    scores = mul(matmul(q, swap_last(k)), 1.0 / math.sqrt(q.shape[-1]))
    return softmax(scores, axis=-1)


def scaled_dot_attention(q, k, v, return_weights=False):
    """Scaled dot-product attention over the last two axes.

    Parameters
    ----------
    q : Tensor, shape (..., n, d)
    k : Tensor, shape (..., m, d)
    v : Tensor, shape (..., m, dv)

    """
    if k.shape[-2] != v.shape[-2]:
        raise ShapeError('%d keys but %d values' % (k.shape[-2], v.shape[-2]))
    weights = attention_weights(q, k)
    out = matmul(weights, v)
    return (out, weights) if return_weights else out

##############################################################################
# images
##############################################################################

def _conv_taps(x, w, stride, groups):
    n, c, h, wd = x.shape
    co, cg, kh, kw = w.shape
    ho = (h - kh) // stride + 1
    wo = (wd - kw) // stride + 1
    return n, c, co, cg, kh, kw, ho, wo


def _conv2d_valid(x, w, stride, groups):
    n, c, co, cg, kh, kw, ho, wo = _conv_taps(x, w, stride, groups)
    if ho < 1 or wo < 1:
        raise ShapeError('Input %s smaller than kernel %dx%d' % (x.shape, kh, kw))
    s = stride

    def window(array, i, j):
        return array[:, :, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s]

    xd, wdata = x.data, w.data
    out = np.zeros((n, co, ho, wo), dtype=np.result_type(xd, wdata))
    for i in range(kh):
        for j in range(kw):
            xs = window(xd, i, j)
            if groups == 1:
                out += np.einsum('nchw,oc->nohw', xs, wdata[:, :, i, j], optimize=True)
            else:
                xg = xs.reshape(n, groups, cg, ho, wo)
                wg = wdata[:, :, i, j].reshape(groups, co // groups, cg)
                out += np.einsum('ngchw,goc->ngohw', xg, wg, optimize=True).reshape(n, co, ho, wo)

    def backward(g):
        gx = np.zeros_like(xd)
        gw = np.zeros_like(wdata)
        if groups > 1:
            gg = g.reshape(n, groups, co // groups, ho, wo)
        for i in range(kh):
            for j in range(kw):
                xs = window(xd, i, j)
                if groups == 1:
                    gw[:, :, i, j] = np.einsum('nohw,nchw->oc', g, xs, optimize=True)
                    window(gx, i, j)[...] += np.einsum('nohw,oc->nchw', g, wdata[:, :, i, j], optimize=True)
                else:
                    xg = xs.reshape(n, groups, cg, ho, wo)
                    wg = wdata[:, :, i, j].reshape(groups, co // groups, cg)
                    gw[:, :, i, j] = np.einsum('ngohw,ngchw->goc', gg, xg, optimize=True).reshape(co, cg)
                    window(gx, i, j)[...] += np.einsum('ngohw,goc->ngchw', gg, wg, optimize=True).reshape(n, c, ho, wo)
        return gx, gw
    return _make(out, (x, w), backward, 'conv2d')


def conv2d(x, weight, bias=None, stride=1, padding=0, padding_mode='reflect', groups=1):
    """2-D cross-correlation.

    Parameters
    ----------
    x : Tensor, shape (n, c_in, h, w)
    weight : Tensor, shape (c_out, c_in / groups, kh, kw)
    bias : Tensor, shape (c_out,), optional
    stride : int
    padding : int or (top, bottom, left, right)
    padding_mode : str
        'reflect' (default) or 'zero'.
    groups : int
        Channel groups; ``groups == c_in`` is a depth-wise convolution.

    Output dims are ``floor((h + pad - kh) / stride) + 1``.
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError('conv2d needs 4-D input and weight, got %s and %s' % (x.shape, weight.shape))
    c_in, c_out = x.shape[1], weight.shape[0]
    if groups < 1 or c_in % groups or c_out % groups or weight.shape[1] * groups != c_in:
        raise ShapeError('conv2d channel mismatch: input %d, weight %s, groups %d' % (c_in, weight.shape, groups))
    if stride < 1:
        raise ShapeError('conv2d stride must be >= 1, got %d' % stride)
    x = pad2d(x, padding, padding_mode)
    out = _conv2d_valid(x, weight, stride, groups)
    if bias is not None:
        out = add(out, reshape(bias, (1, c_out, 1, 1)))
    return out


def pool_matrix(n, p):
    """Rows average the bins ``[floor(i n / p), ceil((i + 1) n / p))``."""
    out = np.zeros((p, n))
    for i in range(p):
        start = (i * n) // p
        end = -((-(i + 1) * n) // p)
        out[i, start:end] = 1.0 / (end - start)
    return out


def adaptive_avg_pool2d(x, size):
    """Average-pool the last two axes to ``size x size``."""
    h, w = x.shape[-2:]
    if size < 1 or size > min(h, w):
        raise ShapeError('Cannot pool %dx%d to %dx%d' % (h, w, size, size))
    return separable(x, pool_matrix(h, size), pool_matrix(w, size))


def separable(x, my, mx):
    """``my @ x @ mx^T`` on the last two axes with constant operators."""
    return matmul(matmul(Tensor(my.astype(x.dtype)), x), Tensor(mx.T.astype(x.dtype)))


def upsample2x(x):
    """Bilinear 2x upsampling of the last two axes (half-pixel centers)."""
    h, w = x.shape[-2:]
    return separable(x, bilinear_matrix(h), bilinear_matrix(w))


def blur_downsample(x):
    """Anti-alias blur then 2x decimation of the last two axes."""
    h, w = x.shape[-2:]
    if h % 2 or w % 2:
        raise ShapeError('blur_downsample needs even dims, got %dx%d' % (h, w))
    return separable(x, decimation_matrix(h), decimation_matrix(w))


def window_partition(x, n):
    """``(N, C, H, W) -> (N n^2, C, H/n, W/n)``, windows ordered (N, row, col)."""
    b, c, h, w = x.shape
    if h % n or w % n:
        raise ShapeError('Spatial dims %dx%d not divisible by window count %d' % (h, w, n))
    out = reshape(x, (b, c, n, h // n, n, w // n))
    out = transpose(out, (0, 2, 4, 1, 3, 5))
    return reshape(out, (b * n * n, c, h // n, w // n))


def window_merge(x, n):
    """Inverse of ``window_partition``."""
    bn, c, h, w = x.shape
    if bn % (n * n):
        raise ShapeError('%d windows is not a multiple of %d' % (bn, n * n))
    b = bn // (n * n)
    out = reshape(x, (b, n, n, c, h, w))
    out = transpose(out, (0, 3, 1, 4, 2, 5))
    return reshape(out, (b, c, n * h, n * w))
