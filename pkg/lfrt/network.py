"""
The progressive multi-head restoration network.

A U-shaped encoder/decoder over the views of one light field, stored as a
batch ``(u*v, c, h, w)``. Each stage combines a spatial residual block with an
angular transformer block (attention across views); the 1/8 scale adds
multi-scale windowed spatial transformer blocks. Heads produce the
quarter-scale denoised light field, its illumination map, the half and full
scale refinement residuals and a high-frequency map:

    L_de/4  = L_in/4 + R/4
    L_re/4  = L_de/4 / clamp(I/4, eps_I, 1)
    L_re/2  = up(L_re/4) + R/2
    L_re    = up(L_re/2) + R
    L_out   = L_re + H

"""
##############################################################################
# imports
##############################################################################

import dataclasses
import json
import logging
import math
import struct
import time
from typing import Tuple

import numpy as np

from . import tensor as T
from .automation import atomic_output
from .config import from_dict, to_dict
from .errors import ConfigError, FormatError, ShapeError
from .layers import Conv2d, LayerNorm, Linear, Module, to_image, to_tokens
from .lightfield import LightField

logger = logging.getLogger(__name__)

##############################################################################
# globals
##############################################################################

CHECKPOINT_MAGIC = b'LRT1'
# spatial dims must allow three 2x reductions and 8x8 windows at 1/8 scale
SPATIAL_MULTIPLE = 64
INITIAL_ALPHA = 8.0
INITIAL_ILLUMINATION = 0.15


def _logit(p):
    return math.log(p / (1.0 - p))


@dataclasses.dataclass
class ModelConfig(object):
    """Network hyper-parameters.

    ``widths`` are the channel counts at full, 1/2, 1/4 and 1/8 scale.
    ``spatial_groups`` lists ``(n, t)``: n x n windows whose keys and values
    come from a t x t stride-t convolution.
    """
    widths: Tuple[int, ...] = (16, 32, 64, 128)
    in_channels: int = 3
    angular_groups: int = 4
    angular_pool: int = 4
    angular_dim: int = 32
    spatial_blocks: int = 2
    spatial_groups: Tuple[Tuple[int, int], ...] = ((1, 4), (2, 4), (4, 2), (8, 2))
    ffn_ratio: int = 2
    dw_kernel: int = 3
    aram_grid: int = 8
    aram_hidden: int = 32
    alpha_max: float = 40.0
    illum_floor: float = 0.01
    use_aram: bool = True
    use_hf_head: bool = True
    seed: int = 0

    def validate(self):
        if len(self.widths) != 4:
            raise ConfigError('widths needs four entries (full, 1/2, 1/4, 1/8), got %s' % (self.widths,))
        for width in self.widths:
            if width % self.angular_groups:
                raise ConfigError('width %d not divisible by %d angular groups' % (width, self.angular_groups))
        if self.widths[3] % 4:
            raise ConfigError('1/8-scale width %d must be divisible by 4' % self.widths[3])
        if not self.alpha_max > 1:
            raise ConfigError('alpha_max must exceed 1, got %r' % self.alpha_max)
        if not 0 < self.illum_floor < 1:
            raise ConfigError('illum_floor must lie in (0, 1), got %r' % self.illum_floor)
        if max(n for n, _ in self.spatial_groups) > 8:
            raise ConfigError('window counts above 8 do not fit the 1/8-scale map')
        return self

    def to_dict(self):
        return to_dict(self)

    @classmethod
    def from_dict(cls, data):
        return from_dict(cls, data).validate()

    @classmethod
    def preset(cls, name, **overrides):
        if name not in PRESETS:
            raise ConfigError("Unknown model preset '%s' (choose from %s)" % (name, ', '.join(sorted(PRESETS))))
        values = dict(PRESETS[name])
        values.update(overrides)
        return cls(**values).validate()


PRESETS = {
    'default': {},
    'toy': {'widths': (8, 16, 32, 32), 'angular_dim': 16},
}


@dataclasses.dataclass
class RestorationOutputs(object):
    """Every intermediate of one forward pass.

    ``LRTNet.forward`` fills it with Tensors in batch layout; ``lrt_forward``
    with LightFields (``alpha`` as a float).
    """
    l_de_q: object
    illum_q: object
    l_re_q: object
    r_half: object
    l_re_half: object
    r_full: object
    h_map: object
    l_adj: object
    alpha: object
    l_re: object
    l_out: object

##############################################################################
# blocks
##############################################################################

class ResBlock(Module):
    """3x3 conv, GELU, 3x3 conv, residual add."""

    def __init__(self, channels, rng):
        self.conv1 = Conv2d(channels, channels, 3, rng)
        self.conv2 = Conv2d(channels, channels, 3, rng)

    def forward(self, x):
        return x + self.conv2(T.gelu(self.conv1(x)))


class AngularBlock(Module):
    """Attention across the views of one light field.

    Channels are split into ``groups``. Within a group each view is pooled to
    ``pool x pool``, flattened into one token, layer-normalized and projected
    to queries and keys of size ``dim``; the resulting view-by-view attention
    mixes the raw (flattened) group features of all views. Group outputs are
    concatenated, fused per pixel by a linear map and added to the input.

    Parameters
    ----------
    channels : int
    groups : int
        Must divide ``channels``.
    pool : int
        Pooled view size; must not exceed the spatial dims.
    dim : int
        Query/key size.

    """

    def __init__(self, channels, groups, pool, dim, rng):
        if channels % groups:
            raise ShapeError('%d channels not divisible by %d angular groups' % (channels, groups))
        if pool < 1 or dim < 1:
            raise ShapeError('Angular pool and dim must be >= 1, got %d and %d' % (pool, dim))
        self._channels = channels
        self._groups = groups
        self._pool = pool
        token = (channels // groups) * pool * pool
        self.norms = [LayerNorm(token) for _ in range(groups)]
        self.queries = [Linear(token, dim, rng, bias=False) for _ in range(groups)]
        self.keys = [Linear(token, dim, rng, bias=False) for _ in range(groups)]
        self.fuse = Linear(channels, channels, rng)

    def attention(self, index, features):
        """View-by-view attention weights of group ``index``."""
        n_views = features.shape[0]
        tokens = T.reshape(T.adaptive_avg_pool2d(features, self._pool), (n_views, -1))
        tokens = self.norms[index](tokens)
        return T.attention_weights(self.queries[index](tokens), self.keys[index](tokens))

    def forward(self, x):
        if x.ndim != 4 or x.shape[1] != self._channels:
            raise ShapeError('AngularBlock expects (views, %d, h, w), got %s' % (self._channels, x.shape))
        n_views = x.shape[0]
        outputs = []
        for index, features in enumerate(T.split(x, self._groups, axis=1)):
            weights = self.attention(index, features)
            values = T.reshape(features, (n_views, -1))
            outputs.append(T.reshape(T.matmul(weights, values), features.shape))
        fused = to_image(self.fuse(to_tokens(T.concat(outputs, axis=1))))
        return x + fused


class SpatialBlock(Module):
    """Multi-scale windowed self-attention followed by a convolutional FFN.

    Every group ``(n, t)`` partitions the normalized map into ``n x n``
    windows (n = 1 is global). Queries are a per-pixel projection to ``c/2``;
    keys and values come from a ``t x t`` stride-``t`` convolution to ``c/4``
    inside each window, then layer norm, GELU and projections to ``c/2``.
    The concatenated group outputs are fused back to ``c`` channels. The FFN
    is linear, depth-wise convolution, GELU, linear. Both halves are residual.
    """

    def __init__(self, channels, groups, ffn_ratio, dw_kernel, rng):
        if channels % 4:
            raise ShapeError('SpatialBlock channels %d not divisible by 4' % channels)
        half, quarter = channels // 2, channels // 4
        self._channels = channels
        self._groups = tuple(tuple(group) for group in groups)
        self.norm = LayerNorm(channels)
        self.queries = [Linear(channels, half, rng) for _ in self._groups]
        self.reducers = [Conv2d(channels, quarter, t, rng, stride=t, padding=0) for _, t in self._groups]
        self.reducer_norms = [LayerNorm(quarter) for _ in self._groups]
        self.keys = [Linear(quarter, half, rng) for _ in self._groups]
        self.values = [Linear(quarter, half, rng) for _ in self._groups]
        self.fuse = Linear(half * len(self._groups), channels, rng)
        hidden = channels * ffn_ratio
        self.ffn_norm = LayerNorm(channels)
        self.ffn_in = Linear(channels, hidden, rng)
        self.ffn_dw = Conv2d(hidden, hidden, dw_kernel, rng, groups=hidden)
        self.ffn_out = Linear(hidden, channels, rng)

    def reduce(self, index, windows, t):
        """Stride-t key/value reduction; windows smaller than t are nearest-upsampled to t."""
        conv = self.reducers[index]
        hs, ws = windows.shape[-2:]
        if hs >= t and ws >= t:
            return conv(windows)
        if hs != ws or t % hs:
            raise ShapeError('Window %dx%d cannot be reduced with stride %d' % (hs, ws, t))
        factor = t // hs
        co, ci = conv.weight.shape[:2]
        folded = T.sum(T.reshape(conv.weight, (co, ci, hs, factor, hs, factor)), axis=(3, 5))
        return T.conv2d(windows, folded, conv.bias, stride=hs, padding=0)

    def group_attention(self, index, normed):
        """Attention output ``(b, c/2, h, w)`` of group ``index`` on the normalized map."""
        n, t = self._groups[index]
        half, quarter = self._channels // 2, self._channels // 4
        q = T.window_partition(to_image(self.queries[index](to_tokens(normed))), n)
        bn, _, hs, ws = q.shape
        q = T.reshape(to_tokens(q), (bn, hs * ws, half))
        kv = self.reduce(index, T.window_partition(normed, n), t)
        kv = T.reshape(to_tokens(kv), (bn, -1, quarter))
        kv = T.gelu(self.reducer_norms[index](kv))
        out = T.scaled_dot_attention(q, self.keys[index](kv), self.values[index](kv))
        return T.window_merge(to_image(T.reshape(out, (bn, hs, ws, half))), n)

    def forward(self, x):
        if x.ndim != 4 or x.shape[1] != self._channels:
            raise ShapeError('SpatialBlock expects (b, %d, h, w), got %s' % (self._channels, x.shape))
        largest = max(n for n, _ in self._groups)
        h, w = x.shape[-2:]
        if h % largest or w % largest:
            raise ShapeError('SpatialBlock needs spatial dims divisible by %d, got %dx%d' % (largest, h, w))
        normed = to_image(self.norm(to_tokens(x)))
        outputs = [self.group_attention(index, normed) for index in range(len(self._groups))]
        x = x + to_image(self.fuse(to_tokens(T.concat(outputs, axis=1))))
        hidden = to_image(self.ffn_in(self.ffn_norm(to_tokens(x))))
        hidden = T.gelu(self.ffn_dw(hidden))
        return x + to_image(self.ffn_out(to_tokens(hidden)))


class ARAM(Module):
    """Adaptive ratio adjustment: a brightness ratio alpha from the illumination map."""

    def __init__(self, grid, hidden, alpha_max, rng):
        self._grid = grid
        self._alpha_max = alpha_max
        self.hidden = Linear(grid * grid, hidden, rng)
        self.out = Linear(hidden, 1, rng)
        start = min(INITIAL_ALPHA, 0.5 * (1.0 + alpha_max))
        self.out.bias.data[...] = _logit((start - 1.0) / (alpha_max - 1.0))

    def ratio(self, illum_q):
        """Scalar ``alpha`` in ``[1, alpha_max]`` as a (1, 1) Tensor."""
        n_views = illum_q.shape[0]
        pooled = T.adaptive_avg_pool2d(illum_q, self._grid)
        flat = T.mean(T.reshape(pooled, (n_views, self._grid * self._grid)), axis=0, keepdims=True)
        logit = self.out(T.gelu(self.hidden(flat)))
        return 1.0 + (self._alpha_max - 1.0) * T.sigmoid(logit)

    def forward(self, illum_q, l_in):
        alpha = self.ratio(illum_q)
        return alpha, l_in * T.reshape(alpha, (1, 1, 1, 1))


class Stage(Module):

    def __init__(self, channels, config, rng, spatial_blocks=0):
        self.res = ResBlock(channels, rng)
        self.angular = AngularBlock(channels, config.angular_groups, config.angular_pool, config.angular_dim, rng)
        self.spatial = [SpatialBlock(channels, config.spatial_groups, config.ffn_ratio, config.dw_kernel, rng)
                        for _ in range(spatial_blocks)]

    def forward(self, x):
        x = self.angular(self.res(x))
        for block in self.spatial:
            x = block(x)
        return x

##############################################################################
# network
##############################################################################

class LRTNet(Module):
    """The full restoration network; weights are drawn from ``config.seed``."""

    def __init__(self, config=None):
        config = (config or ModelConfig()).validate()
        self._config = config
        rng = np.random.default_rng(config.seed)
        w0, w1, w2, w3 = config.widths
        c = config.in_channels
        self.stem = Conv2d(c, w0, 3, rng)
        self.encoder = [Stage(w, config, rng) for w in (w0, w1, w2)]
        self.down = [Conv2d(a, b, 3, rng, stride=2) for a, b in ((w0, w1), (w1, w2), (w2, w3))]
        self.bottleneck = Stage(w3, config, rng, spatial_blocks=config.spatial_blocks)
        self.up = [Conv2d(a, b, 1, rng) for a, b in ((w3, w2), (w2, w1), (w1, w0))]
        self.decoder = [Stage(w, config, rng) for w in (w2, w1, w0)]
        self.denoise_head = Conv2d(w2, c, 3, rng)
        self.illum_head = Conv2d(w2, 1, 3, rng)
        self.refine_half_head = Conv2d(w1, c, 3, rng)
        self.refine_full_head = Conv2d(w0, c, 3, rng)
        self.hf_head = Conv2d(c + w0, c, 3, rng) if config.use_hf_head else None
        self.aram = ARAM(config.aram_grid, config.aram_hidden, config.alpha_max, rng) if config.use_aram else None
        self.illum_head.bias.data[...] = _logit(INITIAL_ILLUMINATION)

    @property
    def config(self):
        return self._config

    def _expand(self, index, low, skip):
        """Bilinear up + 1x1 conv (applied before upsampling; the two commute) + skip."""
        return self.decoder[index](T.upsample2x(self.up[index](low)) + skip)

    def forward(self, x):
        """Restore one light field given as a Tensor ``(u*v, c, h, w)``.

        Spatial dims must be multiples of 64.
        """
        cfg = self._config
        if x.ndim != 4 or x.shape[1] != cfg.in_channels:
            raise ShapeError('LRTNet expects (views, %d, h, w), got %s' % (cfg.in_channels, x.shape))
        h, w = x.shape[-2:]
        if h % SPATIAL_MULTIPLE or w % SPATIAL_MULTIPLE:
            raise ShapeError('Spatial dims %dx%d are not multiples of %d' % (h, w, SPATIAL_MULTIPLE))

        e0 = self.encoder[0](self.stem(x))
        e1 = self.encoder[1](self.down[0](e0))
        e2 = self.encoder[2](self.down[1](e1))
        bottom = self.bottleneck(self.down[2](e2))

        d2 = self._expand(0, bottom, e2)
        r_q = T.tanh(self.denoise_head(d2))
        illum_q = T.clip(T.sigmoid(self.illum_head(d2)), cfg.illum_floor, 1.0)
        d1 = self._expand(1, d2, e1)
        r_half = T.tanh(self.refine_half_head(d1))
        d0 = self._expand(2, d1, e0)
        r_full = T.tanh(self.refine_full_head(d0))

        l_in_q = T.blur_downsample(T.blur_downsample(x))
        l_de_q = l_in_q + r_q
        l_re_q = l_de_q / illum_q
        l_re_half = T.upsample2x(l_re_q) + r_half
        l_re = T.upsample2x(l_re_half) + r_full

        if self.aram is not None:
            alpha, l_adj = self.aram(illum_q, x)
        else:
            alpha, l_adj = T.Tensor(np.ones((1, 1), dtype=x.dtype)), x
        if self.hf_head is not None:
            h_map = T.tanh(self.hf_head(T.concat([l_adj, d0], axis=1)))
        else:
            h_map = T.Tensor(np.zeros(x.shape, dtype=x.dtype))
        l_out = l_re + h_map
        return RestorationOutputs(l_de_q=l_de_q, illum_q=illum_q, l_re_q=l_re_q, r_half=r_half,
                                  l_re_half=l_re_half, r_full=r_full, h_map=h_map, l_adj=l_adj,
                                  alpha=alpha, l_re=l_re, l_out=l_out)


def build_model(preset='default', **overrides):
    return LRTNet(ModelConfig.preset(preset, **overrides))


def count_parameters(model):
    return model.count_parameters()


def spatial_resblock_forward(features, block):
    """Apply a ResBlock to ``(c, h, w)`` or ``(b, c, h, w)`` features."""
    if features.ndim == 3:
        return T.reshape(block(T.reshape(features, (1,) + features.shape)), features.shape)
    return block(features)


def angular_block_forward(features, block):
    """Apply an AngularBlock to ``(u, v, c, h, w)`` (or already flattened) features."""
    if features.ndim == 5:
        u, v = features.shape[:2]
        flat = T.reshape(features, (u * v,) + features.shape[2:])
        return T.reshape(block(flat), features.shape)
    return block(features)


def spatial_block_forward(features, block):
    """Apply a SpatialBlock to ``(c, h, w)`` or ``(b, c, h, w)`` features."""
    if features.ndim == 3:
        return T.reshape(block(T.reshape(features, (1,) + features.shape)), features.shape)
    return block(features)


def aram_forward(illum_q, l_in, block):
    """``(alpha, l_adj)`` for a batch-layout illumination map and input."""
    return block(illum_q, l_in)

##############################################################################
# inference
##############################################################################

def _padded(size):
    return -(-size // SPATIAL_MULTIPLE) * SPATIAL_MULTIPLE


def lrt_forward(l_in, model):
    """Restore a LightField; returns RestorationOutputs of LightFields.

    Spatial dims that are not multiples of 64 are reflect-padded at the
    bottom/right and every output is cropped back (1/2 and 1/4 scale outputs
    to ``ceil(h/2)``, ``ceil(h/4)``).

    Raises
    ------
    NumericFault
        If any intermediate is non-finite.

    """
    u, v = l_in.angular_dims
    h, w = l_in.spatial_dims
    batch = l_in.as_batch()
    ph, pw = _padded(h) - h, _padded(w) - w
    if ph or pw:
        logger.debug('Reflect-padding %dx%d input by (%d, %d)', h, w, ph, pw)
        batch = np.pad(batch, ((0, 0), (0, 0), (0, ph), (0, pw)), mode='reflect')
    start = time.perf_counter()
    with T.no_grad(), T.checked():
        out = model(T.Tensor(batch))
    logger.info('Forward pass over %d views of %dx%d took %.2f s', u * v, h, w, time.perf_counter() - start)

    def crop(tensor, scale, color_space=l_in.color_space):
        data = tensor.data[..., :-(-h // scale), :-(-w // scale)]
        return LightField.from_batch(np.ascontiguousarray(data), (u, v), color_space, l_in.white_level)

    return RestorationOutputs(
        l_de_q=crop(out.l_de_q, 4), illum_q=crop(out.illum_q, 4, 'Y'), l_re_q=crop(out.l_re_q, 4),
        r_half=crop(out.r_half, 2), l_re_half=crop(out.l_re_half, 2), r_full=crop(out.r_full, 1),
        h_map=crop(out.h_map, 1), l_adj=crop(out.l_adj, 1), alpha=float(out.alpha.data.reshape(())),
        l_re=crop(out.l_re, 1), l_out=crop(out.l_out, 1))

##############################################################################
# checkpoints
##############################################################################

def save_checkpoint(model, filename, extra=None):
    """Write ``LRT1``, a uint32 LE header length, the JSON header, float32 LE blobs.

    The header holds the model config, the ``(name, shape)`` table in
    declaration order and an optional ``extra`` dict (e.g. the epoch).
    """
    named = list(model.named_parameters())
    header = {
        'config': model.config.to_dict(),
        'tensors': [{'name': name, 'shape': list(parameter.shape)} for name, parameter in named],
        'extra': extra or {},
    }
    encoded = json.dumps(header, sort_keys=True).encode('utf-8')
    with atomic_output(filename) as tmp:
        with open(tmp, 'wb') as outfile:
            outfile.write(CHECKPOINT_MAGIC)
            outfile.write(struct.pack('<I', len(encoded)))
            outfile.write(encoded)
            for _, parameter in named:
                outfile.write(parameter.data.astype('<f4').tobytes())
    logger.info('Wrote checkpoint %s (%d parameters)', filename, model.count_parameters())


def read_checkpoint(filename):
    """Return ``(header, state)`` of a checkpoint file."""
    with open(filename, 'rb') as infile:
        payload = infile.read()
    if payload[:4] != CHECKPOINT_MAGIC:
        raise FormatError("'%s' is not an LRT1 checkpoint" % filename)
    if len(payload) < 8:
        raise FormatError("'%s' is truncated" % filename)
    (length,) = struct.unpack('<I', payload[4:8])
    try:
        header = json.loads(payload[8:8 + length].decode('utf-8'))
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise FormatError("'%s' has a corrupt header" % filename)
    offset = 8 + length
    state = {}
    for entry in header['tensors']:
        count = int(np.prod(entry['shape']))
        end = offset + 4 * count
        if end > len(payload):
            raise FormatError("'%s' is truncated at tensor '%s'" % (filename, entry['name']))
        values = np.frombuffer(payload[offset:end], dtype='<f4').astype(np.float64)
        state[entry['name']] = values.reshape(entry['shape'])
        offset = end
    if offset != len(payload):
        raise FormatError("'%s' has %d trailing bytes" % (filename, len(payload) - offset))
    return header, state


def load_checkpoint(filename):
    """Rebuild the model stored in ``filename``; returns ``(model, extra)``."""
    header, state = read_checkpoint(filename)
    model = LRTNet(ModelConfig.from_dict(header['config']))
    model.load_state_dict(state)
    logger.info('Loaded checkpoint %s', filename)
    return model, header.get('extra', {})
