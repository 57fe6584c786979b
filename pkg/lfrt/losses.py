"""
Training losses and the PSNR / SSIM metrics.

Loss inputs are Tensors in batch layout ``(views, c, h, w)``; targets are
plain arrays in the same layout. Every reduction is a mean over all elements.

"""
##############################################################################
# imports
##############################################################################

import dataclasses

import numpy as np

from . import tensor as T
from .config import from_dict, to_dict
from .errors import ConfigError, ShapeError
from .lightfield import LightField, downsample_half, gaussian_kernel, highfreq_target, luma

##############################################################################
# globals
##############################################################################

NORMALIZE_EPS = 1e-8
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
PSNR_CAP = 100.0
PSNR_MSE_FLOOR = 1e-10
LOSS_TERMS = ('de', 'rec', 'ssim', 'sm', 'ref', 'hf')


@dataclasses.dataclass
class LossWeights(object):
    de: float = 10.0
    rec: float = 5.0
    ssim: float = 1.0
    sm: float = 0.1
    ref: float = 1.0
    hf: float = 1.0
    eta: float = 10.0

    def __post_init__(self):
        for name in LOSS_TERMS + ('eta',):
            if getattr(self, name) < 0:
                raise ConfigError('Loss weight %s must be non-negative, got %r' % (name, getattr(self, name)))

    def to_dict(self):
        return to_dict(self)

    @classmethod
    def from_dict(cls, data):
        return from_dict(cls, data)


@dataclasses.dataclass
class LossBreakdown(object):
    de: float
    sm: float
    ref: float
    hf: float
    rec: float
    ssim: float
    total: float

    def to_dict(self):
        return to_dict(self)


@dataclasses.dataclass
class LossTargets(object):
    """Everything the losses compare against, batch layout."""
    gt: np.ndarray
    gt_half: np.ndarray
    gt_q: np.ndarray
    l_low_q: np.ndarray
    f_gt: np.ndarray
    y_low_q: np.ndarray


def make_targets(gt, l_low):
    """Build the ground-truth pyramid, high-frequency and luma targets.

    Parameters
    ----------
    gt, l_low : LightField
        Clean and darkened (noise-free) light fields.

    """
    gt_half = downsample_half(gt)
    gt_q = downsample_half(gt_half)
    l_low_q = downsample_half(downsample_half(l_low))
    y_low_q = luma(l_low_q.as_batch(), axis=1)[:, np.newaxis]
    return LossTargets(gt=gt.as_batch(), gt_half=gt_half.as_batch(), gt_q=gt_q.as_batch(),
                       l_low_q=l_low_q.as_batch(), f_gt=highfreq_target(gt).as_batch(), y_low_q=y_low_q)

##############################################################################
# helpers
##############################################################################

def _check_same(a, b, what):
    if tuple(a.shape) != tuple(b.shape):
        raise ShapeError('%s: shapes %s and %s differ' % (what, tuple(a.shape), tuple(b.shape)))


def l1(prediction, target):
    target = T.as_tensor(target, prediction)
    _check_same(prediction, target, 'l1')
    return T.mean(T.absolute(prediction - target))


def normalize_map(x):
    """Min-max normalize each map over its last two axes.

    Constant maps become zeros (the range is floored at 1e-8). Accepts a
    Tensor (differentiable) or an array.
    """
    as_array = not isinstance(x, T.Tensor)
    t = T.Tensor(np.asarray(x, dtype=np.float64)) if as_array else x
    lo = T.amin(t, axis=(-2, -1), keepdims=True)
    hi = T.amax(t, axis=(-2, -1), keepdims=True)
    out = (t - lo) / T.clip(hi - lo, NORMALIZE_EPS, np.inf)
    return out.data if as_array else out


def forward_differences(x):
    """``(dy, dx)`` of the last two axes; the sample past the end is mirrored."""
    padded = T.pad2d(x, (0, 1, 0, 1), 'reflect')
    h, w = x.shape[-2:]
    dy = padded[..., 1:h + 1, :w] - x
    dx = padded[..., :h, 1:w + 1] - x
    return dy, dx

##############################################################################
# losses
##############################################################################

def illumination_losses(illum_q, gt_q, y_low_q, eta=10.0):
    """Structure-aware smoothness and illumination reference losses.

    ``l_sm`` weights ``|grad I|`` by ``exp(-eta G)`` where ``G`` is the
    channel-maximum of ``|grad L_gt|``, averaged over pixels and both
    directions. ``l_ref = mean |f_nor(I) - f_nor(Y)|``.

    Parameters
    ----------
    illum_q : Tensor, shape (views, 1, h, w)
    gt_q : array, shape (views, c, h, w)
    y_low_q : array, shape (views, 1, h, w)

    """
    gt_q = np.asarray(gt_q)
    if illum_q.shape[0] != gt_q.shape[0] or illum_q.shape[-2:] != gt_q.shape[-2:]:
        raise ShapeError('Illumination %s does not match ground truth %s' % (illum_q.shape, gt_q.shape))
    y_low_q = np.asarray(y_low_q)
    if y_low_q.ndim == 3:
        y_low_q = y_low_q[:, np.newaxis]
    _check_same(illum_q, y_low_q, 'illumination reference')

    with T.no_grad():
        gdy, gdx = forward_differences(T.Tensor(gt_q))
    weight_y = np.exp(-eta * np.abs(gdy.data).max(axis=1, keepdims=True))
    weight_x = np.exp(-eta * np.abs(gdx.data).max(axis=1, keepdims=True))
    dy, dx = forward_differences(illum_q)
    l_sm = 0.5 * (T.mean(T.absolute(dy) * weight_y) + T.mean(T.absolute(dx) * weight_x))
    l_ref = T.mean(T.absolute(normalize_map(illum_q) - T.Tensor(normalize_map(y_low_q))))
    return l_sm, l_ref


def restoration_losses(outputs, targets):
    """``(l_de, l_rec, l_hf, l_ssim)`` of a forward pass.

    ``l_rec`` sums the L1 errors of the 1/4, 1/2 and full scale restored
    light fields and of the final output.
    """
    l_de = l1(outputs.l_de_q, targets.l_low_q)
    l_rec = (l1(outputs.l_re_q, targets.gt_q) + l1(outputs.l_re_half, targets.gt_half)
             + l1(outputs.l_re, targets.gt) + l1(outputs.l_out, targets.gt))
    l_hf = l1(outputs.h_map, targets.f_gt)
    l_ssim = 1.0 - T.mean(ssim_map(outputs.l_out, T.Tensor(targets.gt)))
    return l_de, l_rec, l_hf, l_ssim


def weighted_total(parts, weights):
    """Weighted sum of loss parts (Tensors or floats) keyed by term name."""
    total = 0.0
    for name in LOSS_TERMS:
        total = parts[name] * getattr(weights, name) + total
    return total


def total_loss(parts, weights):
    """LossBreakdown of ``parts`` (Tensors or floats) under ``weights``."""
    values = {name: float(np.asarray(parts[name].data if isinstance(parts[name], T.Tensor) else parts[name]))
              for name in LOSS_TERMS}
    return LossBreakdown(total=float(weighted_total(values, weights)), **values)


def compute_losses(outputs, targets, weights):
    """Differentiable total loss and its breakdown."""
    l_sm, l_ref = illumination_losses(outputs.illum_q, targets.gt_q, targets.y_low_q, weights.eta)
    l_de, l_rec, l_hf, l_ssim = restoration_losses(outputs, targets)
    parts = {'de': l_de, 'rec': l_rec, 'ssim': l_ssim, 'sm': l_sm, 'ref': l_ref, 'hf': l_hf}
    return weighted_total(parts, weights), total_loss(parts, weights)

##############################################################################
# metrics
##############################################################################

def _ssim_filters(channels, dtype):
    taps = gaussian_kernel(SSIM_WINDOW, SSIM_SIGMA).astype(dtype)
    vertical = np.tile(taps.reshape(1, 1, -1, 1), (channels, 1, 1, 1))
    horizontal = np.tile(taps.reshape(1, 1, 1, -1), (channels, 1, 1, 1))
    return T.Tensor(vertical), T.Tensor(horizontal)


def ssim_map(a, b):
    """Per-pixel SSIM of two ``(n, c, h, w)`` Tensors (valid 11x11 Gaussian window)."""
    _check_same(a, b, 'ssim')
    n, c, h, w = a.shape
    if h < SSIM_WINDOW or w < SSIM_WINDOW:
        raise ShapeError('SSIM needs images of at least %dx%d, got %dx%d' % (SSIM_WINDOW, SSIM_WINDOW, h, w))
    vertical, horizontal = _ssim_filters(c, a.dtype)

    def blur(x):
        x = T.conv2d(x, vertical, padding=0, groups=c)
        return T.conv2d(x, horizontal, padding=0, groups=c)

    c1 = SSIM_K1 ** 2
    c2 = SSIM_K2 ** 2
    mu_a, mu_b = blur(a), blur(b)
    var_a = blur(a * a) - mu_a * mu_a
    var_b = blur(b * b) - mu_b * mu_b
    cov = blur(a * b) - mu_a * mu_b
    numerator = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)
    denominator = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return numerator / denominator


def _views(x):
    if isinstance(x, LightField):
        return x.views
    return np.asarray(x, dtype=np.float64)


def ssim(a, b):
    """SSIM per view ``(u, v)`` and its mean for two light fields."""
    va, vb = _views(a), _views(b)
    _check_same(va, vb, 'ssim')
    u, v = va.shape[:2]
    with T.no_grad():
        values = ssim_map(T.Tensor(va.reshape((u * v,) + va.shape[2:])),
                          T.Tensor(vb.reshape((u * v,) + vb.shape[2:]))).data
    per_view = values.mean(axis=(1, 2, 3)).reshape(u, v)
    return per_view, float(per_view.mean())


def psnr(a, b, peak=1.0):
    """PSNR (dB) per view ``(u, v)`` and the mean of the per-view values.

    Views whose MSE is below 1e-10 score 100 dB.
    """
    va, vb = _views(a), _views(b)
    _check_same(va, vb, 'psnr')
    mse = ((va - vb) ** 2).mean(axis=(2, 3, 4))
    with np.errstate(divide='ignore'):
        per_view = np.where(mse < PSNR_MSE_FLOOR, PSNR_CAP, 10.0 * np.log10(peak * peak / np.maximum(mse, PSNR_MSE_FLOOR)))
    return per_view, float(per_view.mean())
