"""
Finite-difference verification of reverse-mode gradients.

"""
import collections
import dataclasses
import logging

import numpy as np

from . import tensor as T
from .errors import ConfigError, NumericFault, RangeError
from .network import ARAM, AngularBlock, LRTNet, ModelConfig, ResBlock, SpatialBlock

logger = logging.getLogger(__name__)


@dataclasses.dataclass
class GradCheckReport(object):
    max_rel_error: float
    passed: bool
    n_checked: int
    tol: float
    worst: tuple = None

    def __str__(self):
        status = 'PASS' if self.passed else 'FAIL'
        return '%s max_rel_error=%.3e tol=%.1e coords=%d' % (status, self.max_rel_error, self.tol, self.n_checked)


def _scalar(value, projection):
    if value.size == 1:
        out = float(value.data.reshape(()))
    else:
        out = float(np.sum(value.data * projection))
    if not np.isfinite(out):
        raise NumericFault('Function under gradient check returned a non-finite value')
    return out


def grad_check(fn, inputs, eps=1e-6, tol=1e-6, n_coords=100, seed=0):
    """Compare reverse-mode gradients of ``fn`` against central differences.

    Non-scalar outputs are contracted with a fixed random projection. The
    checked coordinates are a uniform random subset (without replacement) of
    all input entries, ``min(n_coords, total)`` of them, drawn with
    ``numpy.random.default_rng(seed)``. The relative error of one coordinate
    is ``|a - n| / max(|a|, |n|, 1)``.

    Parameters
    ----------
    fn : callable
        ``fn(*tensors) -> Tensor``.
    inputs : list of Tensor or np.ndarray
        Arrays are wrapped as float64 leaves; Tensors are perturbed in place
        and restored.
    eps : float, optional, default=1e-6
    tol : float, optional, default=1e-6

    Returns
    -------
    report : GradCheckReport

    """
    if not eps > 0:
        raise RangeError('eps must be positive, got %r' % eps)
    rng = np.random.default_rng(seed)
    leaves = []
    for item in inputs:
        if isinstance(item, T.Tensor):
            item.data = np.ascontiguousarray(item.data)
            item.requires_grad = True
            item.zero_grad()
            leaves.append(item)
        else:
            leaves.append(T.Tensor(np.array(item, dtype=np.float64), requires_grad=True))

    out = fn(*leaves)
    projection = None if out.size == 1 else rng.standard_normal(out.shape)
    _scalar(out, projection)
    loss = out if projection is None else T.sum(T.mul(out, T.Tensor(projection)))
    loss.backward()
    analytic = [leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data) for leaf in leaves]

    sizes = [leaf.size for leaf in leaves]
    total = int(np.sum(sizes))
    chosen = np.sort(rng.choice(total, size=min(n_coords, total), replace=False))
    offsets = np.cumsum([0] + sizes)

    worst, max_err = None, 0.0
    with T.no_grad():
        for flat in chosen:
            which = int(np.searchsorted(offsets, flat, side='right') - 1)
            local = int(flat - offsets[which])
            view = leaves[which].data.reshape(-1)
            original = view[local]
            view[local] = original + eps
            plus = _scalar(fn(*leaves), projection)
            view[local] = original - eps
            minus = _scalar(fn(*leaves), projection)
            view[local] = original
            numeric = (plus - minus) / (2.0 * eps)
            a = float(analytic[which].reshape(-1)[local])
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1.0)
            if worst is None or err > max_err:
                max_err, worst = err, (which, local)
    report = GradCheckReport(max_err, max_err <= tol, len(chosen), tol, worst)
    logger.debug('grad_check: %s', report)
    return report

##############################################################################
# suites
##############################################################################

def _suite_inputs(rng, *shapes):
    return [T.Tensor(rng.standard_normal(shape), requires_grad=True) for shape in shapes]


def gradient_suites(seed=0):
    """Named ``(fn, inputs)`` cases covering the ops and blocks of the network.

    Primitive and block sizes are tiny; the heads run on a 16x16 decoder and
    the full toy model on one 64x64 view.
    """
    rng = np.random.default_rng(seed)
    suites = collections.OrderedDict()
    x, w, b = _suite_inputs(rng, (2, 4, 6, 6), (6, 2, 3, 3), (6,))
    suites['conv2d'] = (lambda x, w, b: T.conv2d(x, w, b, stride=1, padding=1, groups=2), [x, w, b])
    x, w = _suite_inputs(rng, (1, 2, 8, 8), (3, 2, 3, 3))
    suites['conv2d_stride2'] = (lambda x, w: T.conv2d(x, w, stride=2, padding=1), [x, w])
    suites['gelu'] = (T.gelu, _suite_inputs(rng, (3, 5)))
    suites['softmax'] = (lambda a: T.softmax(a, axis=-1), _suite_inputs(rng, (4, 6)))
    x, g, beta = _suite_inputs(rng, (5, 8), (8,), (8,))
    suites['layer_norm'] = (T.layer_norm, [x, g, beta])
    suites['attention'] = (T.scaled_dot_attention, _suite_inputs(rng, (2, 5, 4), (2, 3, 4), (2, 3, 6)))
    suites['upsample2x'] = (T.upsample2x, _suite_inputs(rng, (1, 2, 4, 5)))
    suites['blur_downsample'] = (T.blur_downsample, _suite_inputs(rng, (1, 2, 8, 6)))
    suites['adaptive_avg_pool2d'] = (lambda a: T.adaptive_avg_pool2d(a, 3), _suite_inputs(rng, (2, 1, 7, 5)))
    suites['window_partition'] = (lambda a: T.window_merge(T.window_partition(a, 2) * 2.0, 2),
                                  _suite_inputs(rng, (1, 2, 4, 4)))
    suites['division'] = (lambda a, d: a / (T.sigmoid(d) + 0.1), _suite_inputs(rng, (3, 4), (3, 4)))

    block_rng = np.random.default_rng(seed + 1)
    res = ResBlock(4, block_rng)
    suites['resblock'] = (res, _suite_inputs(rng, (2, 4, 4, 4)))
    angular = AngularBlock(4, 2, 2, 4, block_rng)
    suites['angular_block'] = (angular, _suite_inputs(rng, (4, 4, 4, 4)))
    spatial = SpatialBlock(8, ((1, 2), (2, 2)), 2, 3, block_rng)
    suites['spatial_block'] = (spatial, _suite_inputs(rng, (1, 8, 4, 4)))
    aram = ARAM(2, 4, 40.0, block_rng)
    illum, l_in = _suite_inputs(rng, (4, 1, 4, 4), (4, 3, 4, 4))
    suites['aram'] = (lambda i, x: aram(T.sigmoid(i), x)[1], [illum, l_in])

    model = LRTNet(ModelConfig.preset('toy', seed=seed))
    features = _suite_inputs(rng, *_head_shapes(model.config, 16))
    head_params = [p for head in (model.denoise_head, model.illum_head, model.refine_half_head,
                                  model.refine_full_head, model.hf_head) for p in head.parameters()]
    suites['heads'] = (_heads_function(model), features + head_params)
    x = T.Tensor(rng.uniform(0.0, 0.2, (1, model.config.in_channels, 64, 64)))
    suites['model'] = (lambda *params: model(x).l_out, model.parameters())
    return suites


def _head_shapes(config, size):
    """Decoder features at 1/4, 1/2 and full scale plus the adjusted input."""
    w0, w1, w2, _ = config.widths
    return ((1, w2, size // 4, size // 4), (1, w1, size // 2, size // 2), (1, w0, size, size),
            (1, config.in_channels, size, size))


def _heads_function(model):
    """The five Retinex heads, flattened and concatenated into one ``(1, n)`` output."""
    cfg = model.config

    def fn(d2, d1, d0, l_adj, *params):
        outputs = (T.tanh(model.denoise_head(d2)), T.clip(T.sigmoid(model.illum_head(d2)), cfg.illum_floor, 1.0),
                   T.tanh(model.refine_half_head(d1)), T.tanh(model.refine_full_head(d0)),
                   T.tanh(model.hf_head(T.concat([l_adj, d0], axis=1))))
        return T.concat([T.reshape(out, (1, out.size)) for out in outputs], axis=1)
    return fn


def run_suites(names=None, eps=1e-6, tol=1e-6, n_coords=100, seed=0):
    """Run the named gradient suites (all when ``names`` is empty).

    Returns
    -------
    results : list of (name, GradCheckReport)

    """
    suites = gradient_suites(seed)
    names = list(names or suites)
    unknown = [name for name in names if name not in suites]
    if unknown:
        raise ConfigError("Unknown gradient suite '%s' (choose from %s)" % (unknown[0], ', '.join(suites)))
    results = []
    for name in names:
        fn, inputs = suites[name]
        report = grad_check(fn, inputs, eps=eps, tol=tol, n_coords=n_coords, seed=seed)
        logger.info('%-20s %s', name, report)
        results.append((name, report))
    return results
