"""
Training and evaluation loops.

Each training step crops a ground-truth light field, synthesizes a fresh dark
input on the fly, runs the network, back-propagates the weighted loss and
takes one Adam step. Step ``i`` of a run draws from its own counter-based
stream ``scene_rng(seed, i)``, so runs are reproducible bit for bit.

"""
##############################################################################
# imports
##############################################################################

import dataclasses
import json
import logging
import os
from typing import Tuple

import numpy as np
import pandas as pd

from . import tensor as T
from .automation import SignalHandler, atomic_output, banner, list_scenes, map_scenes, write_text
from .config import from_dict, load_json, to_dict
from .errors import ConfigError, LFRTError, NumericFault, ShapeError
from .lightfield import central_crop_views, random_crop, read_lightfield, write_lightfield
from .losses import LOSS_TERMS, LossBreakdown, LossWeights, compute_losses, make_targets, psnr, ssim
from .network import LRTNet, ModelConfig, lrt_forward, save_checkpoint
from .noise import SynthesisConfig, scene_rng, synthesize_dark

logger = logging.getLogger(__name__)

LOG_FILENAME = 'train_log.jsonl'


@dataclasses.dataclass
class TrainConfig(object):
    """Training protocol.

    The learning rate at epoch ``e`` (1-based) is
    ``lr * lr_decay ** ((e - 1) // decay_every)``. ``views`` > 0 keeps only
    the central ``views x views`` sub-grid of every scene. ``batch`` light
    fields are accumulated per Adam step.
    """
    epochs: int = 300
    lr: float = 5e-4
    lr_decay: float = 0.8
    decay_every: int = 50
    crop: int = 256
    batch: int = 1
    views: int = 0
    grad_clip: float = 1.0
    checkpoint_every: int = 50
    seed: int = 0
    preset: str = 'default'
    model: dict = dataclasses.field(default_factory=dict)
    synthesis: SynthesisConfig = dataclasses.field(default_factory=SynthesisConfig)
    weights: LossWeights = dataclasses.field(default_factory=LossWeights)
    betas: Tuple[float, float] = (0.9, 0.999)

    def validate(self):
        if self.crop < 64 or self.crop % 64:
            raise ConfigError('crop must be a positive multiple of 64, got %d' % self.crop)
        if self.epochs < 1:
            raise ConfigError('epochs must be >= 1, got %d' % self.epochs)
        if self.batch < 1 or self.decay_every < 1 or self.checkpoint_every < 1:
            raise ConfigError('batch, decay_every and checkpoint_every must be >= 1')
        if self.lr < 0 or self.grad_clip < 0:
            raise ConfigError('lr and grad_clip must be non-negative')
        self.synthesis.validate()
        return self

    def to_dict(self):
        return to_dict(self)

    @classmethod
    def from_dict(cls, data):
        return from_dict(cls, data).validate()

    def model_config(self):
        values = ModelConfig.preset(self.preset).to_dict()
        values['seed'] = self.seed
        values.update(self.model)
        return ModelConfig.from_dict(values)


def lr_at(epoch, cfg):
    """Step-decayed learning rate of 1-based ``epoch``."""
    return cfg.lr * cfg.lr_decay ** ((epoch - 1) // cfg.decay_every)

##############################################################################
# optimizer
##############################################################################

class Adam(object):
    """Adam with bias correction; moments are kept per parameter."""

    def __init__(self, params, lr=5e-4, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr=None):
        lr = self.lr if lr is None else lr
        self.step_count += 1
        correction1 = 1.0 - self.beta1 ** self.step_count
        correction2 = 1.0 - self.beta2 ** self.step_count
        for index, p in enumerate(self.params):
            if p.grad is None:
                continue
            g = p.grad
            self.m[index] = self.beta1 * self.m[index] + (1.0 - self.beta1) * g
            self.v[index] = self.beta2 * self.v[index] + (1.0 - self.beta2) * g * g
            update = (self.m[index] / correction1) / (np.sqrt(self.v[index] / correction2) + self.eps)
            p.data = p.data - lr * update


def clip_grad_norm(params, max_norm):
    """Rescale gradients to global L2 norm ``max_norm``; returns the norm before clipping."""
    grads = [p.grad for p in params if p.grad is not None]
    norm = float(np.sqrt(np.sum([np.sum(g * g) for g in grads]))) if grads else 0.0
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return norm

##############################################################################
# steps
##############################################################################

@dataclasses.dataclass
class TrainingBatch(object):
    l_in: object
    targets: object
    params: object
    beta: float


def make_batch(gt, cfg, rng):
    """Random crop, dark synthesis and loss targets for one ground truth."""
    crop = random_crop(gt, cfg.crop, rng)
    l_in, l_low, params, beta = synthesize_dark(crop, cfg.synthesis, rng)
    return TrainingBatch(l_in, make_targets(crop, l_low), params, beta)


def _mean_breakdown(breakdowns):
    frame = pd.DataFrame([b.to_dict() for b in breakdowns])
    return LossBreakdown(**{key: float(value) for key, value in frame.mean().items()})


def evaluate_batch(model, batch, weights):
    """Loss breakdown of ``batch`` without touching gradients."""
    with T.no_grad(), T.checked():
        outputs = model(T.Tensor(batch.l_in.as_batch()))
        _, breakdown = compute_losses(outputs, batch.targets, weights)
    return breakdown


def optimize_batch(model, batches, cfg, opt, lr):
    """Accumulate the mean loss gradient over ``batches`` and take one Adam step."""
    model.zero_grad()
    breakdowns = []
    scale = 1.0 / len(batches)
    with T.checked():
        for batch in batches:
            outputs = model(T.Tensor(batch.l_in.as_batch()))
            total, breakdown = compute_losses(outputs, batch.targets, cfg.weights)
            if not np.isfinite(breakdown.total):
                raise NumericFault('Non-finite training loss %r' % breakdown.total)
            (total * scale).backward()
            breakdowns.append(breakdown)
    norm = clip_grad_norm(model.parameters(), cfg.grad_clip)
    logger.debug('gradient norm %.4g', norm)
    opt.step(lr)
    return breakdowns[0] if len(breakdowns) == 1 else _mean_breakdown(breakdowns)


def train_step(model, gt_batch, cfg, rng, opt, lr=None):
    """One synthesis + update step; ``gt_batch`` is a LightField or a list of them."""
    if not isinstance(gt_batch, (list, tuple)):
        gt_batch = [gt_batch]
    batches = [make_batch(gt, cfg, rng) for gt in gt_batch]
    return optimize_batch(model, batches, cfg, opt, cfg.lr if lr is None else lr)

##############################################################################
# loops
##############################################################################

@dataclasses.dataclass
class TrainingResult(object):
    model: object
    log: object
    checkpoints: list
    interrupted: bool = False


def load_scenes(path, views=0):
    """Every light field below ``path``, optionally cropped to the central views."""
    scenes = [read_lightfield(scene) for scene in list_scenes(path)]
    if views:
        scenes = [central_crop_views(scene, views) for scene in scenes]
    return scenes


def _epoch_record(epoch, lr, breakdowns):
    frame = pd.DataFrame([b.to_dict() for b in breakdowns])
    record = {'epoch': epoch, 'lr': lr, 'steps': len(frame)}
    record.update({key: float(frame[key].mean()) for key in LOSS_TERMS + ('total',)})
    return record


def run_training(cfg, scenes, output_dir, model=None, signal_handler=None):
    """Train on ``scenes`` and write checkpoints plus a JSON-lines log.

    Parameters
    ----------
    cfg : TrainConfig
    scenes : list of LightField
        Ground truths; one epoch is one pass in list order.
    output_dir : str
        Receives ``ckpt_{epoch}.lrt`` and ``train_log.jsonl``.

    Returns
    -------
    result : TrainingResult
        ``log`` is a DataFrame with one row per epoch.

    """
    cfg.validate()
    if len(scenes) == 0:
        raise LFRTError('Training needs at least one scene')
    if cfg.views:
        scenes = [central_crop_views(scene, cfg.views) if scene.angular_dims != (cfg.views, cfg.views) else scene
                  for scene in scenes]
    model = model or LRTNet(cfg.model_config())
    opt = Adam(model.parameters(), cfg.lr, cfg.betas)
    handler = signal_handler or SignalHandler()
    os.makedirs(output_dir, exist_ok=True)
    log_filename = os.path.join(output_dir, LOG_FILENAME)
    logger.info('Training %d parameters on %d scenes for %d epochs', model.count_parameters(), len(scenes), cfg.epochs)

    records, checkpoints = [], []
    step = 0
    interrupted = False
    try:
        for epoch in range(1, cfg.epochs + 1):
            lr = lr_at(epoch, cfg)
            banner('Epoch %6d / %d : lr %.4g' % (epoch, cfg.epochs, lr))
            breakdowns = []
            for start in range(0, len(scenes), cfg.batch):
                rng = scene_rng(cfg.seed, step)
                breakdown = train_step(model, scenes[start:start + cfg.batch], cfg, rng, opt, lr)
                breakdowns.append(breakdown)
                logger.info('  step %8d : total %.5f (de %.4f rec %.4f ssim %.4f sm %.4f ref %.4f hf %.4f)',
                            step, breakdown.total, breakdown.de, breakdown.rec, breakdown.ssim,
                            breakdown.sm, breakdown.ref, breakdown.hf)
                step += 1
                if handler.terminate:
                    interrupted = True
                    break
            records.append(_epoch_record(epoch, lr, breakdowns))
            write_text(log_filename, ''.join(json.dumps(record, sort_keys=True) + '\n' for record in records))
            if interrupted or epoch % cfg.checkpoint_every == 0 or epoch == cfg.epochs:
                filename = os.path.join(output_dir, 'ckpt_%d.lrt' % epoch)
                save_checkpoint(model, filename, extra={'epoch': epoch, 'step': step, 'train_config': cfg.to_dict()})
                checkpoints.append(filename)
            if interrupted:
                logger.warning('Signal caught; stopped after epoch %d.', epoch)
                break
    finally:
        if signal_handler is None:
            handler.restore()
    return TrainingResult(model, pd.DataFrame(records), checkpoints, interrupted)

##############################################################################
# evaluation
##############################################################################

def _check_unique_names(names, source):
    seen = set()
    for name in names:
        if name in seen:
            raise ConfigError("Pair name '%s' appears more than once in %s" % (name, source))
        seen.add(name)


def load_pairs(filename, synthesis=None, seed=0):
    """Read ``[{name, low, gt}]`` pairs; entries without ``low`` are synthesized.

    Synthesized inputs of entry ``i`` draw from ``scene_rng(seed, i)``.
    """
    entries = load_json(filename)
    if not isinstance(entries, list) or len(entries) == 0:
        raise ConfigError("'%s' must hold a non-empty list of pairs" % filename)
    base = os.path.dirname(os.path.abspath(filename))
    synthesis = synthesis or SynthesisConfig()
    pairs = []
    for index, entry in enumerate(entries):
        if 'gt' not in entry:
            raise ConfigError("Pair %d in '%s' lacks 'gt'" % (index, filename))
        name = entry.get('name', os.path.basename(os.path.normpath(entry['gt'])))
        _check_unique_names([p[0] for p in pairs] + [name], "'%s'" % filename)
        gt = read_lightfield(os.path.join(base, entry['gt']))
        if 'low' in entry:
            low = read_lightfield(os.path.join(base, entry['low']))
        else:
            low = synthesize_dark(gt, synthesis, scene_rng(seed, index))[0]
        pairs.append((name, low, gt))
    return pairs


def restore(model, lf):
    """Final output of ``model`` on ``lf``, clamped to [0, 1]."""
    if isinstance(model, LRTNet):
        return lrt_forward(lf, model).l_out.clamped()
    return model(lf).clamped()


def _evaluate_pair(packet):
    model, name, low, gt, output_dir = packet
    if low.shape != gt.shape:
        raise ShapeError("Pair '%s': input %s and ground truth %s differ" % (name, low.shape, gt.shape))
    restored = restore(model, low)
    view_psnr, _ = psnr(restored, gt)
    view_ssim, _ = ssim(restored, gt)
    if output_dir is not None:
        write_lightfield(restored, os.path.join(output_dir, name), fmt='pfm')
    logger.info("Scene '%s': PSNR %.3f dB, SSIM %.4f", name, view_psnr.mean(), view_ssim.mean())
    return name, view_psnr, view_ssim


def evaluate(model, pairs, report_filename=None, output_dir=None, nprocesses=1):
    """PSNR / SSIM of restored pairs.

    Parameters
    ----------
    model : LRTNet or callable
        A callable maps a LightField to its restoration (it must be picklable
        when ``nprocesses`` > 1).
    pairs : list of (name, low, gt)
    report_filename : str, optional
        JSON report destination (written atomically).
    output_dir : str, optional
        Restored light fields are written to ``output_dir/<name>``.
    nprocesses : int, optional, default=1

    Returns
    -------
    report : dict
        ``scenes`` maps names to per-view and mean metrics; ``psnr`` and
        ``ssim`` are means over every view of every scene.

    """
    if len(pairs) == 0:
        raise LFRTError('Evaluation needs at least one pair')
    _check_unique_names([name for name, _, _ in pairs], 'the evaluation pairs')
    banner('Evaluating %d pairs' % len(pairs))
    results = map_scenes(_evaluate_pair, [(model, name, low, gt, output_dir) for name, low, gt in pairs], nprocesses)

    rows = []
    scenes = {}
    for name, view_psnr, view_ssim in results:
        for (a, b), value in np.ndenumerate(view_psnr):
            rows.append({'scene': name, 'u': a, 'v': b, 'psnr': float(value), 'ssim': float(view_ssim[a, b])})
        scenes[name] = {'psnr_views': view_psnr.tolist(), 'ssim_views': view_ssim.tolist()}

    frame = pd.DataFrame(rows)
    per_scene = frame.groupby('scene', sort=False)[['psnr', 'ssim']].mean()
    for name, values in per_scene.iterrows():
        scenes[name]['psnr'] = float(values['psnr'])
        scenes[name]['ssim'] = float(values['ssim'])
    report = {'scenes': scenes, 'psnr': float(frame['psnr'].mean()), 'ssim': float(frame['ssim'].mean()),
              'n_views': int(len(frame))}
    if report_filename is not None:
        with atomic_output(report_filename) as tmp:
            with open(tmp, 'w') as outfile:
                json.dump(report, outfile, indent=2, sort_keys=True)
    return report
