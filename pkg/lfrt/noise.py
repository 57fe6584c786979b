"""
Camera noise calibration and dark light-field synthesis.

The sensor model (all terms on the plenoptic raw grid):

    L = k * Poisson(signal / k + dark_rate) + N(0, sigma_read) + row + U(-q/2, q/2)

with ``row`` one N(0, sigma_row) offset per sensor row. Calibration works in
DN; synthesis works in normalized units (DN / white_level). ``scaled`` and
``rescaled`` convert between the two.

"""
##############################################################################
# imports
##############################################################################

import dataclasses
import logging
import math
import os
from typing import List, Tuple

import cv2
import numpy as np
import pandas as pd

from .config import from_dict, load_json, to_dict
from .errors import CalibrationError, ConfigError, RangeError, ShapeError
from .lightfield import PlenopticImage, read_pfm, to_plenoptic, to_sai

logger = logging.getLogger(__name__)

##############################################################################
# globals
##############################################################################

GRAY_CHART = 'gray_chart'
DARK_FRAME = 'dark_frame'
NOISE_MODES = ('physics', 'shot_read')
# exact Poisson draws up to this rate, N(lam, lam) above
POISSON_EXACT_LIMIT = 1000.0


def scene_rng(seed, index):
    """Independent counter-based stream for scene ``index`` of a run seeded with ``seed``."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), int(index)])))

##############################################################################
# parameter types
##############################################################################

@dataclasses.dataclass
class NoiseParams(object):
    """Calibrated sensor model of one ISO setting.

    Parameters
    ----------
    k : float
        System gain (units per electron).
    sigma_read, sigma_row : float
        Gaussian read noise and per-row offset standard deviations.
    dark_rate : float
        Expected dark electrons per exposure.
    q : float
        Quantization step.
    iso : int

    """
    k: float
    sigma_read: float = 0.0
    sigma_row: float = 0.0
    dark_rate: float = 1.0
    q: float = 1.0 / 1023
    iso: int = 0

    def __post_init__(self):
        if not (np.isfinite(self.k) and self.k > 0):
            raise RangeError('Gain k must be positive and finite, got %r' % self.k)
        for name in ('sigma_read', 'sigma_row', 'dark_rate'):
            value = getattr(self, name)
            if not (np.isfinite(value) and value >= 0):
                raise RangeError('%s must be finite and non-negative, got %r' % (name, value))
        if not (np.isfinite(self.q) and self.q > 0):
            raise RangeError('Quantization step q must be positive, got %r' % self.q)

    def scaled(self, factor):
        """Same sensor in units multiplied by ``factor`` (electrons unchanged)."""
        return dataclasses.replace(self, k=self.k * factor, sigma_read=self.sigma_read * factor,
                                   sigma_row=self.sigma_row * factor, q=self.q * factor)

    def to_dict(self):
        return to_dict(self)

    @classmethod
    def from_dict(cls, data):
        return from_dict(cls, data)


@dataclasses.dataclass
class LogLinearModel(object):
    """``log sigma = slope * log k + intercept`` with a +-residual_std sampling band."""
    slope: float
    intercept: float
    residual_std: float = 0.0

    def __post_init__(self):
        if not (np.isfinite(self.residual_std) and self.residual_std >= 0):
            raise RangeError('residual_std must be finite and non-negative, got %r' % self.residual_std)

    def predict_log(self, k):
        return self.slope * np.log(k) + self.intercept

    def band(self, k):
        """``(low, high)`` bounds of log sigma at gain ``k``."""
        center = self.predict_log(k)
        return center - self.residual_std, center + self.residual_std

    def rescaled(self, white_level):
        """Convert a model fitted in DN to normalized units."""
        return LogLinearModel(self.slope, self.intercept + (self.slope - 1.0) * math.log(white_level), self.residual_std)


def _default_read_model():
    return LogLinearModel(0.8, -0.283, 0.1)


def _default_row_model():
    return LogLinearModel(0.8, -1.487, 0.1)


@dataclasses.dataclass
class SynthesisConfig(object):
    """Sampling ranges of the dark-image synthesis (normalized units)."""
    beta_range: Tuple[float, float] = (0.05, 0.2)
    k_range: Tuple[float, float] = (5e-4, 4e-3)
    read_model: LogLinearModel = dataclasses.field(default_factory=_default_read_model)
    row_model: LogLinearModel = dataclasses.field(default_factory=_default_row_model)
    dark_rate: float = 1.0
    q: float = 1.0 / 1023
    seed: int = 0
    noise_mode: str = 'physics'

    def validate(self):
        lo, hi = self.beta_range
        if not 0 < lo <= hi <= 1:
            raise ConfigError('beta_range must satisfy 0 < min <= max <= 1, got %s' % (self.beta_range,))
        lo, hi = self.k_range
        if not 0 < lo <= hi:
            raise ConfigError('k_range must satisfy 0 < min <= max, got %s' % (self.k_range,))
        if self.noise_mode not in NOISE_MODES:
            raise ConfigError("Unknown noise_mode '%s' (choose from %s)" % (self.noise_mode, ', '.join(NOISE_MODES)))
        if self.dark_rate < 0 or not self.q > 0:
            raise ConfigError('dark_rate must be >= 0 and q > 0')
        return self

    def to_dict(self):
        return to_dict(self)

    @classmethod
    def from_dict(cls, data):
        return from_dict(cls, data).validate()

##############################################################################
# calibration sets
##############################################################################

@dataclasses.dataclass
class CalibrationSet(object):
    """Frames of one ISO/exposure setting.

    ``frames`` are PlenopticImages (normalized by their white level) or raw
    2-D DN arrays. ``regions`` are ``(x, y, w, h)`` rectangles of uniform
    gray patches (gray-chart sets only).
    """
    frames: List[object]
    iso: int
    exposure: float
    kind: str
    regions: List[Tuple[int, int, int, int]] = dataclasses.field(default_factory=list)

    def __post_init__(self):
        if self.kind not in (GRAY_CHART, DARK_FRAME):
            raise CalibrationError("Unknown calibration kind '%s'" % self.kind)
        if len(self.frames) == 0:
            raise CalibrationError('Calibration set holds no frames')
        shapes = {self._dn(frame).shape for frame in self.frames}
        if len(shapes) != 1:
            raise ShapeError('Calibration frames differ in shape: %s' % sorted(shapes))
        if self._dn(self.frames[0]).ndim != 2:
            raise ShapeError('Calibration frames must be single-channel raw images')
        if self.kind == GRAY_CHART and len(self.regions) < 2:
            raise CalibrationError('Gray-chart sets need at least 2 regions, got %d' % len(self.regions))

    @staticmethod
    def _dn(frame):
        if isinstance(frame, PlenopticImage):
            return frame.pixels * frame.white_level
        return np.asarray(frame, dtype=np.float64)

    def stack(self):
        """Frames as one DN array ``(n, rows, cols)``."""
        return np.stack([self._dn(frame) for frame in self.frames]).astype(np.float64)

    @classmethod
    def from_manifest(cls, filename):
        """Load ``{kind, iso, exposure_s, frames, regions, white_level}``.

        Frame paths are relative to the manifest; ``.pfm`` frames hold
        normalized values, ``.npy`` frames DN and images 16-bit DN.
        """
        manifest = load_json(filename)
        for key in ('kind', 'iso', 'exposure_s', 'frames'):
            if key not in manifest:
                raise ConfigError("Calibration manifest '%s' lacks '%s'" % (filename, key))
        white_level = float(manifest.get('white_level', 65535.0))
        base = os.path.dirname(os.path.abspath(filename))
        frames = []
        for path in manifest['frames']:
            path = os.path.join(base, path)
            if not os.path.exists(path):
                raise CalibrationError("Calibration frame '%s' not found" % path)
            if path.endswith('.npy'):
                frames.append(np.load(path).astype(np.float64))
            elif path.endswith('.pfm'):
                frames.append(read_pfm(path) * white_level)
            else:
                image = cv2.imread(path, cv2.IMREAD_UNCHANGED)
                if image is None:
                    raise CalibrationError("Cannot decode calibration frame '%s'" % path)
                frames.append(image.astype(np.float64))
        regions = [tuple(int(x) for x in region) for region in manifest.get('regions', [])]
        logger.info("Loaded %s set '%s': %d frames, ISO %s", manifest['kind'], filename, len(frames), manifest['iso'])
        return cls(frames, int(manifest['iso']), float(manifest['exposure_s']), manifest['kind'], regions)

##############################################################################
# fitting
##############################################################################

@dataclasses.dataclass
class PhotonTransferFit(object):
    k: float
    var_additive: float
    residual_rms: float


@dataclasses.dataclass
class DarkFrameStats(object):
    dark_rate: float
    sigma_row: float
    sigma_read: float


def fit_photon_transfer(points):
    """Least-squares line ``var = k * mean + var_additive``.

    Parameters
    ----------
    points : list of (mean, variance)

    Returns
    -------
    fit : PhotonTransferFit

    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[1] != 2 or len(points) < 2:
        raise CalibrationError('Photon transfer fit needs at least 2 (mean, variance) points')
    means, variances = points[:, 0], points[:, 1]
    if np.ptp(means) == 0:
        raise CalibrationError('Photon transfer fit needs distinct means, all are %g' % means[0])
    slope, intercept = np.polyfit(means, variances, 1)
    residual = variances - (slope * means + intercept)
    return PhotonTransferFit(float(slope), float(intercept), float(np.sqrt(np.mean(residual ** 2))))


def gray_chart_points(calibration):
    """One (mean, variance) point per region from frame-pair differences.

    For each pair of consecutive frames the region mean is the mean of both
    and the variance is ``var(A - B) / 2``, which cancels fixed-pattern
    structure; pair values are averaged.
    """
    if calibration.kind != GRAY_CHART:
        raise CalibrationError("Expected a gray_chart set, got '%s'" % calibration.kind)
    stack = calibration.stack()
    n_pairs = len(stack) // 2
    if n_pairs < 1:
        raise CalibrationError('Gray-chart sets need at least 2 frames')
    points = []
    for x, y, w, h in calibration.regions:
        roi = stack[:2 * n_pairs, y:y + h, x:x + w]
        if roi.shape[1] * roi.shape[2] < 2:
            raise CalibrationError('Region (%d, %d, %d, %d) holds fewer than 2 pixels' % (x, y, w, h))
        a, b = roi[0::2], roi[1::2]
        means = 0.5 * (a.mean(axis=(1, 2)) + b.mean(axis=(1, 2)))
        diffs = (a - b).reshape(n_pairs, -1)
        variances = diffs.var(axis=1, ddof=1) / 2.0
        points.append((float(means.mean()), float(variances.mean())))
    return points


def estimate_gain(calibration):
    return fit_photon_transfer(gray_chart_points(calibration))


def analyze_dark_frames(calibration, k, q=0.0):
    """Dark rate, row noise and read noise from dark frames (DN).

    ``dark_rate = mean / k``. Each frame row has its mean removed; the std of
    those residuals (with one degree of freedom per row spent on its mean) is
    the per-pixel noise ``s``. ``sigma_row`` is the std of the per-frame
    centered row means with the read-noise leakage ``s^2 / row_length``
    removed, and ``sigma_read`` is ``s`` with the dark shot variance
    ``k * mean`` and the quantization variance ``q^2 / 12`` removed.
    """
    if calibration.kind != DARK_FRAME:
        raise CalibrationError("Expected a dark_frame set, got '%s'" % calibration.kind)
    if not k > 0:
        raise CalibrationError('Gain k must be positive, got %r' % k)
    stack = calibration.stack()
    n, rows, width = stack.shape
    mean = float(stack.mean())
    dark_mean = max(mean, 0.0)

    row_means = stack.mean(axis=2)
    residuals = stack - row_means[:, :, np.newaxis]
    resid_std = float(residuals.std()) * math.sqrt(width / (width - 1)) if width > 1 else 0.0
    if rows > 1:
        centered = row_means - row_means.mean(axis=1, keepdims=True)
        row_std = math.sqrt(float((centered ** 2).sum()) / (n * (rows - 1)))
    else:
        row_std = 0.0
    sigma_row2 = max(row_std ** 2 - resid_std ** 2 / width, 0.0)
    sigma_read2 = max(resid_std ** 2 - k * dark_mean - q * q / 12.0, 0.0)
    stats = DarkFrameStats(dark_mean / k, math.sqrt(sigma_row2), math.sqrt(sigma_read2))
    logger.debug('dark frames ISO %s: %s', calibration.iso, stats)
    return stats


def fit_iso_log_model(pairs):
    """Least squares on ``(log k, log sigma)``; residual_std uses ddof=1."""
    pairs = np.asarray(pairs, dtype=np.float64)
    if pairs.ndim != 2 or pairs.shape[1] != 2 or len(pairs) < 2:
        raise CalibrationError('Log-linear fit needs at least 2 (k, sigma) pairs')
    if np.any(pairs <= 0) or not np.all(np.isfinite(pairs)):
        raise CalibrationError('Log-linear fit needs positive, finite (k, sigma) pairs')
    x, y = np.log(pairs[:, 0]), np.log(pairs[:, 1])
    if np.ptp(x) == 0:
        raise CalibrationError('Log-linear fit needs distinct gains')
    slope, intercept = np.polyfit(x, y, 1)
    residual = y - (slope * x + intercept)
    return LogLinearModel(float(slope), float(intercept), float(np.std(residual, ddof=1)))


def calibrate_iso(gray, dark, q=1.0):
    """NoiseParams (DN) of one ISO from its gray-chart and dark-frame sets."""
    fit = estimate_gain(gray)
    stats = analyze_dark_frames(dark, fit.k, q)
    logger.info('ISO %d: k=%.4g sigma_read=%.4g sigma_row=%.4g dark_rate=%.4g (fit rms %.3g)',
                gray.iso, fit.k, stats.sigma_read, stats.sigma_row, stats.dark_rate, fit.residual_rms)
    return NoiseParams(fit.k, stats.sigma_read, stats.sigma_row, stats.dark_rate, q, gray.iso)


def params_table(params):
    """Per-ISO NoiseParams as a DataFrame sorted by ISO."""
    frame = pd.DataFrame([p.to_dict() for p in params],
                         columns=['iso', 'k', 'sigma_read', 'sigma_row', 'dark_rate', 'q'])
    return frame.sort_values('iso').reset_index(drop=True)


def synthesis_config_from_params(params, white_level, base=None):
    """Synthesis config in normalized units from per-ISO DN calibrations.

    With two or more ISOs the read and row models are fitted; otherwise the
    models of ``base`` are kept.
    """
    base = base or SynthesisConfig()
    normalized = [p.scaled(1.0 / white_level) for p in params]
    ks = [p.k for p in normalized]
    changes = {'k_range': (min(ks), max(ks)),
               'dark_rate': float(np.mean([p.dark_rate for p in params])),
               'q': normalized[0].q}
    if len({p.k for p in params}) >= 2:
        for name, field in (('read_model', 'sigma_read'), ('row_model', 'sigma_row')):
            pairs = [(p.k, getattr(p, field)) for p in params]
            if all(sigma > 0 for _, sigma in pairs):
                changes[name] = fit_iso_log_model(pairs).rescaled(white_level)
            else:
                logger.warning('Zero %s in calibration; keeping the default %s', field, name)
    return dataclasses.replace(base, **changes).validate()

##############################################################################
# synthesis
##############################################################################

def sample_noise_params(cfg, rng):
    """Draw k uniformly, then log sigma_read and log sigma_row uniformly in their bands."""
    k = float(rng.uniform(cfg.k_range[0], cfg.k_range[1]))
    log_k = math.log(k)
    read = cfg.read_model
    row = cfg.row_model
    sigma_read = math.exp(read.slope * log_k + read.intercept + rng.uniform(-read.residual_std, read.residual_std))
    sigma_row = math.exp(row.slope * log_k + row.intercept + rng.uniform(-row.residual_std, row.residual_std))
    return NoiseParams(k, sigma_read, sigma_row, cfg.dark_rate, cfg.q)


def sample_raw(signal, params, rng, mode='physics', return_components=False):
    """Noisy raw image for a clean ``signal`` on the sensor grid (unclamped).

    ``signal`` is ``(rows, cols)`` or ``(rows, cols, c)``; row offsets are
    shared by every column and channel of a sensor row. The ``shot_read``
    mode keeps only the shot and read terms.
    """
    if mode not in NOISE_MODES:
        raise ConfigError("Unknown noise mode '%s'" % mode)
    signal = np.asarray(signal, dtype=np.float64)
    lam = signal / params.k
    if mode == 'physics':
        lam = lam + params.dark_rate
    lam = np.maximum(lam, 0.0)
    exact = lam <= POISSON_EXACT_LIMIT
    counts = np.where(exact, rng.poisson(np.where(exact, lam, 0.0)),
                      rng.normal(lam, np.sqrt(lam)))
    components = {'shot': params.k * counts,
                  'read': rng.normal(0.0, params.sigma_read, signal.shape)}
    if mode == 'physics':
        row_shape = (signal.shape[0],) + (1,) * (signal.ndim - 1)
        components['row'] = np.broadcast_to(rng.normal(0.0, params.sigma_row, row_shape), signal.shape)
        components['quant'] = rng.uniform(-params.q / 2, params.q / 2, signal.shape)
    total = np.sum([components[name] for name in components], axis=0)
    return (total, components) if return_components else total


def synthesize_dark(gt, cfg, rng, params=None, beta=None):
    """Dark, noisy version of a clean light field.

    ``L_low = beta * L_gt``; noise is injected on the plenoptic layout, the
    result is clamped to [0, 1] and converted back to sub-aperture views.
    Draw order: beta, then the noise parameters, then the noise.

    Returns
    -------
    l_in, l_low : LightField
    params : NoiseParams
    beta : float

    """
    if gt.views.min() < 0 or gt.views.max() > 1:
        raise RangeError('Ground truth must lie in [0, 1], got [%g, %g]' % (gt.views.min(), gt.views.max()))
    if beta is None:
        beta = float(rng.uniform(cfg.beta_range[0], cfg.beta_range[1]))
    if params is None:
        params = sample_noise_params(cfg, rng)
    l_low = gt.with_views(gt.views * beta)
    plenoptic = to_plenoptic(l_low)
    noisy = np.clip(sample_raw(plenoptic.pixels, params, rng, cfg.noise_mode), 0.0, 1.0)
    l_in = to_sai(PlenopticImage(noisy, plenoptic.grid, gt.white_level))
    return gt.with_views(l_in.views), l_low, params, beta
