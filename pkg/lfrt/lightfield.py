"""
Light-field containers, plenoptic <-> sub-aperture conversion, pyramids,
high-frequency targets, EPIs and on-disk formats.

Views are stored row-major in angular order (u outer, v inner) as a 5-D array
``(u, v, c, h, w)``. Every spatial filter uses reflect padding without edge
repetition (numpy ``'reflect'``, ``scipy.ndimage`` ``'mirror'``).

"""
##############################################################################
# imports
##############################################################################

import dataclasses
import json
import logging
import os

import cv2
import numpy as np
from scipy import ndimage

from .automation import atomic_directory, atomic_output
from .errors import ConfigError, FormatError, RangeError, ShapeError

logger = logging.getLogger(__name__)

##############################################################################
# globals
##############################################################################

COLOR_SPACES = {'RGB': 3, 'Y': 1}
BT601 = np.array([0.299, 0.587, 0.114])
DEFAULT_WHITE_LEVEL = 65535.0
VIEW_PATTERN = 'view_{r}_{c}.{ext}'


def gaussian_kernel(size, sigma):
    """Normalized 1-D Gaussian taps of odd length ``size``."""
    radius = size // 2
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    taps = np.exp(-0.5 * (x / sigma) ** 2)
    return taps / taps.sum()


# 5x5 (separable) anti-alias filter applied before 2x decimation
ANTIALIAS_KERNEL = gaussian_kernel(5, 1.0)
# 5x5 (separable) blur whose residual is the high-frequency target
HIGHFREQ_KERNEL = gaussian_kernel(5, 1.5)

##############################################################################
# containers
##############################################################################

@dataclasses.dataclass(frozen=True, eq=False)
class LightField(object):
    """A grid of sub-aperture views.

    Parameters
    ----------
    views : np.ndarray, shape (u, v, c, h, w)
        View intensities. Ingested images are clamped to [0, 1]; derived
        quantities (residuals, high-frequency maps) may leave that range.
    color_space : str, optional, default='RGB'
        'RGB' (c=3) or 'Y' (c=1).
    white_level : float, optional
        Full-scale DN of the original capture.

    """
    views: np.ndarray
    color_space: str = 'RGB'
    white_level: float = DEFAULT_WHITE_LEVEL

    def __post_init__(self):
        views = np.asarray(self.views)
        if not np.issubdtype(views.dtype, np.floating):
            views = views.astype(np.float64)
        if views.ndim != 5:
            raise ShapeError('LightField views must be 5-D (u, v, c, h, w), got shape %s' % (views.shape,))
        if min(views.shape) < 1:
            raise ShapeError('LightField dimensions must all be >= 1, got shape %s' % (views.shape,))
        if self.color_space not in COLOR_SPACES:
            raise ConfigError("Unknown color space '%s'" % self.color_space)
        if views.shape[2] != COLOR_SPACES[self.color_space]:
            raise ShapeError('%s light field needs %d channels, got %d'
                             % (self.color_space, COLOR_SPACES[self.color_space], views.shape[2]))
        if not np.all(np.isfinite(views)):
            raise RangeError('LightField contains non-finite values')
        if not self.white_level > 0:
            raise RangeError('white_level must be positive, got %r' % self.white_level)
        object.__setattr__(self, 'views', views)

    @property
    def shape(self):
        return self.views.shape

    @property
    def angular_dims(self):
        return self.views.shape[:2]

    @property
    def n_views(self):
        return self.views.shape[0] * self.views.shape[1]

    @property
    def channels(self):
        return self.views.shape[2]

    @property
    def spatial_dims(self):
        return self.views.shape[3:]

    def with_views(self, views):
        """Same metadata, new view array."""
        return dataclasses.replace(self, views=views)

    def as_batch(self):
        """Views flattened to a batch ``(u*v, c, h, w)`` in storage order."""
        u, v, c, h, w = self.views.shape
        return self.views.reshape(u * v, c, h, w)

    @classmethod
    def from_batch(cls, batch, angular_dims, color_space='RGB', white_level=DEFAULT_WHITE_LEVEL):
        batch = np.asarray(batch)
        u, v = angular_dims
        if batch.ndim != 4 or batch.shape[0] != u * v:
            raise ShapeError('Batch of shape %s does not hold %dx%d views' % (batch.shape, u, v))
        return cls(batch.reshape((u, v) + batch.shape[1:]), color_space, white_level)

    def clamped(self):
        return self.with_views(np.clip(self.views, 0.0, 1.0))


@dataclasses.dataclass(frozen=True, eq=False)
class PlenopticImage(object):
    """Interleaved raw layout: micro-image (i, j) holds all angular samples of pixel (i, j).

    ``pixels`` is ``(rows, cols)`` for single-channel data or
    ``(rows, cols, c)`` for color data.
    """
    pixels: np.ndarray
    grid: tuple
    white_level: float = DEFAULT_WHITE_LEVEL

    def __post_init__(self):
        pixels = np.asarray(self.pixels)
        if pixels.ndim not in (2, 3):
            raise ShapeError('Plenoptic pixels must be 2-D or 3-D, got shape %s' % (pixels.shape,))
        grid = tuple(int(g) for g in self.grid)
        if len(grid) != 2 or min(grid) < 1:
            raise ShapeError('Plenoptic grid must be two positive counts, got %s' % (self.grid,))
        rows, cols = pixels.shape[:2]
        if rows % grid[0] or cols % grid[1]:
            raise ShapeError('Plenoptic image %dx%d is not divisible by the %dx%d view grid'
                             % (rows, cols, grid[0], grid[1]))
        object.__setattr__(self, 'pixels', pixels)
        object.__setattr__(self, 'grid', grid)

    @property
    def channels(self):
        return 1 if self.pixels.ndim == 2 else self.pixels.shape[2]


@dataclasses.dataclass(frozen=True, eq=False)
class Epi(object):
    """Epipolar-plane image, ``values`` indexed (channel, angular, spatial)."""
    values: np.ndarray
    axis: str

##############################################################################
# pattern conversion
##############################################################################

def convert_pattern(src, direction):
    """Convert between the plenoptic layout and the sub-aperture array.

    Plenoptic pixel (macro-row i, macro-col j, offset a, offset b) is pixel
    (y=i, x=j) of view (a, b). The conversion is a pure permutation.

    Parameters
    ----------
    src : PlenopticImage or LightField
    direction : str
        'to_sai' (PlenopticImage -> LightField) or 'to_plenoptic'.

    """
    if direction == 'to_sai':
        if not isinstance(src, PlenopticImage):
            raise ConfigError('to_sai expects a PlenopticImage, got %s' % type(src).__name__)
        pixels = src.pixels if src.pixels.ndim == 3 else src.pixels[:, :, np.newaxis]
        rows, cols, c = pixels.shape
        gu, gv = src.grid
        views = pixels.reshape(rows // gu, gu, cols // gv, gv, c).transpose(1, 3, 4, 0, 2)
        color_space = 'Y' if c == 1 else 'RGB'
        return LightField(np.ascontiguousarray(views), color_space, src.white_level)
    elif direction == 'to_plenoptic':
        if not isinstance(src, LightField):
            raise ConfigError('to_plenoptic expects a LightField, got %s' % type(src).__name__)
        u, v, c, h, w = src.shape
        pixels = src.views.transpose(3, 0, 4, 1, 2).reshape(h * u, w * v, c)
        if c == 1:
            pixels = pixels[:, :, 0]
        return PlenopticImage(np.ascontiguousarray(pixels), (u, v), src.white_level)
    raise ConfigError("Unknown conversion direction '%s'" % direction)


def to_sai(plenoptic):
    return convert_pattern(plenoptic, 'to_sai')


def to_plenoptic(lf):
    return convert_pattern(lf, 'to_plenoptic')


def central_crop_views(lf, target):
    """Keep the centered ``target`` angular sub-grid.

    Parameters
    ----------
    lf : LightField
    target : int or (int, int)

    """
    if np.isscalar(target):
        target = (target, target)
    a, b = (int(t) for t in target)
    u, v = lf.angular_dims
    if a < 1 or b < 1 or a > u or b > v:
        raise RangeError('Cannot crop %dx%d views to %dx%d' % (u, v, a, b))
    if (u - a) % 2 or (v - b) % 2:
        raise ShapeError('Crop %dx%d -> %dx%d is not symmetric' % (u, v, a, b))
    ou, ov = (u - a) // 2, (v - b) // 2
    return lf.with_views(lf.views[ou:ou + a, ov:ov + b].copy())

##############################################################################
# filtering and resampling
##############################################################################

def separable_filter(array, kernel):
    """Correlate the last two axes with ``kernel`` (reflect padding)."""
    out = ndimage.correlate1d(array, kernel, axis=-1, mode='mirror')
    return ndimage.correlate1d(out, kernel, axis=-2, mode='mirror')


def decimation_matrix(n, kernel=ANTIALIAS_KERNEL):
    """Operator ``D`` (n/2 x n) with ``D @ x`` = blur then keep even samples."""
    if n % 2:
        raise ShapeError('Cannot decimate odd length %d' % n)
    return ndimage.correlate1d(np.eye(n), kernel, axis=0, mode='mirror')[::2]


def bilinear_matrix(n):
    """Operator ``U`` (2n x n) for bilinear 2x upsampling, half-pixel centers.

    Output sample ``o`` reads source position ``(o + 0.5) / 2 - 0.5`` clamped
    to ``[0, n - 1]``.
    """
    out = np.zeros((2 * n, n))
    src = np.clip((np.arange(2 * n) + 0.5) / 2.0 - 0.5, 0, n - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n - 1)
    frac = src - lo
    rows = np.arange(2 * n)
    np.add.at(out, (rows, lo), 1.0 - frac)
    np.add.at(out, (rows, hi), frac)
    return out


def apply_separable(array, my, mx):
    """``my @ x @ mx.T`` over the last two axes."""
    return np.matmul(np.matmul(my, array), mx.T)


def downsample_half(lf):
    """Anti-alias blur then 2x decimation of every view and channel."""
    h, w = lf.spatial_dims
    if h % 2 or w % 2:
        raise ShapeError('downsample_half needs even spatial dims, got %dx%d' % (h, w))
    blurred = separable_filter(lf.views, ANTIALIAS_KERNEL)
    return lf.with_views(np.ascontiguousarray(blurred[..., ::2, ::2]))


def upsample2x(lf):
    """Bilinear 2x upsampling of every view and channel."""
    h, w = lf.spatial_dims
    return lf.with_views(apply_separable(lf.views, bilinear_matrix(h), bilinear_matrix(w)))


def pyramid(lf, levels=3):
    """``[full, half, quarter, ...]`` by repeated ``downsample_half``."""
    out = [lf]
    for _ in range(levels - 1):
        out.append(downsample_half(out[-1]))
    return out


def highfreq_target(gt):
    """``gt`` minus its Gaussian blur (the high-frequency detail)."""
    return gt.with_views(gt.views - separable_filter(gt.views, HIGHFREQ_KERNEL))


def luma(array, axis=-3):
    """BT.601 luma over the channel axis; single-channel input is returned as is."""
    array = np.asarray(array)
    if array.shape[axis] == 1:
        return np.take(array, 0, axis=axis)
    return np.tensordot(np.moveaxis(array, axis, -1), BT601, axes=([-1], [0]))


def random_crop(lf, size, rng):
    """Random ``size x size`` spatial crop shared by all views."""
    h, w = lf.spatial_dims
    if size > h or size > w:
        raise RangeError('Crop %d exceeds spatial dims %dx%d' % (size, h, w))
    y = int(rng.integers(0, h - size + 1))
    x = int(rng.integers(0, w - size + 1))
    return lf.with_views(lf.views[..., y:y + size, x:x + size].copy())

##############################################################################
# EPIs and mosaics
##############################################################################

def extract_epi(lf, axis, fixed_view_index, fixed_spatial_index):
    """Epipolar-plane image.

    A horizontal EPI stacks row ``fixed_spatial_index`` of the views in
    angular row ``fixed_view_index``: values ``(c, v, w)``. A vertical EPI
    stacks column ``fixed_spatial_index`` of the views in angular column
    ``fixed_view_index``: values ``(c, u, h)``.
    """
    u, v, c, h, w = lf.shape
    if axis == 'horizontal':
        if not (0 <= fixed_view_index < u and 0 <= fixed_spatial_index < h):
            raise ShapeError('Horizontal EPI index (%d, %d) out of range for %d views, %d rows'
                             % (fixed_view_index, fixed_spatial_index, u, h))
        values = lf.views[fixed_view_index, :, :, fixed_spatial_index, :].transpose(1, 0, 2)
    elif axis == 'vertical':
        if not (0 <= fixed_view_index < v and 0 <= fixed_spatial_index < w):
            raise ShapeError('Vertical EPI index (%d, %d) out of range for %d views, %d columns'
                             % (fixed_view_index, fixed_spatial_index, v, w))
        values = lf.views[:, fixed_view_index, :, :, fixed_spatial_index].transpose(1, 0, 2)
    else:
        raise ConfigError("Unknown EPI axis '%s'" % axis)
    return Epi(np.ascontiguousarray(values), axis)


def sai_mosaic(lf):
    """SAI-array image ``(u*h, v*w, c)``: view (a, b) occupies tile (a, b)."""
    u, v, c, h, w = lf.shape
    return lf.views.transpose(0, 3, 1, 4, 2).reshape(u * h, v * w, c)


def epi_image(epi):
    """EPI as an image ``(angular, spatial, c)``."""
    return epi.values.transpose(1, 2, 0)

##############################################################################
# file formats
##############################################################################

def read_pfm(filename):
    """Read a PFM file as float64 ``(h, w)`` or ``(h, w, 3)``, top row first."""
    with open(filename, 'rb') as infile:
        header = infile.readline().strip()
        if header == b'PF':
            channels = 3
        elif header == b'Pf':
            channels = 1
        else:
            raise FormatError("'%s' is not a PFM file (header %r)" % (filename, header))
        try:
            width, height = (int(token) for token in infile.readline().split())
            scale = float(infile.readline().strip())
        except ValueError:
            raise FormatError("Malformed PFM header in '%s'" % filename)
        dtype = '<f4' if scale < 0 else '>f4'
        data = np.frombuffer(infile.read(), dtype=dtype)
    expected = width * height * channels
    if data.size != expected:
        raise FormatError("'%s' holds %d values, header promises %d" % (filename, data.size, expected))
    shape = (height, width, channels) if channels == 3 else (height, width)
    return np.flipud(data.reshape(shape)).astype(np.float64)


def write_pfm(filename, array):
    """Write ``(h, w)``, ``(h, w, 1)`` or ``(h, w, 3)`` little-endian PFM."""
    array = np.asarray(array, dtype=np.float64)
    if array.ndim == 3 and array.shape[2] == 1:
        array = array[:, :, 0]
    if array.ndim == 2:
        header = b'Pf'
    elif array.ndim == 3 and array.shape[2] == 3:
        header = b'PF'
    else:
        raise ShapeError('PFM needs (h, w) or (h, w, 3) data, got shape %s' % (array.shape,))
    height, width = array.shape[:2]
    with atomic_output(filename) as tmp:
        with open(tmp, 'wb') as outfile:
            outfile.write(header + b'\n')
            outfile.write(b'%d %d\n' % (width, height))
            outfile.write(b'-1.0\n')
            outfile.write(np.flipud(array).astype('<f4').tobytes())


def _read_png(filename):
    image = cv2.imread(filename, cv2.IMREAD_UNCHANGED)
    if image is None:
        raise FormatError("Cannot decode image '%s'" % filename)
    if image.ndim == 3:
        if image.shape[2] == 4:
            image = image[:, :, :3]
        image = cv2.cvtColor(image, cv2.COLOR_BGR2RGB)
    return image.astype(np.float64)


def _write_png(filename, image, white_level):
    """``image`` is normalized ``(h, w)`` or ``(h, w, 3)``; written as 16-bit DN."""
    if white_level > 65535:
        raise FormatError('white_level %g does not fit a 16-bit PNG' % white_level)
    dn = np.round(np.clip(image, 0.0, 1.0) * white_level).astype(np.uint16)
    if dn.ndim == 3:
        dn = cv2.cvtColor(dn, cv2.COLOR_RGB2BGR)
    with atomic_output(filename) as tmp:
        if not cv2.imwrite(tmp + '.png', dn):
            raise FormatError("Cannot encode image '%s'" % filename)
        os.replace(tmp + '.png', tmp)


def read_lightfield(path, clamp=True):
    """Read a light-field directory (``meta.json`` plus one file per view).

    ``meta.json`` keys: ``angular_dims`` [u, v], ``color_space``,
    ``bit_depth``, ``white_level`` and ``view_pattern`` (a format string with
    ``{r}`` and ``{c}``). PNG views hold DN and are divided by the white
    level; PFM views already hold normalized values.
    """
    meta_filename = os.path.join(path, 'meta.json')
    if not os.path.exists(meta_filename):
        raise FormatError("Cannot find '%s'" % meta_filename)
    with open(meta_filename, 'r') as infile:
        try:
            meta = json.load(infile)
        except json.JSONDecodeError as e:
            raise FormatError("Malformed JSON in '%s': %s" % (meta_filename, e))
    try:
        u, v = meta['angular_dims']
    except (KeyError, ValueError, TypeError):
        raise FormatError("'%s' lacks a valid angular_dims entry" % meta_filename)
    color_space = meta.get('color_space', 'RGB')
    bit_depth = int(meta.get('bit_depth', 16))
    white_level = float(meta.get('white_level', 2 ** bit_depth - 1))
    pattern = meta.get('view_pattern', VIEW_PATTERN.format(r='{r}', c='{c}', ext='png'))

    views = []
    for r in range(u):
        row = []
        for c in range(v):
            filename = os.path.join(path, pattern.format(r=r, c=c))
            if not os.path.exists(filename):
                raise FormatError("Missing view file '%s'" % filename)
            if filename.lower().endswith('.pfm'):
                image = read_pfm(filename)
            else:
                image = _read_png(filename) / white_level
            if image.ndim == 2:
                image = image[:, :, np.newaxis]
            row.append(image.transpose(2, 0, 1))
        views.append(row)
    try:
        views = np.array(views, dtype=np.float64)
    except ValueError:
        raise FormatError("Views in '%s' do not share one shape" % path)
    if clamp:
        outside = np.count_nonzero((views < 0) | (views > 1))
        if outside:
            logger.debug('%s: clamping %d values to [0, 1]', path, outside)
        views = np.clip(views, 0.0, 1.0)
    logger.debug('Read light field %s with shape %s', path, views.shape)
    return LightField(views, color_space, white_level)


def write_lightfield(lf, path, fmt='png'):
    """Write ``lf`` as a light-field directory; the directory appears atomically."""
    if fmt not in ('png', 'pfm'):
        raise ConfigError("Unknown light-field file format '%s'" % fmt)
    u, v = lf.angular_dims
    pattern = VIEW_PATTERN.format(r='{r}', c='{c}', ext=fmt)
    meta = {
        'angular_dims': [u, v],
        'color_space': lf.color_space,
        'bit_depth': 16 if fmt == 'png' else 32,
        'white_level': lf.white_level,
        'view_pattern': pattern,
    }
    with atomic_directory(path) as tmp:
        with open(os.path.join(tmp, 'meta.json'), 'w') as outfile:
            json.dump(meta, outfile, indent=2, sort_keys=True)
        for r in range(u):
            for c in range(v):
                image = lf.views[r, c].transpose(1, 2, 0)
                filename = os.path.join(tmp, pattern.format(r=r, c=c))
                if fmt == 'png':
                    _write_png(filename, image[:, :, 0] if lf.channels == 1 else image, lf.white_level)
                else:
                    write_pfm(filename, image)


def read_plenoptic(png_filename, geometry_filename):
    """Read a rectified plenoptic PNG with geometry JSON ``{grid, white_level}``."""
    with open(geometry_filename, 'r') as infile:
        try:
            geometry = json.load(infile)
        except json.JSONDecodeError as e:
            raise FormatError("Malformed JSON in '%s': %s" % (geometry_filename, e))
    if 'grid' not in geometry:
        raise FormatError("'%s' lacks a grid entry" % geometry_filename)
    white_level = float(geometry.get('white_level', DEFAULT_WHITE_LEVEL))
    pixels = np.clip(_read_png(png_filename) / white_level, 0.0, 1.0)
    return PlenopticImage(pixels, tuple(geometry['grid']), white_level)
