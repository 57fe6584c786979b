"""
Analytic multiply-accumulate (MAC) counts of the attention blocks and their
baselines.

All arithmetic is exact (integers and Fractions); a count is returned as an
int whenever it is integral.

"""
import dataclasses
from fractions import Fraction

from .errors import ShapeError

DEFAULT_SPATIAL_GROUPS = ((1, 4), (2, 4), (4, 2), (8, 2))


def _exact(value):
    value = Fraction(value)
    return int(value) if value.denominator == 1 else value


def _positive(**dims):
    for name, value in dims.items():
        if int(value) != value or value < 1:
            raise ShapeError('%s must be a positive integer, got %r' % (name, value))


@dataclasses.dataclass
class ComplexityReport(object):
    """A MAC count, its named terms and the baseline it is compared against."""
    value: object
    baseline: object
    terms: dict

    @property
    def ratio(self):
        return float(Fraction(self.value) / Fraction(self.baseline))


def angular_complexity(u, v, c, h, w, p, m):
    """MACs of the angular transformer block.

    Terms: query/key projection of the ``uv`` pooled tokens
    ``uv c^2 (p^2 + 2) / m``; attention applied to the flattened views
    ``(uv)^2 hwc``; score computation ``(uv)^2 c``; per-pixel fusion
    ``uv hw c^2``. The baseline is macro-pixel attention,
    ``4 uv hw c^2 + 2 (uv)^2 hwc``.
    """
    _positive(u=u, v=v, c=c, h=h, w=w, p=p, m=m)
    uv, hw = u * v, h * w
    terms = {
        'projection': _exact(Fraction(uv * c * c * (p * p + 2), m)),
        'apply': uv * uv * hw * c,
        'scores': uv * uv * c,
        'fusion': uv * hw * c * c,
    }
    value = _exact(sum(Fraction(t) for t in terms.values()))
    baseline = 4 * uv * hw * c * c + 2 * uv * uv * hw * c
    return ComplexityReport(value, baseline, terms)


def spatial_complexity(c, h, w, groups=DEFAULT_SPATIAL_GROUPS):
    """MACs of the multi-scale spatial transformer block.

    Per group ``(n, t)`` over ``n^2`` windows of ``hw/n^2`` tokens:
    query projection ``c -> c/2`` gives ``hw c^2 / 2``; key/value reduction
    ``c -> c/4`` on ``hw/t^2`` reduced tokens gives ``hw c^2 / (4 t^2)``;
    scores plus application at width ``c/4`` gives
    ``(hw)^2 c / (2 n^2 t^2)``. Output fusion adds ``2 hw c^2``. For the
    default groups this is ``4hwc^2 + (5/32) hwc^2 + (25/512) (hw)^2 c``.
    The baseline is global self-attention, ``4 hw c^2 + 2 (hw)^2 c``.
    """
    _positive(c=c, h=h, w=w)
    hw = h * w
    query = Fraction(0)
    reduction = Fraction(0)
    attention = Fraction(0)
    for n, t in groups:
        _positive(n=n, t=t)
        query += Fraction(hw * c * c, 2)
        reduction += Fraction(hw * c * c, 4 * t * t)
        attention += Fraction(hw * hw * c, 2 * n * n * t * t)
    terms = {
        'query': _exact(query),
        'reduction': _exact(reduction),
        'attention': _exact(attention),
        'fusion': 2 * hw * c * c,
    }
    value = _exact(query + reduction + attention + 2 * hw * c * c)
    baseline = 4 * hw * c * c + 2 * hw * hw * c
    return ComplexityReport(value, baseline, terms)
