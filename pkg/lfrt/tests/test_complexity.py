import itertools
from fractions import Fraction

import pytest

from lfrt.complexity import angular_complexity, spatial_complexity
from lfrt.errors import ShapeError


def angular_closed_form(u, v, c, h, w, p, m):
    uv, hw = u * v, h * w
    return Fraction(uv * c * c * (p * p + 2), m) + uv * uv * hw * c + uv * uv * c + uv * hw * c * c


def spatial_closed_form(c, h, w):
    hw = h * w
    return 4 * hw * c * c + Fraction(5, 32) * hw * c * c + Fraction(25, 512) * hw * hw * c


def test_angular_examples():
    assert angular_complexity(3, 3, 8, 16, 16, 4, 2).value == 319176
    assert angular_complexity(1, 1, 2, 2, 2, 1, 1).value == 38
    report = angular_complexity(7, 7, 32, 32, 32, 4, 4)
    assert report.value == 130358816
    assert report.baseline == 362872832
    assert report.value < report.baseline


def test_spatial_examples():
    assert spatial_complexity(8, 16, 16).value == 93696
    assert spatial_complexity(16, 16, 16).value == 323584
    report = spatial_complexity(32, 64, 64)
    assert report.value == 43646976
    assert report.baseline == 1090519040
    assert report.ratio == pytest.approx(0.040, abs=5e-4)


def test_spatial_terms():
    terms = spatial_complexity(8, 16, 16).terms
    assert terms['query'] + terms['fusion'] == 65536
    assert terms['reduction'] == 2560
    assert terms['attention'] == 25600


def test_angular_closed_form_grid():
    tuples = list(itertools.product((1, 3, 7), (4, 32), (8, 32), (1, 4), (1, 4)))
    assert len(tuples) >= 20
    for uv, c, hw, p, m in tuples:
        report = angular_complexity(uv, uv, c, hw, hw, p, m)
        assert Fraction(report.value) == angular_closed_form(uv, uv, c, hw, hw, p, m)
        assert report.baseline == 4 * uv * uv * hw * hw * c * c + 2 * (uv * uv) ** 2 * hw * hw * c


def test_spatial_closed_form_grid():
    tuples = list(itertools.product((4, 8, 16, 32, 64), (8, 16, 32, 64), (16, 32)))
    assert len(tuples) >= 20
    for c, h, w in tuples:
        report = spatial_complexity(c, h, w)
        assert Fraction(report.value) == spatial_closed_form(c, h, w)
        assert report.baseline == 4 * h * w * c * c + 2 * (h * w) ** 2 * c


def test_fractional_counts_stay_exact():
    value = angular_complexity(1, 1, 1, 1, 1, 1, 3).value
    assert value == 4 and isinstance(value, int)
    assert angular_complexity(1, 1, 1, 1, 1, 2, 5).value == Fraction(21, 5)


def test_rejects_non_positive_dims():
    with pytest.raises(ShapeError):
        angular_complexity(0, 1, 1, 1, 1, 1, 1)
    with pytest.raises(ShapeError):
        spatial_complexity(8, -16, 16)
