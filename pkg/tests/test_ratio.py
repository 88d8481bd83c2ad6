import math

import pytest

from vqkv import InvalidInputError, RatioConfig, ratio
from vqkv.ratio import ABLATION_GRID, format_ratio

from reference_ratios import HEADLINE, TABLE


@pytest.mark.parametrize("cfg, expected", TABLE + HEADLINE)
def test_reference_ratios(cfg, expected):
    value = ratio(RatioConfig(*cfg))
    assert abs(value - expected) <= 0.1
    assert format_ratio(value) == f"{expected:.1f}%"


def test_grid_matches_reference_rows():
    assert [row for row, _ in TABLE] == list(ABLATION_GRID)


def test_minimal_codebooks():
    assert ratio(RatioConfig(1, 2, 1, 2)) == pytest.approx(100 * (1 - 2 / 4096))
    assert format_ratio(ratio(RatioConfig(1, 2, 1, 2)), 2) == "99.95%"


def test_independent_formula():
    cfg = RatioConfig(3, 300, 5, 17, 64, 96)
    bits = 3 * math.log(300, 2) + 5 * math.log(17, 2)
    assert ratio(cfg) == pytest.approx(100 - 100 * bits / (16 * 160), rel=1e-12)


@pytest.mark.parametrize("args", [(0, 2, 1, 2), (1, 2, 0, 2), (1, 1, 1, 2), (1, 2, 1, 2, 0, 128)])
def test_validation(args):
    with pytest.raises(InvalidInputError):
        RatioConfig(*args)


def test_display_rounds_half_up():
    assert format_ratio(81.25) == "81.3%"
    assert format_ratio(81.24999) == "81.2%"
    assert format_ratio(99.951171875, 2) == "99.95%"
