
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import special, stats

from seril.stats import SIGNIFICANCE, betainc, paired_ttest, t_cdf, t_two_sided_p


@pytest.mark.parametrize("a,b,x", [(0.5, 0.5, 0.3), (2.0, 3.0, 0.7), (10.0, 0.5, 0.95), (50.0, 0.5, 0.2),
                                   (1.0, 1.0, 0.5), (0.5, 30.0, 0.01)])
def test_betainc_matches_scipy(a, b, x):
    assert betainc(a, b, x) == pytest.approx(special.betainc(a, b, x), rel=1e-10, abs=1e-14)


@settings(max_examples=200)
@given(st.floats(-30, 30), st.integers(1, 500))
def test_t_distribution_matches_scipy(t, df):
    assert t_cdf(t, df) == pytest.approx(stats.t.cdf(t, df), rel=1e-8, abs=1e-13)
    assert t_two_sided_p(t, df) == pytest.approx(2 * stats.t.sf(abs(t), df), rel=1e-8, abs=1e-13)


def test_betainc_bounds():
    assert betainc(2, 3, 0) == 0.0 and betainc(2, 3, 1) == 1.0
    with pytest.raises(ValueError):
        betainc(0, 1, 0.5)


@settings(max_examples=100)
@given(st.lists(st.tuples(st.floats(0, 50), st.floats(0, 50)), min_size=2, max_size=60))
def test_paired_ttest_matches_scipy(pairs):
    a, b = zip(*pairs)
    res = paired_ttest(a, b)
    d = np.subtract(a, b)
    if res.degenerate:
        assert np.allclose(d, d[0])
        assert res.p_value == 1.0 and not res.significant
        return
    ref = stats.ttest_rel(a, b)
    assert res.p_value == pytest.approx(ref.pvalue, rel=1e-6, abs=1e-12)
    assert res.t == pytest.approx(ref.statistic, rel=1e-6)


def test_paired_ttest_examples():
    res = paired_ttest([1, 2, 3, 4, 5], [1.5, 2.4, 3.6, 4.2, 5.9])
    assert res.df == 4 and res.threshold == SIGNIFICANCE
    assert res.p_value == pytest.approx(stats.ttest_rel([1, 2, 3, 4, 5], [1.5, 2.4, 3.6, 4.2, 5.9]).pvalue)
    same = paired_ttest([1, 2, 3], [1, 2, 3])
    assert same.degenerate and same.p_value == 1.0
    shifted = paired_ttest(np.arange(30.0), np.arange(30.0) + 5 + np.sin(np.arange(30)))
    assert shifted.significant


def test_paired_ttest_errors():
    with pytest.raises(ValueError):
        paired_ttest([1, 2], [1, 2, 3])
    with pytest.raises(ValueError):
        paired_ttest([1], [2])


@pytest.mark.parametrize("t,df", [(4e-8, 3), (-1e-6, 1), (1e-3, 400)])
def test_t_distribution_near_zero(t, df):
    assert t_cdf(t, df) == pytest.approx(stats.t.cdf(t, df), rel=1e-12)
    assert t_two_sided_p(t, df) == pytest.approx(2 * stats.t.sf(abs(t), df), rel=1e-12)
