import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats as sps

from sdedecay import rng, stats
from sdedecay.tables import CheckTable, format_cell, jsonable


# known-answer vectors published with the Random123 library
@pytest.mark.parametrize("ctr,key,expected", [
    ((0, 0, 0, 0), (0, 0), (0x6627E8D5, 0xE169C58D, 0xBC57AC4C, 0x9B00DBD8)),
    ((0xFFFFFFFF,) * 4, (0xFFFFFFFF,) * 2, (0x408F276D, 0x41C83B0E, 0xA20BC7C6, 0x6D5451FD)),
    ((0x243F6A88, 0x85A308D3, 0x13198A2E, 0x03707344), (0xA4093822, 0x299F31D0),
     (0xD16CFE09, 0x94FDCCEB, 0x5001E420, 0x24126EA1)),
])
def test_philox_known_answers(ctr, key, expected):
    got = rng.philox4x32(*[np.uint32(c) for c in ctr], *[np.uint32(k) for k in key])
    assert tuple(int(v) for v in got) == expected


@pytest.mark.parametrize("p", [1e-300, 1e-20, 1e-3, 0.02425, 0.1, 0.5, 0.75, 0.97575, 1 - 1e-12])
def test_ndtri_matches_scipy(p):
    assert rng.ndtri(p) == pytest.approx(sps.norm.ppf(p), rel=1e-14, abs=1e-15)


def test_normals_are_pure_functions_of_their_counter():
    a = rng.standard_normals(5, np.arange(100), np.arange(10), dim=3)
    b = rng.standard_normals(5, np.arange(100)[::-1], np.arange(10), dim=3)[::-1]
    assert np.array_equal(a, b)
    sub = rng.standard_normals(5, [17], [4], dim=3)
    assert np.array_equal(sub[0, 0], a[17, 4])
    assert not np.array_equal(a, rng.standard_normals(5, np.arange(100), np.arange(10), dim=3, leg=1))
    assert not np.array_equal(a, rng.standard_normals(6, np.arange(100), np.arange(10), dim=3))


def test_normals_are_standard_gaussian():
    z = rng.standard_normals(11, np.arange(20_000), np.arange(5), dim=2).reshape(-1)
    assert abs(z.mean()) < 4 / math.sqrt(z.size)
    assert abs(z.var() - 1) < 4 * math.sqrt(2 / z.size)
    assert sps.kstest(z, "norm").pvalue > 1e-3


def test_seed_split_covers_64_bits():
    assert rng.split_seed(0) == (0, 0)
    k0, k1 = rng.split_seed(rng.MAX_SEED)
    assert int(k0) == int(k1) == 0xFFFFFFFF
    with pytest.raises(ValueError):
        rng.split_seed(-1)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=2000))
def test_pairwise_sum_is_close_to_exact(values):
    assert stats.pairwise_sum(values) == pytest.approx(math.fsum(values), abs=1e-6)


def test_tree_mean_is_order_fixed():
    a = np.random.default_rng(0).normal(size=10_001)
    assert stats.tree_mean(a) == stats.tree_mean(a.copy())
    m, se = stats.mean_stderr(a)
    assert m == pytest.approx(a.mean(), abs=1e-15)
    assert se == pytest.approx(a.std(ddof=1) / math.sqrt(a.size), rel=1e-12)
    assert math.isnan(stats.mean_stderr([1.0])[1])


def test_batch_means_on_autocorrelated_series():
    rng_ = np.random.default_rng(1)
    n, phi = 200_000, 0.9
    x = np.empty(n)
    x[0] = 0
    e = rng_.normal(size=n)
    for i in range(1, n):
        x[i] = phi * x[i - 1] + e[i]
    _, se = stats.batch_means_stderr(x)
    true = math.sqrt(1 / (1 - phi) ** 2 / n)  # long-run variance of AR(1)
    assert 0.7 * true < se < 1.3 * true
    with pytest.raises(ValueError):
        stats.batch_means_stderr(np.ones(10))


def test_ks_threshold_and_statistic():
    assert stats.ks_threshold(100_000) == pytest.approx(0.00728, abs=1e-5)
    assert stats.ks_2samp_stat([0.0, 1.0], [0.0, 1.0]) == 0.0
    assert stats.ks_2samp_stat([0.0], [1.0]) == 1.0


def test_table_csv_format():
    t = CheckTable("t", ("s", "v", "ok", "missing"), [(1.5, 0.1, True, None), (2, float("nan"), False, None)],
                   "pass")
    assert t.to_csv() == "s,v,ok,missing\n1.5,0.1,1,\n2,nan,0,\n"
    assert format_cell(np.float64(1 / 3)) == repr(1 / 3)
    assert jsonable({"a": np.array([1.0, np.inf]), "b": (np.int64(2),)}) == {"a": [1.0, None], "b": [2]}
    with pytest.raises(ValueError):
        CheckTable("t", ("a",), [(1, 2)], "pass")
    with pytest.raises(ValueError):
        CheckTable("t", ("a",), [], "maybe")
