import math

import numpy as np
import pytest
from scipy import integrate

from cloudletlb.errors import UnstableQueueError
from cloudletlb.queueing import (
    LATENCY_SENTINEL,
    ServerPool,
    erlang_c,
    erlang_c_factorial,
    erlang_c_gamma,
    latency_or_sentinel,
    latency_sentinel_vec,
    mm1_pooled_latency,
    mmc_latency,
)


def erlang_c_series_oracle(c, a):
    # literal factorial series of the waiting formula; fine for c <= 32
    rho = a / c
    s = sum(a**k / math.factorial(k) for k in range(c))
    top = a**c / math.factorial(c) / (1.0 - rho)
    return top / (s + top)


def erlang_c_quadrature_oracle(c, a):
    # independent evaluation of the incomplete-Gamma form: the upper
    # incomplete Gamma integral is computed by adaptive quadrature.
    upper, _ = integrate.quad(lambda t: t ** (c - 1.0) * math.exp(-t), a, np.inf)
    term = math.exp(a) * (c - a) * a ** (-c) * upper
    return 1.0 / (1.0 + term)


def test_single_server_reduces_to_rho():
    assert erlang_c(ServerPool(1, 1000.0), 500.0 / 1000.0) == pytest.approx(0.5, abs=1e-12)


def test_two_server_series_value():
    # direct summation of the series gives 1/3 at c=2, a=1
    assert erlang_c_series_oracle(2, 1.0) == pytest.approx(1.0 / 3.0, abs=1e-12)
    assert erlang_c(ServerPool(2, 1.0), 1.0) == pytest.approx(1.0 / 3.0, abs=1e-12)


def test_fractional_servers_match_quadrature_oracle():
    got = erlang_c(ServerPool(2.5, 1.0), 1.0)
    want = erlang_c_quadrature_oracle(2.5, 1.0)
    assert got == pytest.approx(want, abs=1e-10)
    # bracketed by the neighboring integer-c values (E_C decreases in c)
    assert erlang_c(ServerPool(3, 1.0), 1.0) < got < erlang_c(ServerPool(2, 1.0), 1.0)


def test_mmc_latency_examples():
    assert mmc_latency(ServerPool(1, 1000.0), 0.0) == pytest.approx(0.001, abs=1e-15)
    assert mmc_latency(ServerPool(2, 1.0), 1.0) == pytest.approx(4.0 / 3.0, abs=1e-12)
    assert mmc_latency(ServerPool(1, 1000.0), 970.0) == pytest.approx(1.0 / 30.0, abs=1e-12)


def test_mm1_pooled_examples():
    assert mm1_pooled_latency(ServerPool(2, 1.0), 1.0) == pytest.approx(1.0, abs=1e-12)
    assert mm1_pooled_latency(ServerPool(10, 100.0), 0.0) == pytest.approx(0.001, abs=1e-15)
    assert mm1_pooled_latency(ServerPool(2, 1.0), 1.9) == pytest.approx(10.0, abs=1e-9)


def test_unstable_and_domain_errors():
    with pytest.raises(UnstableQueueError):
        mmc_latency(ServerPool(1, 1.0), 1.0)
    with pytest.raises(UnstableQueueError):
        mm1_pooled_latency(ServerPool(2, 1.0), 2.0)
    with pytest.raises(UnstableQueueError):
        erlang_c(ServerPool(2, 1.0), 2.0)
    with pytest.raises(ValueError):
        erlang_c(ServerPool(2, 1.0), -0.1)
    with pytest.raises(ValueError):
        ServerPool(0.5, 1.0)
    with pytest.raises(ValueError):
        ServerPool(1, 0.0)


def test_integer_real_agreement_grid():
    for c in range(1, 33):
        for rho in np.linspace(0.1, 0.99, 20):
            a = c * rho
            assert abs(erlang_c_factorial(c, a) - erlang_c_gamma(float(c), a)) <= 1e-10


def test_erlang_c_bounds_and_monotone_in_load():
    rng = np.random.default_rng(7)
    for _ in range(200):
        c = float(rng.integers(1, 40)) + rng.choice([0.0, 0.5])
        mu = rng.uniform(0.5, 2000.0)
        pool = ServerPool(c, mu)
        rhos = np.sort(rng.uniform(0.01, 0.995, size=4))
        vals = [erlang_c(pool, c * r) for r in rhos]
        for v in vals:
            assert 0.0 <= v <= 1.0
        for lo, hi in zip(vals, vals[1:]):
            assert hi >= lo - 1e-12


def test_mmc_above_pooled_bound_random():
    rng = np.random.default_rng(11)
    for _ in range(10_000):
        c = float(rng.integers(1, 64)) + rng.choice([0.0, 0.25, 0.5])
        mu = rng.uniform(0.1, 5000.0)
        pool = ServerPool(c, mu)
        lam = rng.uniform(0.0, 0.999) * pool.capacity
        assert mmc_latency(pool, lam) >= mm1_pooled_latency(pool, lam) - 1e-15


def test_light_load_ratio_near_c():
    for c in [1, 2, 4, 8, 16, 32]:
        pool = ServerPool(float(c), 100.0)
        lam = 0.01 * pool.capacity
        ratio = mmc_latency(pool, lam) / mm1_pooled_latency(pool, lam)
        assert 0.9 * c <= ratio <= 1.1 * c


def test_heavy_load_ratio_near_one():
    # ratio = c*(1-rho) + E_C, so the 1% band at rho=0.999 requires
    # c*(1-rho) <= 1e-2, i.e. c <= 12 or so; larger c needs rho closer to 1
    for c in [1, 2, 4, 8, 12]:
        pool = ServerPool(float(c), 100.0)
        lam = 0.999 * pool.capacity
        ratio = mmc_latency(pool, lam) / mm1_pooled_latency(pool, lam)
        assert 0.99 <= ratio <= 1.01
    for c in [16, 32]:
        pool = ServerPool(float(c), 100.0)
        lam = (1.0 - 1e-5) * pool.capacity
        ratio = mmc_latency(pool, lam) / mm1_pooled_latency(pool, lam)
        assert 0.99 <= ratio <= 1.01


def test_latency_convex_in_arrival_rate():
    # second finite difference across a stable grid stays >= -1e-9
    for c, mu in [(1, 1000.0), (3, 250.0), (10.5, 100.0)]:
        pool = ServerPool(c, mu)
        lams = np.linspace(0.0, 0.98 * pool.capacity, 60)
        h = lams[1] - lams[0]
        vals = np.array([mmc_latency(pool, x) for x in lams])
        second = (vals[2:] - 2 * vals[1:-1] + vals[:-2]) / h**2
        assert np.all(second >= -1e-9)


def test_large_c_does_not_overflow():
    # the naive factorial series would overflow near c ~ 170
    pool = ServerPool(400.0, 10.0)
    v = erlang_c(pool, 400 * 0.9)
    assert 0.0 < v < 1.0
    assert erlang_c_gamma(400.0, 400 * 0.9) == pytest.approx(v, abs=1e-10)


def test_sentinel_helpers():
    assert latency_or_sentinel(1.0, 1000.0, 2000.0) == LATENCY_SENTINEL
    assert latency_or_sentinel(1.0, 1000.0, 500.0) == pytest.approx(
        mmc_latency(ServerPool(1, 1000.0), 500.0)
    )
    vec = latency_sentinel_vec([1.0, 1.0], 1000.0, [500.0, 2000.0])
    assert vec[0] == pytest.approx(0.002, abs=1e-12)
    assert vec[1] == LATENCY_SENTINEL


def test_vectorized_matches_scalar():
    rng = np.random.default_rng(3)
    c = rng.uniform(1.0, 50.0, size=64)
    mu = rng.uniform(1.0, 2000.0, size=64)
    lam = rng.uniform(0.0, 0.99, size=64) * c * mu
    vec = latency_sentinel_vec(c, mu, lam)
    for k in range(64):
        assert vec[k] == pytest.approx(
            mmc_latency(ServerPool(c[k], mu[k]), lam[k]), rel=1e-12
        )
