"""M/M/c queueing primitives.

Every other module builds on these: Erlang-C (integer and real server
counts), the mean sojourn time of an M/M/c queue, and the pooled M/M/1
lower bound used by the property tests.
"""

from dataclasses import dataclass
import math

import numpy as np
from scipy import special

from .errors import UnstableQueueError

# Fractional utilization margin below 1 that still counts as stable.
STABILITY_MARGIN = 1e-9

# Latency stand-in for unstable queues so optimizers see a large finite
# penalty instead of an infinity.
LATENCY_SENTINEL = 1e6


@dataclass(frozen=True)
class ServerPool:
    """A pool of c identical servers; c may be fractional (soft slicing)."""

    servers: float
    service_rate: float

    def __post_init__(self):
        if self.servers < 1:
            raise ValueError(f"server count must be >= 1, got {self.servers}")
        if self.service_rate <= 0:
            raise ValueError(f"service rate must be > 0, got {self.service_rate}")

    @property
    def capacity(self):
        return self.servers * self.service_rate


def is_stable(pool: ServerPool, arrival_rate: float) -> bool:
    """Strict stability check: lambda < c*mu*(1 - margin)."""
    return arrival_rate < pool.capacity * (1.0 - STABILITY_MARGIN)


def erlang_c_factorial(c: int, offered_load: float) -> float:
    """Erlang-C for integer c, equal to the factorial-series form.

    Evaluated through the Erlang-B recurrence, which is numerically stable
    for large c where the naive series overflows.
    """
    if c < 1 or c != int(c):
        raise ValueError(f"integer server count >= 1 required, got {c}")
    a = float(offered_load)
    if a < 0:
        raise ValueError(f"offered load must be >= 0, got {a}")
    c = int(c)
    if a >= c * (1.0 - STABILITY_MARGIN):
        raise UnstableQueueError(f"offered load {a} >= server count {c}")
    if a == 0.0:
        return 0.0
    b = 1.0
    for k in range(1, c + 1):
        b = a * b / (k + a * b)
    rho = a / c
    return b / (1.0 - rho + rho * b)


def erlang_c_gamma(c: float, offered_load: float) -> float:
    """Erlang-C for real c >= 1 via the regularized upper incomplete Gamma.

    Uses the identity  E_C = 1 / (1 + e^a (c - a) a^-c Gamma(c, a))  with the
    log of the second term assembled from gammaincc/gammaln, so it stays
    finite for large c and small loads.
    """
    if c < 1:
        raise ValueError(f"server count must be >= 1, got {c}")
    a = float(offered_load)
    if a < 0:
        raise ValueError(f"offered load must be >= 0, got {a}")
    if a >= c * (1.0 - STABILITY_MARGIN):
        raise UnstableQueueError(f"offered load {a} >= server count {c}")
    if a == 0.0:
        return 0.0
    q = special.gammaincc(c, a)
    ln_term = a + math.log(c - a) - c * math.log(a) + special.gammaln(c) + math.log(q)
    if ln_term > 700.0:
        return 0.0
    return 1.0 / (1.0 + math.exp(ln_term))


def erlang_c(pool: ServerPool, offered_load: float) -> float:
    """Probability an arriving job has to wait (dispatches on c integrality)."""
    c = pool.servers
    if float(c).is_integer():
        return erlang_c_factorial(int(c), offered_load)
    return erlang_c_gamma(c, offered_load)


def mmc_latency(pool: ServerPool, arrival_rate: float) -> float:
    """Mean sojourn time 1/mu + E_C / (c*mu - lambda) of a stable M/M/c queue."""
    if arrival_rate < 0:
        raise ValueError(f"arrival rate must be >= 0, got {arrival_rate}")
    if not is_stable(pool, arrival_rate):
        raise UnstableQueueError(
            f"arrival rate {arrival_rate} >= capacity {pool.capacity}"
        )
    a = arrival_rate / pool.service_rate
    ec = erlang_c(pool, a)
    return 1.0 / pool.service_rate + ec / (pool.capacity - arrival_rate)


def mm1_pooled_latency(pool: ServerPool, arrival_rate: float) -> float:
    """Mean sojourn time 1/(c*mu - lambda) of the pooled-rate M/M/1 bound."""
    if arrival_rate < 0:
        raise ValueError(f"arrival rate must be >= 0, got {arrival_rate}")
    if not is_stable(pool, arrival_rate):
        raise UnstableQueueError(
            f"arrival rate {arrival_rate} >= capacity {pool.capacity}"
        )
    return 1.0 / (pool.capacity - arrival_rate)


def latency_or_sentinel(servers: float, service_rate: float, arrival_rate: float) -> float:
    """mmc_latency with the overload sentinel instead of an exception."""
    if arrival_rate >= servers * service_rate * (1.0 - STABILITY_MARGIN):
        return LATENCY_SENTINEL
    return mmc_latency(ServerPool(servers, service_rate), arrival_rate)


def latency_sentinel_vec(servers, service_rate, arrival_rate):
    """Vectorized latency-with-sentinel over numpy-broadcastable inputs.

    Uses the incomplete-Gamma Erlang-C form for all entries; agrees with the
    factorial form at integer c to well below 1e-10.
    """
    c = np.asarray(servers, dtype=float)
    mu = np.asarray(service_rate, dtype=float)
    lam = np.asarray(arrival_rate, dtype=float)
    c, mu, lam = np.broadcast_arrays(c, mu, lam)
    cap = c * mu
    stable = lam < cap * (1.0 - STABILITY_MARGIN)
    a = np.where(stable, lam / mu, 0.0)
    positive = stable & (a > 0.0)
    safe_a = np.where(positive, a, 1.0)
    with np.errstate(divide="ignore", over="ignore"):
        q = special.gammaincc(c, safe_a)
        ln_term = (
            safe_a
            + np.log(c - safe_a)
            - c * np.log(safe_a)
            + special.gammaln(c)
            + np.log(q)
        )
        ec = np.where(positive, 1.0 / (1.0 + np.exp(np.minimum(ln_term, 700.0))), 0.0)
    out = np.where(
        stable,
        1.0 / mu + ec / np.where(stable, cap - lam, 1.0),
        LATENCY_SENTINEL,
    )
    return out
