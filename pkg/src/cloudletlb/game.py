"""Data model and utility evaluation for the load-balancing game.

The players are cloudlets; a strategy is, per job class, a row-stochastic
matrix of offload fractions with the retained share on the diagonal.  A
cloudlet's payoff is revenue on its own workload, plus incentives received
for executing neighbors' jobs, minus incentives paid for offloading, minus
a hinged latency penalty that activates once the end-to-end latency of a
class exceeds its QoS target.
"""

from dataclasses import dataclass, replace
from enum import Enum
from functools import cached_property

import numpy as np

from .queueing import latency_or_sentinel, latency_sentinel_vec
from .slicing import SliceAllocation, slice_slack, solve_slicing

ROW_SUM_TOL = 1e-9


class LoadState(Enum):
    UNDER_LOADED = "under"
    OVER_LOADED = "over"


@dataclass(frozen=True)
class JobClass:
    """One request class: service statistics plus its QoS target."""

    id: int
    service_rate: float
    qos_latency: float
    slot_multiple: int
    bits_per_job: float

    def __post_init__(self):
        if self.service_rate <= 0:
            raise ValueError(f"class {self.id}: service rate must be > 0")
        if self.bits_per_job <= 0:
            raise ValueError(f"class {self.id}: bits per job must be > 0")
        if self.slot_multiple < 1 or self.slot_multiple != int(self.slot_multiple):
            raise ValueError(f"class {self.id}: slot multiple must be an integer >= 1")


@dataclass(frozen=True)
class CloudletSpec:
    id: int
    provider_id: str
    total_servers: int
    slices: SliceAllocation
    user_latency: tuple  # seconds, one entry per class


@dataclass(frozen=True)
class Topology:
    inter_latency: np.ndarray  # (N, N) seconds, symmetric, zero diagonal
    bandwidth: np.ndarray  # (N, N) bits/s
    provider_flag: np.ndarray  # (N, N) in {0, 1}; 1 iff different providers

    def __post_init__(self):
        t, b, g = self.inter_latency, self.bandwidth, self.provider_flag
        n = t.shape[0]
        if t.shape != (n, n) or b.shape != (n, n) or g.shape != (n, n):
            raise ValueError("topology matrices must share an NxN shape")
        if not np.allclose(t, t.T):
            raise ValueError("inter-cloudlet latencies must be symmetric")
        if np.any(np.diag(t) != 0):
            raise ValueError("inter-cloudlet latency diagonal must be zero")
        if np.any(t < 0):
            raise ValueError("inter-cloudlet latencies must be >= 0")
        off = ~np.eye(n, dtype=bool)
        if np.any(b[off] <= 0):
            raise ValueError("bandwidth must be > 0 between distinct cloudlets")
        if np.any(np.diag(g) != 0):
            raise ValueError("provider flag diagonal must be zero")
        for arr in (t, b, g):
            arr.setflags(write=False)


@dataclass(frozen=True)
class PriceSchedule:
    revenue: np.ndarray  # (N, M)   Omega_1
    offload: np.ndarray  # (N, N, M) Omega_2, payer-major
    latency_penalty: np.ndarray  # (N, M)   Omega_3
    mediator_penalty: np.ndarray  # (N, M)   Omega_4

    def __post_init__(self):
        for name in ("revenue", "offload", "latency_penalty", "mediator_penalty"):
            arr = getattr(self, name)
            if np.any(arr < 0):
                raise ValueError(f"{name} prices must be >= 0")
            arr.setflags(write=False)


@dataclass(frozen=True)
class ArrivalProfile:
    rates: np.ndarray  # (N, M) true lambda
    revealed: np.ndarray  # (N, M) revealed lambda-hat
    caps: np.ndarray  # (N, M) lambda-max

    def __post_init__(self):
        for name in ("rates", "revealed", "caps"):
            getattr(self, name).setflags(write=False)
        if np.any(self.rates < 0) or np.any(self.revealed < 0):
            raise ValueError("arrival rates must be >= 0")
        if np.any(self.rates > self.caps + 1e-9) or np.any(
            self.revealed > self.caps + 1e-9
        ):
            raise ValueError("arrival rates must stay within their caps")


@dataclass(frozen=True)
class OffloadMatrix:
    """Per-class N x N offload fractions; diagonal holds the retained share."""

    phi: np.ndarray  # (M, N, N)
    psi: np.ndarray = None  # optional receiver-side mirror of the off-diagonal

    def __post_init__(self):
        phi = self.phi
        if phi.ndim != 3 or phi.shape[1] != phi.shape[2]:
            raise ValueError("phi must have shape (M, N, N)")
        if np.any(phi < -ROW_SUM_TOL) or np.any(phi > 1 + ROW_SUM_TOL):
            raise ValueError("offload fractions must lie in [0, 1]")
        rows = phi.sum(axis=2)
        if np.any(np.abs(rows - 1.0) > ROW_SUM_TOL):
            raise ValueError("each offload row must sum to 1")
        phi.setflags(write=False)
        if self.psi is not None:
            self.psi.setflags(write=False)

    @classmethod
    def identity(cls, n_cloudlets, n_classes):
        return cls(phi=np.broadcast_to(
            np.eye(n_cloudlets), (n_classes, n_cloudlets, n_cloudlets)
        ).copy())


@dataclass(frozen=True)
class GameContext:
    """Immutable instance of the full game."""

    cloudlets: tuple
    classes: tuple
    topology: Topology
    prices: PriceSchedule
    arrivals: ArrivalProfile
    slot: float  # D_Q seconds
    interval: float  # tau_x seconds
    default_utility: tuple

    def __post_init__(self):
        n, m = len(self.cloudlets), len(self.classes)
        if n < 2:
            raise ValueError("a game needs at least two cloudlets")
        if m < 1:
            raise ValueError("a game needs at least one job class")
        for jc in self.classes:
            if abs(jc.qos_latency - jc.slot_multiple * self.slot) > 1e-12:
                raise ValueError(
                    f"class {jc.id}: QoS latency must equal slot_multiple * slot"
                )
            ratio = self.interval / (jc.slot_multiple * self.slot)
            if abs(ratio - round(ratio)) > 1e-9:
                raise ValueError(
                    f"interval must be an integer multiple of class {jc.id} QoS latency"
                )
        for cl in self.cloudlets:
            if len(cl.user_latency) != m:
                raise ValueError(f"cloudlet {cl.id}: need one user latency per class")
            if len(cl.slices.servers) != m:
                raise ValueError(f"cloudlet {cl.id}: need one slice per class")
            if sum(cl.slices.servers) > cl.total_servers + 1e-6:
                raise ValueError(f"cloudlet {cl.id}: slices exceed installed servers")
        if self.topology.inter_latency.shape[0] != n:
            raise ValueError("topology size does not match the cloudlet count")
        if self.prices.revenue.shape != (n, m) or self.prices.offload.shape != (n, n, m):
            raise ValueError("price tables do not match the instance size")
        if self.arrivals.rates.shape != (n, m):
            raise ValueError("arrival tables do not match the instance size")
        if len(self.default_utility) != n:
            raise ValueError("need one default utility per cloudlet")

    @property
    def n_cloudlets(self):
        return len(self.cloudlets)

    @property
    def n_classes(self):
        return len(self.classes)

    @cached_property
    def slice_servers(self):
        """(N, M) per-class server counts."""
        return np.array([cl.slices.servers for cl in self.cloudlets])

    @cached_property
    def capacity(self):
        """(N, M) per-slice capacities n_i^m * mu^m."""
        mu = np.array([jc.service_rate for jc in self.classes])
        return self.slice_servers * mu[None, :]

    @cached_property
    def user_latency(self):
        """(N, M) user-to-cloudlet transmission latencies."""
        return np.array([cl.user_latency for cl in self.cloudlets])

    @cached_property
    def qos_latency(self):
        """(M,) per-class QoS targets."""
        return np.array([jc.qos_latency for jc in self.classes])

    @cached_property
    def service_rates(self):
        return np.array([jc.service_rate for jc in self.classes])

    @cached_property
    def bits_per_job(self):
        return np.array([jc.bits_per_job for jc in self.classes])

    def rates(self, use_revealed=False):
        return self.arrivals.revealed if use_revealed else self.arrivals.rates

    def with_rates(self, rates=None, revealed=None):
        """Copy of the context with replaced arrival tables (slices kept)."""
        new = ArrivalProfile(
            rates=np.array(self.arrivals.rates if rates is None else rates),
            revealed=np.array(self.arrivals.revealed if revealed is None else revealed),
            caps=np.array(self.arrivals.caps),
        )
        return replace(self, arrivals=new)


def provider_flags(provider_ids):
    """gamma matrix: 1 where providers differ, 0 on/within a provider."""
    n = len(provider_ids)
    g = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            if i != j and provider_ids[i] != provider_ids[j]:
                g[i, j] = 1.0
    return g


def make_context(
    *,
    providers,
    total_servers,
    user_latency,
    classes,
    inter_latency,
    bandwidth,
    rates,
    caps,
    prices,
    slot,
    interval,
    revealed=None,
    slices=None,
    default_utility=None,
):
    """Assemble a GameContext from plain arrays.

    `classes` is a list of JobClass; `prices` is a dict with keys revenue,
    offload, latency_penalty, mediator_penalty (scalars broadcast).  Slices
    default to solve_slicing on the true rates of each cloudlet.
    """
    n = len(providers)
    m = len(classes)
    rates = np.asarray(rates, dtype=float)
    caps = np.asarray(caps, dtype=float)
    revealed = rates.copy() if revealed is None else np.asarray(revealed, dtype=float)

    cloudlets = []
    for i in range(n):
        if slices is None:
            spec = [
                (classes[k].service_rate, rates[i, k], classes[k].qos_latency,
                 user_latency[i][k])
                for k in range(m)
            ]
            alloc = solve_slicing(total_servers[i], spec)
        else:
            servers = tuple(map(float, slices[i]))
            worst = max(
                slice_slack(
                    (classes[k].service_rate, rates[i, k], classes[k].qos_latency,
                     user_latency[i][k]),
                    servers[k],
                )
                for k in range(m)
            )
            alloc = SliceAllocation(servers, worst)
        cloudlets.append(
            CloudletSpec(
                id=i,
                provider_id=providers[i],
                total_servers=int(total_servers[i]),
                slices=alloc,
                user_latency=tuple(map(float, user_latency[i])),
            )
        )

    def table(value, shape):
        arr = np.asarray(value, dtype=float)
        if arr.ndim == 0:
            arr = np.full(shape, float(arr))
        return arr

    price = PriceSchedule(
        revenue=table(prices["revenue"], (n, m)),
        offload=table(prices["offload"], (n, n, m)),
        latency_penalty=table(prices["latency_penalty"], (n, m)),
        mediator_penalty=table(prices["mediator_penalty"], (n, m)),
    )
    topo = Topology(
        inter_latency=np.asarray(inter_latency, dtype=float),
        bandwidth=np.asarray(bandwidth, dtype=float),
        provider_flag=provider_flags(providers),
    )
    du = tuple([0.0] * n if default_utility is None else map(float, default_utility))
    return GameContext(
        cloudlets=tuple(cloudlets),
        classes=tuple(classes),
        topology=topo,
        prices=price,
        arrivals=ArrivalProfile(rates=rates, revealed=revealed, caps=caps),
        slot=float(slot),
        interval=float(interval),
        default_utility=du,
    )


# ---------------------------------------------------------------------------
# operations


def aggregate_arrival(ctx, phi, i, m, use_revealed=False):
    """Post-offload arrival rate at (i, m): retained plus received load."""
    lam = ctx.rates(use_revealed)[:, m]
    return phi[m, i, i] * lam[i] + sum(
        phi[m, j, i] * lam[j] for j in range(ctx.n_cloudlets) if j != i
    )


def aggregate_arrival_all(ctx, phi, use_revealed=False):
    """(N, M) post-offload rates for every cloudlet and class."""
    lam = ctx.rates(use_revealed)  # (N, M)
    out = np.empty((ctx.n_cloudlets, ctx.n_classes))
    for m in range(ctx.n_classes):
        out[:, m] = phi[m].T @ lam[:, m]
    return out


def classify_load(ctx, i, m, rate) -> LoadState:
    """Over-loaded iff the class misses its QoS target at the given rate."""
    lat = latency_or_sentinel(
        ctx.slice_servers[i, m], ctx.service_rates[m], rate
    )
    if ctx.user_latency[i, m] + lat >= ctx.qos_latency[m]:
        return LoadState.OVER_LOADED
    return LoadState.UNDER_LOADED


def utility(ctx, phi, i, use_revealed=False):
    """Four-term utility of cloudlet i under strategy profile phi (Eq.-style:
    revenue + incentives received - incentives paid - hinged latency penalty)."""
    return float(utility_all(ctx, phi, use_revealed=use_revealed)[i])


def utility_all(ctx, phi, use_revealed=False):
    """(N,) utilities of every cloudlet; sentinel latency for unstable loads."""
    n, m_count = ctx.n_cloudlets, ctx.n_classes
    lam = ctx.rates(use_revealed)
    cap = ctx.capacity
    gamma = ctx.topology.provider_flag
    t_ij = ctx.topology.inter_latency
    out = np.zeros(n)
    agg = aggregate_arrival_all(ctx, phi, use_revealed)
    lat = latency_sentinel_vec(
        ctx.slice_servers, ctx.service_rates[None, :], agg
    )  # (N, M)
    for m in range(m_count):
        dq = ctx.qos_latency[m]
        w = lam[:, m] / cap[:, m]  # per-cloudlet own workload
        out += ctx.prices.revenue[:, m] * w
        pay = ctx.prices.offload[:, :, m] * gamma * phi[m] * lam[:, None, m] / cap[None, :, m]
        np.fill_diagonal(pay, 0.0)
        out -= pay.sum(axis=1)  # i pays for what it sends
        out += pay.sum(axis=0)  # j earns what it executes
        own_slack = ctx.user_latency[:, m] + lat[:, m] - dq
        recv_slack = ctx.user_latency[None, :, m].T + lat[None, :, m] + t_ij - dq
        # recv_slack[j, i]: slack of j's jobs executed at i
        own_term = np.diagonal(phi[m]) * lam[:, m] / cap[:, m] * np.maximum(0.0, own_slack)
        recv = phi[m] * lam[:, None, m] / cap[None, :, m] * np.maximum(0.0, recv_slack)
        np.fill_diagonal(recv, 0.0)
        out -= ctx.prices.latency_penalty[:, m] * (own_term + recv.sum(axis=0))
    return out


def bandwidth_feasible(ctx, phi, use_revealed=False):
    """Check sum_m b^m phi_ij^m lambda_i^m <= B_ij for every directed pair."""
    lam = ctx.rates(use_revealed)
    n = ctx.n_cloudlets
    flux = np.zeros((n, n))
    for m in range(ctx.n_classes):
        flux += ctx.bits_per_job[m] * phi[m] * lam[:, None, m]
    np.fill_diagonal(flux, 0.0)
    violations = []
    for i in range(n):
        for j in range(n):
            if i != j and flux[i, j] > ctx.topology.bandwidth[i, j]:
                violations.append((i, j, float(flux[i, j]), float(ctx.topology.bandwidth[i, j])))
    return len(violations) == 0, violations


def price_normalizer(ctx, i):
    """max over classes and neighbors of {Omega_1, Omega_2, Omega_3} for i."""
    n = ctx.n_cloudlets
    others = [j for j in range(n) if j != i]
    return float(
        max(
            ctx.prices.revenue[i].max(),
            ctx.prices.latency_penalty[i].max(),
            ctx.prices.offload[i][others].max(),
        )
    )


def reward(ctx, i, utility_value):
    """Normalized reward in [0, 1]: utility over the max price factor, clamped."""
    norm = price_normalizer(ctx, i)
    if norm <= 0:
        return 0.0
    return float(np.clip(utility_value / norm, 0.0, 1.0))


def quasiconcavity_probe(ctx, i, m, phi, row_a, row_b, samples=200, tol=1e-9):
    """Sample U_i along a segment of i's class-m strategy row and report
    whether the sequence is unimodal (rises, then falls)."""
    row_a = np.asarray(row_a, dtype=float)
    row_b = np.asarray(row_b, dtype=float)
    vals = []
    base = np.array(phi)
    for t in np.linspace(0.0, 1.0, samples):
        base[m, i, :] = (1.0 - t) * row_a + t * row_b
        vals.append(utility(ctx, base, i))
    return is_unimodal(vals, tol)


def is_unimodal(values, tol=1e-9):
    """True when the sequence rises then falls, with |diff| <= tol as a tie."""
    seen_fall = False
    for prev, cur in zip(values, values[1:]):
        d = cur - prev
        if d > tol and seen_fall:
            return False
        if d < -tol:
            seen_fall = True
    return True
