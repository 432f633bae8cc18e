"""Per-cloudlet processor slicing.

Splits a cloudlet's n_i servers into per-class pools so the worst latency
slack  t_u + T(mu, lam; n) - D_Q  over the classes is minimized.  The
min-max problem is solved through its epigraph form: bisection on the
worst slack Z, with an inner bisection giving the fewest servers each
class needs to reach a candidate Z (the slack is decreasing in the server
count, which is what makes both searches valid).
"""

from dataclasses import dataclass
from itertools import combinations

from .errors import InfeasibleAllocationError
from .queueing import LATENCY_SENTINEL, STABILITY_MARGIN, latency_or_sentinel

_Z_TOL = 1e-12
_N_TOL = 1e-10


@dataclass(frozen=True)
class SliceAllocation:
    """Per-class server counts plus the achieved worst slack Z (seconds)."""

    servers: tuple
    worst_slack: float


def _check_classes(classes):
    for m, (mu, lam, dq, tu) in enumerate(classes):
        if mu <= 0:
            raise ValueError(f"class {m}: service rate must be > 0, got {mu}")
        if lam < 0:
            raise ValueError(f"class {m}: arrival rate must be >= 0, got {lam}")
        if dq <= 0:
            raise ValueError(f"class {m}: QoS latency must be > 0, got {dq}")
        if tu < 0:
            raise ValueError(f"class {m}: user latency must be >= 0, got {tu}")


def slice_slack(spec, servers):
    """Latency slack of one class under a candidate server count."""
    mu, lam, dq, tu = spec
    return tu + latency_or_sentinel(servers, mu, lam) - dq


def _servers_needed(spec, z, n_cap):
    """Fewest servers in [1, n_cap] achieving slack <= z, or None."""
    if slice_slack(spec, n_cap) > z:
        return None
    if slice_slack(spec, 1.0) <= z:
        return 1.0
    lo, hi = 1.0, float(n_cap)
    while hi - lo > _N_TOL:
        mid = 0.5 * (lo + hi)
        if slice_slack(spec, mid) <= z:
            hi = mid
        else:
            lo = mid
    return hi


def _bisect_allocation(classes, budget):
    """Minimize the max slack of `classes` over a server budget.

    Returns (allocation list, achieved z).  Assumes every class can reach a
    finite slack with n_cap = budget - (M - 1) servers.
    """
    m_count = len(classes)
    n_cap = budget - (m_count - 1)
    z_lo = max(slice_slack(spec, n_cap) for spec in classes)
    z_hi = max(slice_slack(spec, budget / m_count) for spec in classes)
    if z_hi < z_lo:
        z_hi = z_lo
    while z_hi - z_lo > _Z_TOL + 1e-9 * abs(z_hi):
        z_mid = 0.5 * (z_lo + z_hi)
        needed = [_servers_needed(spec, z_mid, n_cap) for spec in classes]
        if all(n is not None for n in needed) and sum(needed) <= budget:
            z_hi = z_mid
        else:
            z_lo = z_mid
    alloc = [_servers_needed(spec, z_hi, n_cap) for spec in classes]
    if any(n is None for n in alloc):
        # fall back to the guaranteed-feasible endpoint
        z_hi = max(slice_slack(spec, budget / m_count) for spec in classes)
        alloc = [_servers_needed(spec, z_hi, n_cap) for spec in classes]
    return alloc, z_hi


def solve_slicing(total_servers, classes) -> SliceAllocation:
    """Optimal soft slicing of `total_servers` across job classes.

    `classes` is a sequence of (service_rate, arrival_rate, qos_latency,
    user_latency) tuples.  Classes that cannot be stabilized even when the
    rest of the federation-mandated minimum (1 server each) is respected
    keep the sentinel slack; the solver then minimizes the worst slack of
    the remaining classes.  Any leftover budget goes to the last class so
    the result is the lexicographically smallest optimum.
    """
    classes = [tuple(map(float, spec)) for spec in classes]
    _check_classes(classes)
    m_count = len(classes)
    if m_count == 0:
        raise ValueError("at least one job class required")
    total = float(total_servers)
    if total < m_count:
        raise InfeasibleAllocationError(
            f"{total_servers} servers cannot host {m_count} classes (need >= 1 each)"
        )

    stab = [max(1.0, spec[1] / (spec[0] * (1.0 - 2.0 * STABILITY_MARGIN))) for spec in classes]
    if sum(stab) <= total:
        alloc, _ = _bisect_allocation(classes, total)
    else:
        alloc = _allocate_with_sacrifices(classes, total, stab)

    leftover = total - sum(alloc)
    if leftover > 0:
        alloc[-1] += leftover
    slacks = [slice_slack(spec, n) for spec, n in zip(classes, alloc)]
    return SliceAllocation(servers=tuple(alloc), worst_slack=max(slacks))


def _allocate_with_sacrifices(classes, total, stab):
    """No allocation stabilizes every class: pick which classes stay
    unstable (fewest first, then best finite slack, then lexicographic)
    and optimize the rest."""
    m_count = len(classes)
    n_cap = total - (m_count - 1)
    hopeless = [m for m in range(m_count) if stab[m] > n_cap]
    best = None
    for size in range(max(1, len(hopeless)), m_count):
        for sac in combinations(range(m_count), size):
            if any(m not in sac for m in hopeless):
                continue
            keep = [m for m in range(m_count) if m not in sac]
            if not keep:
                continue
            budget = total - size
            if sum(max(1.0, stab[m]) for m in keep) > budget:
                continue
            sub_alloc, z = _bisect_allocation([classes[m] for m in keep], budget)
            key = (z, sac)
            if best is None or key < best[0]:
                alloc = [1.0] * m_count
                for m, n in zip(keep, sub_alloc):
                    alloc[m] = n
                best = (key, alloc)
        if best is not None:
            break
    if best is None:
        # every split leaves every class unstable; spread evenly
        return [total / m_count] * m_count
    return best[1]
