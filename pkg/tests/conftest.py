"""Shared instance builders for the test suite."""

import numpy as np

from cloudletlb.game import JobClass, make_context


def job_class(m=0, mu=1000.0, slot_multiple=2, slot=0.005, bits=1.6e6):
    return JobClass(
        id=m,
        service_rate=mu,
        qos_latency=slot_multiple * slot,
        slot_multiple=slot_multiple,
        bits_per_job=bits,
    )


def two_cloudlet_ctx(
    lam1=970.0,
    lam2=800.0,
    mu=1000.0,
    servers=1,
    t_u=0.002,
    t_12=0.001,
    slot=0.005,
    slot_multiple=2,
    prices=None,
    caps=1500.0,
    bandwidth=1e9,
    same_provider=False,
):
    """The two-cloudlet single-class scenario used throughout the paper-style
    experiments: capacity 1000 jobs/s each, one overloaded, one under-loaded."""
    prices = prices or {
        "revenue": 5e3,
        "offload": 3e4,
        "latency_penalty": 9e4,
        "mediator_penalty": 6e3,
    }
    return make_context(
        providers=["sp-a", "sp-a" if same_provider else "sp-b"],
        total_servers=[servers, servers],
        user_latency=[[t_u], [t_u]],
        classes=[job_class(0, mu=mu, slot_multiple=slot_multiple, slot=slot)],
        inter_latency=[[0.0, t_12], [t_12, 0.0]],
        bandwidth=[[bandwidth, bandwidth], [bandwidth, bandwidth]],
        rates=[[lam1], [lam2]],
        caps=[[caps], [caps]],
        prices=prices,
        slot=slot,
        interval=1.0,
        slices=[[float(servers)], [float(servers)]],
    )


def random_mixed_ctx(rng, n=3, m=1, price_scale=1.0):
    """Random federation with at least one overloaded and one under-loaded
    cloudlet per class; prices follow the reference ratios with jitter."""
    providers = [f"sp-{i}" for i in range(n)]
    slot = 0.005
    slot_mult = [int(rng.integers(2, 5)) for _ in range(m)]
    classes = [
        job_class(k, mu=float(rng.uniform(400.0, 1200.0)), slot_multiple=slot_mult[k], slot=slot)
        for k in range(m)
    ]
    servers = [int(rng.integers(m, m + 3)) for _ in range(n)]
    t_u = rng.uniform(0.001, 0.003, size=(n, m))
    t_ij = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            t_ij[i, j] = t_ij[j, i] = rng.uniform(0.0005, 0.001)
    slices = []
    rates = np.zeros((n, m))
    for i in range(n):
        per_class = np.full(m, servers[i] / m)
        slices.append(per_class)
        for k in range(m):
            cap = per_class[k] * classes[k].service_rate
            if i == 0:
                rates[i, k] = rng.uniform(1.02, 1.15) * cap  # overloaded
            elif i == 1:
                rates[i, k] = rng.uniform(0.45, 0.70) * cap  # spare capacity
            else:
                rates[i, k] = rng.uniform(0.3, 1.1) * cap
    caps = np.maximum(rates * 1.3, 1.2 * np.array([[s / m for s in servers]]).T
                      * np.array([[c.service_rate for c in classes]]))
    scale = price_scale * rng.uniform(0.5, 2.0)
    prices = {
        "revenue": 5e3 * scale,
        "offload": 3e4 * scale * rng.uniform(0.8, 1.2),
        "latency_penalty": 9e4 * scale * rng.uniform(0.8, 1.2),
        "mediator_penalty": 6e3 * scale * rng.uniform(0.8, 1.2),
    }
    return make_context(
        providers=providers,
        total_servers=servers,
        user_latency=t_u.tolist(),
        classes=classes,
        inter_latency=t_ij,
        bandwidth=np.full((n, n), 1e9),
        rates=rates,
        caps=caps,
        prices=prices,
        slot=slot,
        interval=float(np.lcm.reduce(slot_mult)) * slot * 20,
        slices=slices,
    )
