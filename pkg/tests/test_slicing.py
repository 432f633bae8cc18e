import numpy as np
import pytest

from cloudletlb.errors import InfeasibleAllocationError
from cloudletlb.queueing import latency_sentinel_vec
from cloudletlb.slicing import SliceAllocation, slice_slack, solve_slicing


def grid_oracle_m2(total, classes, step=1e-3):
    """1-D sweep over n1 for M=2; returns (best allocation, best objective)."""
    n1 = np.arange(1.0, total - 1.0 + step / 2, step)
    n2 = total - n1
    s1 = np.asarray(
        latency_sentinel_vec(n1, classes[0][0], classes[0][1])
        + classes[0][3]
        - classes[0][2]
    )
    s2 = np.asarray(
        latency_sentinel_vec(n2, classes[1][0], classes[1][1])
        + classes[1][3]
        - classes[1][2]
    )
    obj = np.maximum(s1, s2)
    k = int(np.argmin(obj))
    return (n1[k], n2[k]), obj[k]


def test_single_class_takes_everything():
    alloc = solve_slicing(10, [(250.0, 1200.0, 0.010, 0.002)])
    assert alloc.servers == (10.0,)
    assert alloc.worst_slack == pytest.approx(
        slice_slack((250.0, 1200.0, 0.010, 0.002), 10.0)
    )


def test_identical_classes_split_evenly():
    spec = (250.0, 900.0, 0.010, 0.002)
    alloc = solve_slicing(10, [spec, spec])
    assert alloc.servers[0] == pytest.approx(5.0, abs=1e-6)
    assert alloc.servers[1] == pytest.approx(5.0, abs=1e-6)
    assert sum(alloc.servers) == pytest.approx(10.0, abs=1e-9)


def test_two_class_matches_grid_oracle():
    classes = [(250.0, 1200.0, 0.010, 0.002), (200.0, 900.0, 0.020, 0.002)]
    (o1, o2), obj = grid_oracle_m2(10.0, classes)
    alloc = solve_slicing(10, classes)
    assert alloc.servers[0] == pytest.approx(o1, abs=1e-2)
    assert alloc.servers[1] == pytest.approx(o2, abs=1e-2)
    assert alloc.worst_slack <= obj + 1e-6
    assert abs(alloc.worst_slack - obj) <= 1e-4


def test_random_two_class_instances_against_oracle():
    rng = np.random.default_rng(5)
    for _ in range(25):
        total = float(rng.integers(3, 17))
        classes = []
        for _ in range(2):
            mu = rng.uniform(100.0, 400.0)
            lam = rng.uniform(0.0, 0.85) * mu * (total / 2)
            dq = rng.choice([0.010, 0.020, 0.040])
            classes.append((mu, lam, dq, 0.002))
        # keep the instance jointly stabilizable
        if sum(max(1.0, c[1] / c[0]) for c in classes) > 0.95 * total:
            continue
        (o1, o2), obj = grid_oracle_m2(total, classes)
        alloc = solve_slicing(total, classes)
        assert abs(alloc.worst_slack - obj) <= 1e-4
        assert sum(alloc.servers) == pytest.approx(total, abs=1e-9)
        assert min(alloc.servers) >= 1.0 - 1e-12


def test_three_class_global_minimum_against_coarse_grid():
    classes = [
        (250.0, 1100.0, 0.010, 0.002),
        (200.0, 700.0, 0.020, 0.002),
        (300.0, 1500.0, 0.040, 0.001),
    ]
    total = 14.0
    step = 0.02
    n1 = np.arange(1.0, total - 2.0, step)
    n2 = np.arange(1.0, total - 2.0, step)
    g1, g2 = np.meshgrid(n1, n2, indexing="ij")
    g3 = total - g1 - g2
    ok = g3 >= 1.0
    slacks = []
    for (mu, lam, dq, tu), g in zip(classes, (g1, g2, g3)):
        s = latency_sentinel_vec(np.where(ok, g, 1.0), mu, lam) + tu - dq
        slacks.append(np.where(ok, s, np.inf))
    obj = np.maximum.reduce(slacks)
    best = obj.min()
    alloc = solve_slicing(total, classes)
    assert alloc.worst_slack <= best + 1e-6
    assert abs(alloc.worst_slack - best) <= 1e-3


def test_monotone_in_class_rate():
    rng = np.random.default_rng(9)
    for _ in range(20):
        total = float(rng.integers(4, 13))
        mu1, mu2 = rng.uniform(150.0, 350.0, size=2)
        lam2 = rng.uniform(0.2, 0.6) * mu2 * total / 2
        dq1, dq2 = 0.010, 0.020
        base = rng.uniform(0.2, 0.5) * mu1 * total / 2
        prev = None
        for lam1 in np.linspace(base, 1.3 * base, 5):
            classes = [(mu1, lam1, dq1, 0.002), (mu2, lam2, dq2, 0.002)]
            if sum(max(1.0, c[1] / c[0]) for c in classes) > 0.9 * total:
                break
            got = solve_slicing(total, classes).servers[0]
            if prev is not None:
                # 1e-4 slack: flat-objective plateaus make the argmin only
                # solver-precision deterministic
                assert got >= prev - 1e-4
            prev = got


def test_unstable_class_keeps_sentinel_and_rest_optimized():
    # class 0 cannot be stabilized even with every spare server
    classes = [(10.0, 500.0, 0.010, 0.002), (200.0, 600.0, 0.020, 0.002)]
    alloc = solve_slicing(6, classes)
    assert sum(alloc.servers) == pytest.approx(6.0, abs=1e-9)
    assert alloc.worst_slack > 1e5  # sentinel-dominated
    # the stable class got enough servers to be stable
    mu2, lam2 = classes[1][0], classes[1][1]
    assert alloc.servers[1] * mu2 > lam2


def test_infeasible_and_domain_errors():
    with pytest.raises(InfeasibleAllocationError):
        solve_slicing(1, [(100.0, 10.0, 0.01, 0.0), (100.0, 10.0, 0.01, 0.0)])
    with pytest.raises(ValueError):
        solve_slicing(4, [(100.0, -5.0, 0.01, 0.0)])
    with pytest.raises(ValueError):
        solve_slicing(4, [(0.0, 5.0, 0.01, 0.0)])


def test_allocation_type_shape():
    alloc = solve_slicing(4, [(100.0, 50.0, 0.05, 0.001), (100.0, 80.0, 0.1, 0.001)])
    assert isinstance(alloc, SliceAllocation)
    assert len(alloc.servers) == 2
    for spec, n in zip(
        [(100.0, 50.0, 0.05, 0.001), (100.0, 80.0, 0.1, 0.001)], alloc.servers
    ):
        assert alloc.worst_slack >= slice_slack(spec, n) - 1e-9
