import math

import pytest

from punchsim.kernel import (RandomStream, ScheduleInPastError, Simulation,
                             Topology, sample_latency)


def test_schedule_fires_once_at_time():
    sim = Simulation(seed=1)
    fired = []
    sim.schedule(lambda: fired.append(sim.now), 5.0)
    sim.run()
    assert fired == [5.0]


def test_tie_break_is_insertion_order():
    sim = Simulation(seed=1)
    order = []
    sim.schedule(lambda: order.append("a"), 5.0)
    sim.schedule(lambda: order.append("b"), 5.0)
    sim.run()
    assert order == ["a", "b"]


def test_schedule_in_past_rejected():
    sim = Simulation(seed=1)
    sim.schedule(lambda: None, 2.0)
    sim.run()
    assert sim.now == 2.0
    with pytest.raises(ScheduleInPastError):
        sim.schedule(lambda: None, 1.0)


def test_clock_monotone():
    sim = Simulation(seed=3)
    times = []
    for t in [7.0, 3.0, 3.0, 9.5]:
        sim.schedule(lambda: times.append(sim.now), t)
    sim.run()
    assert times == sorted(times)


def test_random_stream_reproducible():
    a = RandomStream(42, "latency")
    b = RandomStream(42, "latency")
    c = RandomStream(42, "other")
    seq_a = [a.random() for _ in range(10)]
    seq_b = [b.random() for _ in range(10)]
    seq_c = [c.random() for _ in range(10)]
    assert seq_a == seq_b
    assert seq_a != seq_c


def _topo():
    topo = Topology()
    topo.add_host("a", 10.0)
    topo.add_host("b", 20.0)
    return topo


def test_latency_degenerate_sum():
    topo = _topo()
    rng = RandomStream(1, "lat")
    assert sample_latency(topo, "a", "b", rng) == 30.0


def test_pair_override_precedence():
    topo = _topo()
    topo.pair_override[("a", "b")] = (50.0, 0.0)
    rng = RandomStream(1, "lat")
    assert sample_latency(topo, "a", "b", rng) == 50.0


def test_unknown_host_rejected():
    topo = _topo()
    with pytest.raises(KeyError):
        sample_latency(topo, "a", "zzz", RandomStream(1, "lat"))


def test_latency_distribution_moments():
    # Law-of-large-numbers check against the configured normal distribution.
    topo = Topology()
    topo.add_host("a", 50.0, 25.0)
    topo.add_host("b", 50.0, 25.0)
    rng = RandomStream(7, "lat")
    draws = [sample_latency(topo, "a", "b", rng) for _ in range(10_000)]
    mean = sum(draws) / len(draws)
    std = math.sqrt(sum((d - mean) ** 2 for d in draws) / (len(draws) - 1))
    assert abs(mean - 100.0) < 2.0
    assert abs(std - 50.0) < 3.0
