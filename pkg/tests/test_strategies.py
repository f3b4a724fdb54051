import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from punchsim.kernel import RandomStream, Topology
from punchsim.nat import (FilteringBehavior, MappingBehavior, NatConfig,
                          NatState, PortAllocation)
from punchsim.packets import Endpoint
from punchsim.strategies import (BirthdayPlan, BirthdayScenario,
                                 PrimingConfigError, assign_roles,
                                 birthday_probability, birthday_punch,
                                 both_edm_pair_share, check_priming_ttl,
                                 dial_arrival_skew, expected_gain,
                                 mixed_pair_share, refined_wait_time)


def edm_nat(space, seed, label="edm"):
    cfg = NatConfig(mapping=MappingBehavior.APDM,
                    filtering=FilteringBehavior.APDF,
                    port_alloc=PortAllocation.RANDOM,
                    port_range=(0, space - 1))
    return NatState(cfg, public_host=f"{label}#nat",
                    rng=RandomStream(seed, f"nat/{label}"))


class TestBirthdayOracle:
    def test_mixed_exhaustive_space_is_certain(self):
        plan = BirthdayPlan(m_open=16, k_probe=240, port_space=256)
        assert birthday_probability(plan) == 1.0

    def test_mixed_single_probe_is_m_over_s(self):
        plan = BirthdayPlan(m_open=7, k_probe=1, port_space=256)
        assert math.isclose(birthday_probability(plan), 7 / 256,
                            rel_tol=1e-9)

    def test_both_edm_single_pair(self):
        plan = BirthdayPlan(m_open=1, k_probe=1, port_space=256,
                            scenario=BirthdayScenario.EDM_VS_EDM)
        assert math.isclose(birthday_probability(plan), 1 / 256 ** 2,
                            rel_tol=1e-9)

    def test_out_of_range_plans_rejected(self):
        with pytest.raises(ValueError):
            BirthdayPlan(m_open=0, k_probe=1)
        with pytest.raises(ValueError):
            BirthdayPlan(m_open=1, k_probe=70_000)

    @given(m=st.integers(1, 200), k=st.integers(1, 200),
           scenario=st.sampled_from(list(BirthdayScenario)))
    def test_probability_is_a_probability(self, m, k, scenario):
        p = birthday_probability(BirthdayPlan(m, k, 1024, scenario))
        assert 0.0 <= p <= 1.0

    @given(m=st.integers(1, 199), k=st.integers(1, 200),
           scenario=st.sampled_from(list(BirthdayScenario)))
    def test_monotone_in_openings(self, m, k, scenario):
        lo = birthday_probability(BirthdayPlan(m, k, 1024, scenario))
        hi = birthday_probability(BirthdayPlan(m + 1, k, 1024, scenario))
        assert hi >= lo - 1e-12

    @given(m=st.integers(1, 200), k=st.integers(1, 199),
           scenario=st.sampled_from(list(BirthdayScenario)))
    def test_monotone_in_probes(self, m, k, scenario):
        lo = birthday_probability(BirthdayPlan(m, k, 1024, scenario))
        hi = birthday_probability(BirthdayPlan(m, k + 1, 1024, scenario))
        assert hi >= lo - 1e-12

    @given(m=st.integers(1, 64), k=st.integers(1, 64))
    def test_both_edm_never_beats_mixed(self, m, k):
        mixed = birthday_probability(BirthdayPlan(m, k, 1024))
        both = birthday_probability(
            BirthdayPlan(m, k, 1024, BirthdayScenario.EDM_VS_EDM))
        assert both <= mixed + 1e-12


class TestBirthdayMonteCarlo:
    def test_mixed_small_space_matches_oracle(self):
        space, m, k, n = 256, 16, 16, 4_000
        plan = BirthdayPlan(m_open=m, k_probe=k, port_space=space)
        expected = birthday_probability(plan)
        peer = Endpoint("peer", 4242)
        hits = 0
        for i in range(n):
            nat = edm_nat(space, seed=101, label=f"e{i}")
            hits += birthday_punch(plan, nat, "edm-host", peer,
                                   RandomStream(101, f"mc/{i}"))
        rate = hits / n
        sigma = math.sqrt(expected * (1 - expected) / n)
        assert abs(rate - expected) < 4 * sigma

    def test_both_edm_small_space_matches_oracle(self):
        space, m, k, n = 64, 32, 32, 4_000
        plan = BirthdayPlan(m_open=m, k_probe=k, port_space=space,
                            scenario=BirthdayScenario.EDM_VS_EDM)
        expected = birthday_probability(plan)
        hits = 0
        for i in range(n):
            nat = edm_nat(space, seed=202, label=f"e{i}")
            prober = edm_nat(space, seed=202, label=f"p{i}")
            hits += birthday_punch(plan, nat, "edm-host",
                                   Endpoint(prober.public_host, 0),
                                   RandomStream(202, f"mc/{i}"),
                                   prober_nat=prober, prober_host="prober")
        rate = hits / n
        sigma = math.sqrt(expected * (1 - expected) / n)
        assert abs(rate - expected) < 4 * sigma

    def test_port_space_mismatch_rejected(self):
        plan = BirthdayPlan(m_open=4, k_probe=4, port_space=128)
        nat = edm_nat(256, seed=1)
        with pytest.raises(ValueError):
            birthday_punch(plan, nat, "edm-host", Endpoint("peer", 1),
                           RandomStream(1, "mc"))


class TestGainArithmetic:
    def test_pair_shares(self):
        assert math.isclose(mixed_pair_share(0.11), 0.1958, rel_tol=1e-9)
        assert math.isclose(both_edm_pair_share(0.11), 0.0121, rel_tol=1e-9)

    @given(p=st.floats(0.0, 1.0))
    def test_pair_shares_partition_consistently(self, p):
        # mixed + both-EDM + both-EIM shares cover all pairings.
        total = mixed_pair_share(p) + both_edm_pair_share(p) + (1 - p) ** 2
        assert math.isclose(total, 1.0, abs_tol=1e-9)

    def test_expected_gain_rejects_non_probabilities(self):
        with pytest.raises(ValueError):
            expected_gain(1.5, 0.5)
        with pytest.raises(ValueError):
            expected_gain(0.5, -0.1)


class TestRefinedWait:
    def test_reduces_to_half_rtt_when_symmetric(self):
        assert refined_wait_time(100.0, 20.0, 20.0) == 50.0

    def test_clamped_at_zero(self):
        assert refined_wait_time(10.0, 0.0, 100.0) == 0.0

    def test_negative_inputs_rejected(self):
        with pytest.raises(ValueError):
            refined_wait_time(-1.0, 1.0, 1.0)

    @settings(max_examples=200)
    @given(leg_l=st.floats(0.0, 50.0), leg_i=st.floats(0.0, 50.0),
           relay_ow=st.floats(0.1, 200.0))
    def test_skew_never_worse_than_baseline(self, leg_l, leg_i, relay_ow):
        topo = Topology()
        topo.add_host("listener", 10.0, 0.0, nat_leg=leg_l)
        topo.add_host("initiator", 10.0, 0.0, nat_leg=leg_i)
        rtt = 2.0 * relay_ow
        refined = refined_wait_time(rtt, 2.0 * leg_l, 2.0 * leg_i)
        skew_refined = dial_arrival_skew(topo, "initiator", "listener",
                                         refined, relay_ow)
        skew_base = dial_arrival_skew(topo, "initiator", "listener",
                                      rtt / 2.0, relay_ow)
        assert skew_refined <= skew_base + 1e-9


class TestRolesAndPriming:
    def test_role_alternation(self):
        base = ("listener", "initiator")
        assert assign_roles(1, base) == base
        assert assign_roles(2, base) == ("initiator", "listener")
        assert assign_roles(3, base) == base

    def test_invalid_attempt_index(self):
        with pytest.raises(ValueError):
            assign_roles(0, ("a", "b"))

    def test_priming_ttl_guard(self):
        topo = Topology()
        topo.add_host("a", 10.0, 0.0)
        topo.add_host("b", 10.0, 0.0)
        check_priming_ttl(topo, "a", "b", ttl=3)  # below default 6 hops
        with pytest.raises(PrimingConfigError):
            check_priming_ttl(topo, "a", "b", ttl=6)
