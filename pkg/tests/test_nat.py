import pytest

from punchsim.kernel import RandomStream
from punchsim.nat import (Archetype, FilteringBehavior, InboundAction,
                          MappingBehavior, NatConfig, NatState,
                          PortAllocation, SessionTableFull, archetype)
from punchsim.packets import Endpoint, Packet, PacketKind


def make_nat(**kwargs):
    cfg = NatConfig(**kwargs)
    return NatState(cfg, public_host="pub", rng=RandomStream(11, "nat"))


def udp(src, dst, **kw):
    return Packet(src=src, dst=dst, kind=PacketKind.UDP_DATAGRAM, **kw)


INT = Endpoint("lan", 5000)
DST1 = Endpoint("x", 443)
DST2 = Endpoint("y", 443)
DST1B = Endpoint("x", 8443)


class TestMapping:
    def test_eim_reuses_external_across_destinations(self):
        nat = make_nat(mapping=MappingBehavior.EIM)
        p1 = nat.process_outbound(udp(INT, DST1), 0.0)
        p2 = nat.process_outbound(udp(INT, DST2), 1.0)
        assert p1.src == p2.src

    def test_apdm_distinct_ports_per_destination_endpoint(self):
        nat = make_nat(mapping=MappingBehavior.APDM)
        p1 = nat.process_outbound(udp(INT, DST1), 0.0)
        p2 = nat.process_outbound(udp(INT, DST1B), 1.0)
        assert p1.src.port != p2.src.port

    def test_adm_keyed_by_destination_host(self):
        nat = make_nat(mapping=MappingBehavior.ADM)
        p1 = nat.process_outbound(udp(INT, DST1), 0.0)
        p1b = nat.process_outbound(udp(INT, DST1B), 1.0)
        p2 = nat.process_outbound(udp(INT, DST2), 2.0)
        assert p1.src == p1b.src
        assert p1.src.port != p2.src.port

    def test_sequential_allocation(self):
        nat = make_nat(port_alloc=PortAllocation.SEQUENTIAL,
                       mapping=MappingBehavior.APDM)
        p1 = nat.process_outbound(udp(INT, DST1), 0.0)
        p2 = nat.process_outbound(udp(INT, DST2), 1.0)
        assert (p1.src.port, p2.src.port) == (40_000, 40_001)

    def test_preserve_best_effort(self):
        nat = make_nat(port_alloc=PortAllocation.PRESERVE)
        p1 = nat.process_outbound(udp(INT, DST1), 0.0)
        assert p1.src.port == INT.port
        other = Endpoint("lan2", 5000)
        p2 = nat.process_outbound(udp(other, DST1), 1.0)
        assert p2.src.port != 5000

    def test_session_table_full_is_distinct_signal(self):
        nat = make_nat(mapping=MappingBehavior.APDM, max_sessions=1)
        nat.process_outbound(udp(INT, DST1), 0.0)
        with pytest.raises(SessionTableFull):
            nat.process_outbound(udp(INT, DST2), 1.0)


class TestFiltering:
    def _mapped(self, filtering):
        nat = make_nat(filtering=filtering)
        out = nat.process_outbound(udp(INT, DST1), 0.0)
        return nat, out.src

    def test_full_cone_admits_any_source(self):
        nat, ext = self._mapped(FilteringBehavior.EIF)
        action, pkt = nat.process_inbound(udp(Endpoint("stranger", 1), ext), 1.0)
        assert action is InboundAction.DELIVER
        assert pkt.dst == INT

    def test_adf_admits_contacted_host_any_port(self):
        nat, ext = self._mapped(FilteringBehavior.ADF)
        action, _ = nat.process_inbound(udp(Endpoint("x", 999), ext), 1.0)
        assert action is InboundAction.DELIVER

    def test_port_restricted_rejects_other_port_of_contacted_host(self):
        nat, ext = self._mapped(FilteringBehavior.APDF)
        action, _ = nat.process_inbound(udp(Endpoint("x", 999), ext), 1.0)
        assert action is InboundAction.DROP
        action, _ = nat.process_inbound(udp(DST1, ext), 1.0)
        assert action is InboundAction.DELIVER

    def test_filtering_monotonicity(self):
        # Any packet delivered under APDF is delivered under ADF, and any
        # under ADF is delivered under EIF.
        probes = [DST1, Endpoint("x", 999), Endpoint("stranger", 1)]
        admitted = {}
        for filt in (FilteringBehavior.APDF, FilteringBehavior.ADF,
                     FilteringBehavior.EIF):
            nat, ext = self._mapped(filt)
            admitted[filt] = {
                p for p in probes
                if nat.process_inbound(udp(p, ext), 1.0)[0] is InboundAction.DELIVER
            }
        assert admitted[FilteringBehavior.APDF] <= admitted[FilteringBehavior.ADF]
        assert admitted[FilteringBehavior.ADF] <= admitted[FilteringBehavior.EIF]

    def test_empty_table_drops_everything(self):
        nat = make_nat()
        action, _ = nat.process_inbound(udp(DST1, Endpoint("pub", 40_000)), 0.0)
        assert action is InboundAction.DROP

    def test_rst_on_unsolicited_tcp(self):
        nat = make_nat(rst_on_unsolicited_tcp=True)
        syn = Packet(src=DST1, dst=Endpoint("pub", 40_000), kind=PacketKind.TCP_SYN)
        action, _ = nat.process_inbound(syn, 0.0)
        assert action is InboundAction.REJECT_RST
        udp_pkt = udp(DST1, Endpoint("pub", 40_000))
        action, _ = nat.process_inbound(udp_pkt, 0.0)
        assert action is InboundAction.DROP


class TestDenylist:
    def test_unsolicited_udp_triggers_denylist(self):
        nat = make_nat(denylist_on_unsolicited=True, denylist_duration=5_000)
        action, _ = nat.process_inbound(udp(DST1, Endpoint("pub", 40_000)), 0.0)
        assert action is InboundAction.DROP
        # Legitimate exchange with that host now blocked until expiry.
        ext = nat.process_outbound(udp(INT, DST1), 1.0).src
        action, _ = nat.process_inbound(udp(DST1, ext), 2.0)
        assert action is InboundAction.DROP
        action, _ = nat.process_inbound(udp(DST1, ext), 5_000.0)
        assert action is InboundAction.DELIVER

    def test_denylist_entry_expires_inclusive(self):
        nat = make_nat(denylist_on_unsolicited=True, denylist_duration=1_000)
        nat.process_inbound(udp(DST1, Endpoint("pub", 40_000)), 0.0)
        assert "x" in nat.denylist
        nat.expire(1_000.0)
        assert "x" not in nat.denylist


class TestExpiry:
    def test_idle_mapping_removed_past_ttl(self):
        nat = make_nat(mapping_ttl=30_000)
        ext = nat.process_outbound(udp(INT, DST1), 0.0).src
        nat.expire(30_001.0)
        action, _ = nat.process_inbound(udp(DST1, ext), 30_001.0)
        assert action is InboundAction.DROP

    def test_refreshed_mapping_retained(self):
        nat = make_nat(mapping_ttl=30_000)
        nat.process_outbound(udp(INT, DST1), 0.0)
        ext = nat.process_outbound(udp(INT, DST1), 29_999.0).src
        nat.expire(30_000.0)
        action, _ = nat.process_inbound(udp(DST1, ext), 30_000.0)
        assert action is InboundAction.DELIVER

    def test_idle_exactly_ttl_retained(self):
        nat = make_nat(mapping_ttl=30_000)
        ext = nat.process_outbound(udp(INT, DST1), 0.0).src
        nat.expire(30_000.0)
        action, _ = nat.process_inbound(udp(DST1, ext), 30_000.0)
        assert action is InboundAction.DELIVER


class TestArchetype:
    @pytest.mark.parametrize("mapping,filtering,expected", [
        (MappingBehavior.EIM, FilteringBehavior.EIF, Archetype.FULL_CONE),
        (MappingBehavior.EIM, FilteringBehavior.ADF, Archetype.RESTRICTED_CONE),
        (MappingBehavior.EIM, FilteringBehavior.APDF, Archetype.PORT_RESTRICTED_CONE),
        (MappingBehavior.APDM, FilteringBehavior.APDF, Archetype.SYMMETRIC),
        (MappingBehavior.ADM, FilteringBehavior.EIF, Archetype.SYMMETRIC),
    ])
    def test_classification(self, mapping, filtering, expected):
        assert archetype(NatConfig(mapping=mapping, filtering=filtering)) is expected


def test_hole_punch_enabler():
    # After both peers behind port-restricted NATs send one packet to each
    # other's true external endpoints, traffic flows in both directions.
    nat_a = make_nat(filtering=FilteringBehavior.APDF)
    nat_b = NatState(NatConfig(filtering=FilteringBehavior.APDF), "pubB",
                     RandomStream(12, "nat"))
    int_a, int_b = Endpoint("lanA", 1000), Endpoint("lanB", 2000)
    # Learn externals via a rendezvous first.
    rendezvous = Endpoint("relay", 1)
    ext_a = nat_a.process_outbound(udp(int_a, rendezvous), 0.0).src
    ext_b = nat_b.process_outbound(udp(int_b, rendezvous), 0.0).src
    # Simultaneous outbound toward each other's externals.
    nat_a.process_outbound(udp(int_a, ext_b), 1.0)
    nat_b.process_outbound(udp(int_b, ext_a), 1.0)
    act_ab, _ = nat_b.process_inbound(udp(ext_a, ext_b), 2.0)
    act_ba, _ = nat_a.process_inbound(udp(ext_b, ext_a), 2.0)
    assert act_ab is InboundAction.DELIVER
    assert act_ba is InboundAction.DELIVER


def test_static_mapping_admits_unsolicited():
    nat = make_nat(filtering=FilteringBehavior.APDF)
    nat.install_static_mapping(INT, 6000)
    action, pkt = nat.process_inbound(udp(DST1, Endpoint("pub", 6000)), 0.0)
    assert action is InboundAction.DELIVER
    assert pkt.dst == INT
