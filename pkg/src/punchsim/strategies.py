"""Pluggable traversal strategies: birthday-paradox probing with an
analytic oracle, refined asymmetric wait time, role alternation on
retries, and low-TTL NAT priming."""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Optional

from .kernel import RandomStream, Topology
from .nat import InboundAction, NatState, SessionTableFull
from .packets import Endpoint, Packet, PacketKind

DEFAULT_PORT_SPACE = 65_536
PROBE_WINDOW_MS = 500.0


class BirthdayScenario(Enum):
    EDM_VS_EIM = "mixed"
    EDM_VS_EDM = "both-edm"


@dataclass
class BirthdayPlan:
    m_open: int
    k_probe: int
    port_space: int = DEFAULT_PORT_SPACE
    scenario: BirthdayScenario = BirthdayScenario.EDM_VS_EIM

    def __post_init__(self):
        if not 1 <= self.m_open <= self.port_space:
            raise ValueError("m_open out of range")
        if not 1 <= self.k_probe <= self.port_space:
            raise ValueError("k_probe out of range")


def _log_comb(n: int, k: int) -> float:
    if k < 0 or k > n:
        return float("-inf")
    return math.lgamma(n + 1) - math.lgamma(k + 1) - math.lgamma(n - k + 1)


def birthday_probability(plan: BirthdayPlan) -> float:
    """Analytic collision probability for a birthday-style punch.

    Mixed case (one endpoint-dependent mapper): the k distinct probed
    ports must intersect the m randomly mapped ports, an exact
    hypergeometric tail computed in log-space.

    Both-EDM case: each of the k*m (probe, opening) pairs must hit a
    specific source/destination port pair, independent with probability
    1/S^2 under the uniform-allocation model.
    """
    s, m, k = plan.port_space, plan.m_open, plan.k_probe
    if plan.scenario is BirthdayScenario.EDM_VS_EIM:
        if k > s - m:
            return 1.0
        log_miss = _log_comb(s - m, k) - _log_comb(s, k)
        return -math.expm1(log_miss)
    return -math.expm1(k * m * math.log1p(-1.0 / (s * s)))


def expected_gain(edm_share: float, mixed_success: float) -> float:
    """Expected overall success-rate improvement from applying birthday
    probing to the mixed EDM/EIM share of peer pairings."""
    if not 0.0 <= edm_share <= 1.0 or not 0.0 <= mixed_success <= 1.0:
        raise ValueError("inputs must be probabilities")
    return mixed_pair_share(edm_share) * mixed_success


def mixed_pair_share(edm_share: float) -> float:
    return 2.0 * edm_share * (1.0 - edm_share)


def both_edm_pair_share(edm_share: float) -> float:
    return edm_share * edm_share


def refined_wait_time(rtt_listener_initiator: float, rtt_listener_nat: float,
                      rtt_initiator_nat: float) -> float:
    """Asymmetry-corrected synchronization delay before the initiator's
    dial, clamped at zero; reduces to half the peer RTT when both access
    legs are equal."""
    if min(rtt_listener_initiator, rtt_listener_nat, rtt_initiator_nat) < 0:
        raise ValueError("RTT inputs must be non-negative")
    t = 0.5 * (rtt_listener_initiator + rtt_listener_nat - rtt_initiator_nat)
    return max(0.0, t)


def assign_roles(attempt_index: int, base: tuple) -> tuple:
    """Role assignment for a retry: odd attempts keep the base
    assignment, even attempts swap it."""
    if attempt_index not in (1, 2, 3):
        raise ValueError("attempt_index must be 1..3")
    return base if attempt_index % 2 == 1 else (base[1], base[0])


def dial_arrival_skew(topology: Topology, initiator: str, listener: str,
                      wait_ms: float, relay_one_way_ms: float) -> float:
    """Absolute difference between the times the two synchronized dials
    pass their own NATs, given the initiator waits ``wait_ms`` after
    sending its go signal through a relay path with the given one-way
    latency. Zero means the dials cross symmetrically."""
    t_pass_initiator = wait_ms + topology.leg(initiator)
    t_pass_listener = relay_one_way_ms + topology.leg(listener)
    return abs(t_pass_initiator - t_pass_listener)


class PrimingConfigError(ValueError):
    """Low-TTL priming packets would reach the remote NAT."""


def check_priming_ttl(topology: Topology, from_host: str, to_host: str,
                      ttl: int) -> None:
    if ttl >= topology.hop_distance(from_host, to_host):
        raise PrimingConfigError(
            f"ttl={ttl} reaches the remote side at hop distance "
            f"{topology.hop_distance(from_host, to_host)}")


def birthday_punch(plan: BirthdayPlan, edm_nat: NatState, edm_host: str,
                   peer_external: Endpoint, rng: RandomStream,
                   prober_nat: Optional[NatState] = None,
                   prober_host: str = "prober", now: float = 0.0) -> bool:
    """Execute one birthday-style punch against a NAT with random port
    allocation and report whether any probe landed.

    The EDM side opens ``m_open`` outbound mappings from distinct internal
    ports; the other side probes ``k_probe`` distinct uniformly random
    ports on the EDM side's public host. The punch succeeds iff a probe
    hits an active mapping whose filtering admits it.

    In the both-EDM scenario the EDM side must guess the peer's mapped
    port, so each opening targets a uniformly random port, and the probes
    themselves leave through the prober's own endpoint-dependent NAT.
    """
    lo, hi = edm_nat.config.port_range
    if hi - lo + 1 != plan.port_space:
        raise ValueError("plan port_space does not match the NAT's range")
    both_edm = plan.scenario is BirthdayScenario.EDM_VS_EDM

    for i in range(plan.m_open):
        if both_edm:
            target = Endpoint(peer_external.host, rng.randint(lo, hi))
        else:
            target = peer_external
        pkt = Packet(src=Endpoint(edm_host, 20_000 + i), dst=target,
                     kind=PacketKind.UDP_DATAGRAM)
        edm_nat.process_outbound(pkt, now)  # SessionTableFull propagates

    probe_ports = rng.sample(range(lo, hi + 1), plan.k_probe)
    for j, dst_port in enumerate(probe_ports):
        dst = Endpoint(edm_nat.public_host, dst_port)
        if prober_nat is not None:
            inner = Packet(src=Endpoint(prober_host, 30_000 + j), dst=dst,
                           kind=PacketKind.UDP_DATAGRAM)
            probe = prober_nat.process_outbound(inner, now)
        else:
            probe = Packet(src=peer_external, dst=dst,
                           kind=PacketKind.UDP_DATAGRAM)
        action, _ = edm_nat.process_inbound(probe, now)
        if action is InboundAction.DELIVER:
            return True
    return False
