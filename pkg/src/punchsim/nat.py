"""Stateful NAT/firewall device model.

Implements the RFC 4787-style behavior taxonomy: endpoint-independent vs
endpoint-dependent mapping, the three filtering levels, port allocation
policies, idle expiry of mappings, and two pathologies observed on real
gateways: denylisting of sources whose inbound traffic precedes any
outbound packet, and RST rejection of unsolicited TCP.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

from .kernel import RandomStream
from .packets import Endpoint, Packet, PacketKind

EPHEMERAL_START = 1024
PORT_SPACE = 65536


class MappingBehavior(Enum):
    EIM = "EIM"    # endpoint-independent
    ADM = "ADM"    # address-dependent
    APDM = "APDM"  # address-and-port-dependent


class FilteringBehavior(Enum):
    EIF = "EIF"
    ADF = "ADF"
    APDF = "APDF"


class PortAllocation(Enum):
    SEQUENTIAL = "sequential"
    RANDOM = "random"
    PRESERVE = "preserve-best-effort"


class Archetype(Enum):
    FULL_CONE = "FullCone"
    RESTRICTED_CONE = "RestrictedCone"
    PORT_RESTRICTED_CONE = "PortRestrictedCone"
    SYMMETRIC = "Symmetric"


class InboundAction(Enum):
    DELIVER = "deliver"
    DROP = "drop"
    REJECT_RST = "reject-rst"


class SessionTableFull(Exception):
    """Outbound packet dropped because the translation table is at
    capacity; distinct from a filtering drop."""


@dataclass
class NatConfig:
    mapping: MappingBehavior = MappingBehavior.EIM
    filtering: FilteringBehavior = FilteringBehavior.APDF
    port_alloc: PortAllocation = PortAllocation.RANDOM
    mapping_ttl: float = 30_000.0
    max_sessions: int = 65_536
    denylist_on_unsolicited: bool = False
    denylist_duration: float = 60_000.0
    rst_on_unsolicited_tcp: bool = False
    # Drop sources exceeding this many unsolicited probes per second
    # (scan-defense heuristic); None disables.
    scan_limit: Optional[int] = None
    # Inclusive allocation range; the full 16-bit space by default so the
    # uniform-port assumption behind birthday-collision math holds.
    port_range: tuple[int, int] = (0, PORT_SPACE - 1)

    def __post_init__(self):
        if self.mapping_ttl <= 0:
            raise ValueError("mapping_ttl must be positive")
        if self.max_sessions < 1:
            raise ValueError("max_sessions must be >= 1")


def archetype(config: NatConfig) -> Archetype:
    """Classify a config into the conventional NAT archetypes. Any
    endpoint-dependent mapping defeats address prediction regardless of
    filtering, so ADM and APDM both classify as Symmetric."""
    if config.mapping is not MappingBehavior.EIM:
        return Archetype.SYMMETRIC
    return {
        FilteringBehavior.EIF: Archetype.FULL_CONE,
        FilteringBehavior.ADF: Archetype.RESTRICTED_CONE,
        FilteringBehavior.APDF: Archetype.PORT_RESTRICTED_CONE,
    }[config.filtering]


@dataclass
class NatMapping:
    internal: Endpoint
    external: Endpoint
    key: tuple
    # Destination endpoint -> time the first packet toward it passed the
    # device. Filtering must not honor a contact before that instant.
    contacted: dict = field(default_factory=dict)
    created: float = 0.0
    last_activity: float = 0.0
    static: bool = False  # pre-installed port mapping: EIF-like, never expires

    def contacted_host_since(self, host: str) -> Optional[float]:
        times = [t for ep, t in self.contacted.items() if ep.host == host]
        return min(times) if times else None


class NatState:
    """A single NAT device: translation table plus denylist.

    Owned by one simulation instance; all times are the virtual clock of
    that instance, taken at the moment the packet passes the device.
    """

    def __init__(self, config: NatConfig, public_host: str, rng: RandomStream):
        self.config = config
        self.public_host = public_host
        self.rng = rng
        self._by_key: dict[tuple, NatMapping] = {}
        self._by_port: dict[int, NatMapping] = {}
        self.denylist: dict[str, float] = {}
        self.next_sequential_port = 40_000
        self._scan_counts: dict[str, tuple[float, int]] = {}

    # -- mapping bookkeeping -------------------------------------------------

    def _mapping_key(self, internal: Endpoint, dst: Endpoint) -> tuple:
        mode = self.config.mapping
        if mode is MappingBehavior.EIM:
            return (internal,)
        if mode is MappingBehavior.ADM:
            return (internal, dst.host)
        return (internal, dst)

    def _expired(self, m: NatMapping, now: float) -> bool:
        return not m.static and now - m.last_activity > self.config.mapping_ttl

    def _drop_mapping(self, m: NatMapping) -> None:
        self._by_key.pop(m.key, None)
        self._by_port.pop(m.external.port, None)

    def _alloc_port(self, internal: Endpoint) -> int:
        policy = self.config.port_alloc
        if policy is PortAllocation.PRESERVE and internal.port not in self._by_port:
            return internal.port
        lo, hi = self.config.port_range
        if policy is PortAllocation.SEQUENTIAL:
            port = self.next_sequential_port
            while port in self._by_port:
                port = lo if port >= hi else port + 1
            self.next_sequential_port = lo if port >= hi else port + 1
            return port
        # RANDOM, and the PRESERVE fallback
        while True:
            port = self.rng.randint(lo, hi)
            if port not in self._by_port:
                return port

    def session_count(self) -> int:
        return sum(1 for m in self._by_port.values() if not m.static)

    def install_static_mapping(self, internal: Endpoint, external_port: int) -> NatMapping:
        """Pre-installed port mapping (UPnP/PMP analogue): fixed external
        port, endpoint-independent filtering, no expiry."""
        external = Endpoint(self.public_host, external_port)
        m = NatMapping(internal=internal, external=external,
                       key=("static", internal, external_port), static=True)
        self._by_port[external_port] = m
        self._by_key[m.key] = m
        return m

    # -- data path -----------------------------------------------------------

    def process_outbound(self, pkt: Packet, now: float) -> Packet:
        """Translate an outbound packet, creating or refreshing the mapping
        selected by the configured mapping behavior.

        Raises SessionTableFull when no matching mapping exists and the
        table is at max_sessions.
        """
        key = self._mapping_key(pkt.src, pkt.dst)
        m = self._by_key.get(key)
        if m is not None and self._expired(m, now):
            self._drop_mapping(m)
            m = None
        if m is None:
            # A static mapping for the same internal endpoint carries
            # outbound traffic too (the router keeps the forwarded port).
            static = self._by_key.get(("static", pkt.src, pkt.src.port))
            if static is not None:
                m = static
            else:
                if self.session_count() >= self.config.max_sessions:
                    raise SessionTableFull(str(pkt.src))
                port = self._alloc_port(pkt.src)
                m = NatMapping(internal=pkt.src,
                               external=Endpoint(self.public_host, port),
                               key=key, created=now, last_activity=now)
                self._by_key[key] = m
                self._by_port[port] = m
        m.contacted.setdefault(pkt.dst, now)
        m.last_activity = max(m.last_activity, now)
        return Packet(src=m.external, dst=pkt.dst, kind=pkt.kind,
                      ttl=pkt.ttl, size_bytes=pkt.size_bytes, tag=pkt.tag)

    def _note_unsolicited(self, pkt: Packet, now: float) -> InboundAction:
        cfg = self.config
        if cfg.scan_limit is not None:
            start, count = self._scan_counts.get(pkt.src.host, (now, 0))
            if now - start > 1000.0:
                start, count = now, 0
            count += 1
            self._scan_counts[pkt.src.host] = (start, count)
            if count > cfg.scan_limit:
                self.denylist[pkt.src.host] = now + cfg.denylist_duration
                return InboundAction.DROP
        if cfg.denylist_on_unsolicited:
            self.denylist[pkt.src.host] = now + cfg.denylist_duration
        if cfg.rst_on_unsolicited_tcp and pkt.kind.is_tcp and pkt.kind is not PacketKind.TCP_RST:
            return InboundAction.REJECT_RST
        return InboundAction.DROP

    def process_inbound(self, pkt: Packet, now: float) -> tuple[InboundAction, Optional[Packet]]:
        """Filter an inbound packet addressed to this device's public host.

        Returns (DELIVER, translated packet), (DROP, None), or
        (REJECT_RST, None).
        """
        expiry = self.denylist.get(pkt.src.host)
        if expiry is not None:
            if expiry > now:
                return InboundAction.DROP, None
            del self.denylist[pkt.src.host]

        m = self._by_port.get(pkt.dst.port)
        if m is not None and (self._expired(m, now) or m.created > now):
            if self._expired(m, now):
                self._drop_mapping(m)
            m = None
        if m is None:
            return self._note_unsolicited(pkt, now), None

        if not m.static:
            filt = self.config.filtering
            if filt is FilteringBehavior.ADF:
                since = m.contacted_host_since(pkt.src.host)
                if since is None or since > now:
                    return self._note_unsolicited(pkt, now), None
            if filt is FilteringBehavior.APDF:
                since = m.contacted.get(pkt.src)
                if since is None or since > now:
                    return self._note_unsolicited(pkt, now), None

        m.last_activity = max(m.last_activity, now)
        return InboundAction.DELIVER, Packet(
            src=pkt.src, dst=m.internal, kind=pkt.kind,
            ttl=pkt.ttl, size_bytes=pkt.size_bytes, tag=pkt.tag)

    def expire(self, now: float) -> None:
        """Drop idle mappings and elapsed denylist entries. Mapping idle
        strictly longer than the TTL is removed; a denylist entry is
        removed at its expiry time inclusive."""
        for m in [m for m in self._by_port.values() if self._expired(m, now)]:
            self._drop_mapping(m)
        self.denylist = {h: t for h, t in self.denylist.items() if t > now}
