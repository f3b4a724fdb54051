"""Wire-level primitives shared by the NAT and transport layers."""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum


@dataclass(frozen=True, order=True)
class Endpoint:
    """A (host-id, port) pair; the unit NATs translate and filter on."""

    host: str
    port: int

    def __post_init__(self):
        if not self.host:
            raise ValueError("host must be non-empty")
        if not 0 <= self.port <= 65535:
            raise ValueError(f"port out of range: {self.port}")

    def __str__(self) -> str:
        return f"{self.host}:{self.port}"


class PacketKind(Enum):
    TCP_SYN = "TCP_SYN"
    TCP_SYNACK = "TCP_SYNACK"
    TCP_ACK = "TCP_ACK"
    TCP_RST = "TCP_RST"
    UDP_DATAGRAM = "UDP_DATAGRAM"
    QUIC_INITIAL = "QUIC_INITIAL"
    QUIC_REPLY = "QUIC_REPLY"

    @property
    def is_tcp(self) -> bool:
        return self in (PacketKind.TCP_SYN, PacketKind.TCP_SYNACK,
                        PacketKind.TCP_ACK, PacketKind.TCP_RST)


@dataclass
class Packet:
    """Simulated datagram/segment."""

    src: Endpoint
    dst: Endpoint
    kind: PacketKind
    ttl: int = 64
    size_bytes: int = 0
    tag: object = None

    def __post_init__(self):
        if self.ttl < 1:
            raise ValueError("ttl must be >= 1")
        if self.size_bytes < 0:
            raise ValueError("size_bytes must be >= 0")
