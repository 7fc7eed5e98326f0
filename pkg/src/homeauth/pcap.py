"""Classic libpcap file ingestion: Ethernet/IP/{TCP,UDP,ICMP} to PacketRecords.

Only the classic 24-byte-header format is handled (magic 0xa1b2c3d4,
microsecond resolution), in either byte order. Link type must be Ethernet.
UDP answers from port 53 are additionally mined for A/AAAA records to build
the IP -> FQDN map used for domain annotation.
"""

from __future__ import annotations

import socket
import struct
from dataclasses import dataclass, field

from . import DataError
from .ingest import DeviceRegistry, DnsMap, PacketRecord

PCAP_MAGIC = 0xA1B2C3D4
LINKTYPE_ETHERNET = 1

_ETHERTYPE_IPV4 = 0x0800
_ETHERTYPE_IPV6 = 0x86DD

# IP protocol numbers kept as records; everything else is counted and skipped.
_IP_PROTO = {6: "tcp", 17: "udp", 1: "icmp", 58: "icmp"}


class PcapError(DataError):
    """Fatal problem with the capture file itself."""


@dataclass
class PcapStats:
    """Counters reported by the convert command."""

    packets: int = 0
    records: int = 0
    dropped_unregistered: int = 0
    malformed: int = 0
    skipped_protocol: int = 0
    skipped_non_ip: int = 0
    dns_answers: int = 0

    def summary(self) -> str:
        return (
            f"packets={self.packets} records={self.records} "
            f"dropped_unregistered={self.dropped_unregistered} malformed={self.malformed} "
            f"skipped_protocol={self.skipped_protocol} skipped_non_ip={self.skipped_non_ip} "
            f"dns_answers={self.dns_answers}"
        )


def _mac_str(raw: bytes) -> str:
    return ":".join(f"{b:02x}" for b in raw)


def _read_dns_name(msg: bytes, offset: int) -> tuple[str, int]:
    """Decode a possibly-compressed DNS name; returns (name, next offset)."""
    labels = []
    jumps = 0
    next_offset = None
    while True:
        if offset >= len(msg):
            raise ValueError("name runs past message end")
        length = msg[offset]
        if length & 0xC0 == 0xC0:
            if offset + 1 >= len(msg):
                raise ValueError("truncated compression pointer")
            pointer = ((length & 0x3F) << 8) | msg[offset + 1]
            if next_offset is None:
                next_offset = offset + 2
            offset = pointer
            jumps += 1
            if jumps > 32:
                raise ValueError("compression pointer loop")
            continue
        offset += 1
        if length == 0:
            break
        if offset + length > len(msg):
            raise ValueError("label runs past message end")
        labels.append(msg[offset : offset + length].decode("ascii", errors="replace"))
        offset += length
    return ".".join(labels), (next_offset if next_offset is not None else offset)


def _mine_dns_answers(payload: bytes, ts: float, dnsmap: DnsMap) -> int:
    """Extract A/AAAA answers from one DNS response message.

    Addresses are mapped to the queried name rather than the answer owner, so
    CNAME chains still resolve to the domain the device asked for. Malformed
    messages are ignored.
    """
    if len(payload) < 12:
        return 0
    flags, qdcount, ancount = struct.unpack_from("!HHH", payload, 2)
    if not flags & 0x8000:  # not a response
        return 0
    try:
        offset = 12
        qname = None
        for _ in range(qdcount):
            name, offset = _read_dns_name(payload, offset)
            if qname is None:
                qname = name
            offset += 4  # qtype + qclass
        added = 0
        for _ in range(ancount):
            owner, offset = _read_dns_name(payload, offset)
            if offset + 10 > len(payload):
                break
            rtype, _rclass, _ttl, rdlength = struct.unpack_from("!HHIH", payload, offset)
            offset += 10
            rdata = payload[offset : offset + rdlength]
            if len(rdata) < rdlength:
                break
            offset += rdlength
            fqdn = qname or owner
            if not fqdn:
                continue
            if rtype == 1 and rdlength == 4:
                dnsmap.add(ts, socket.inet_ntop(socket.AF_INET, rdata), fqdn)
                added += 1
            elif rtype == 28 and rdlength == 16:
                dnsmap.add(ts, socket.inet_ntop(socket.AF_INET6, rdata), fqdn)
                added += 1
        return added
    except ValueError:
        return 0


def _parse_frame(data: bytes, ts: float, orig_len: int, registry: DeviceRegistry,
                 dnsmap: DnsMap, stats: PcapStats) -> PacketRecord | None:
    if len(data) < 14:
        stats.malformed += 1
        return None
    dst_mac = _mac_str(data[0:6])
    src_mac = _mac_str(data[6:12])
    ethertype = struct.unpack_from("!H", data, 12)[0]
    offset = 14

    if ethertype == _ETHERTYPE_IPV4:
        if len(data) < offset + 20:
            stats.malformed += 1
            return None
        ihl = (data[offset] & 0x0F) * 4
        if ihl < 20 or len(data) < offset + ihl:
            stats.malformed += 1
            return None
        proto_num = data[offset + 9]
        src_ip = socket.inet_ntop(socket.AF_INET, data[offset + 12 : offset + 16])
        dst_ip = socket.inet_ntop(socket.AF_INET, data[offset + 16 : offset + 20])
        l4_offset = offset + ihl
    elif ethertype == _ETHERTYPE_IPV6:
        if len(data) < offset + 40:
            stats.malformed += 1
            return None
        proto_num = data[offset + 6]
        src_ip = socket.inet_ntop(socket.AF_INET6, data[offset + 8 : offset + 24])
        dst_ip = socket.inet_ntop(socket.AF_INET6, data[offset + 24 : offset + 40])
        l4_offset = offset + 40
    else:
        stats.skipped_non_ip += 1
        return None

    protocol = _IP_PROTO.get(proto_num)
    if protocol is None:
        stats.skipped_protocol += 1
        return None

    src_port = dst_port = None
    if protocol in ("tcp", "udp"):
        if len(data) < l4_offset + 4:
            stats.malformed += 1
            return None
        src_port, dst_port = struct.unpack_from("!HH", data, l4_offset)
        if protocol == "udp" and src_port == 53:
            # DNS responses are mined regardless of MAC registration; the
            # record itself is still subject to the registry filter below.
            stats.dns_answers += _mine_dns_answers(data[l4_offset + 8 :], ts, dnsmap)

    # Direction comes solely from which side holds a registered MAC; if both
    # sides are registered the source device wins and one record is emitted.
    device = registry.lookup(src_mac)
    if device is not None:
        direction, remote_ip = "out", dst_ip
    else:
        device = registry.lookup(dst_mac)
        if device is not None:
            direction, remote_ip = "in", src_ip
        else:
            stats.dropped_unregistered += 1
            return None

    return PacketRecord(
        timestamp=ts,
        device=device,
        direction=direction,
        protocol=protocol,
        length=orig_len,
        src_port=src_port,
        dst_port=dst_port,
        remote_ip=remote_ip,
    )


def parse_pcap(path, registry: DeviceRegistry) -> tuple[list[PacketRecord], DnsMap, PcapStats]:
    """Parse a classic pcap file into records for registered devices.

    Returns the record list in capture order, the mined DNS map, and the
    drop/malformed counters. Raises PcapError for a bad global header or a
    non-Ethernet link type; truncated packets are skipped and counted.
    """
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 24:
        raise PcapError(f"{path}: truncated pcap global header ({len(blob)} bytes)")

    magic_le = struct.unpack_from("<I", blob, 0)[0]
    if magic_le == PCAP_MAGIC:
        endian = "<"
    elif struct.unpack_from(">I", blob, 0)[0] == PCAP_MAGIC:
        endian = ">"
    else:
        raise PcapError(f"{path}: bad magic 0x{magic_le:08x}; not a classic pcap file")

    linktype = struct.unpack_from(endian + "I", blob, 20)[0]
    if linktype != LINKTYPE_ETHERNET:
        raise PcapError(f"{path}: unsupported link type {linktype} (need Ethernet)")

    records: list[PacketRecord] = []
    dnsmap = DnsMap()
    stats = PcapStats()
    pkt_header = struct.Struct(endian + "IIII")
    offset = 24
    while offset < len(blob):
        if offset + 16 > len(blob):
            stats.malformed += 1
            break
        ts_sec, ts_usec, incl_len, orig_len = pkt_header.unpack_from(blob, offset)
        offset += 16
        if offset + incl_len > len(blob):
            stats.malformed += 1
            break
        stats.packets += 1
        frame = blob[offset : offset + incl_len]
        offset += incl_len
        ts = ts_sec + ts_usec / 1e6
        rec = _parse_frame(frame, ts, orig_len, registry, dnsmap, stats)
        if rec is not None:
            records.append(rec)
            stats.records += 1
    return records, dnsmap, stats
