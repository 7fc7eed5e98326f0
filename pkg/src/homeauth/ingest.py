"""Canonical packet records, the device registry, and DNS-based domain resolution.

The interchange format for packet metadata is JSONL, one object per line with
the exact field names of :class:`PacketRecord`. Binary captures are converted
into this format by :mod:`homeauth.pcap`.
"""

from __future__ import annotations

import bisect
import json
import math
import re
from dataclasses import dataclass, replace
from typing import Iterable, Iterator

from . import DataError

OUTGOING = "out"
INCOMING = "in"
DIRECTIONS = (OUTGOING, INCOMING)
PROTOCOLS = ("tcp", "udp", "icmp")

#: Domain value used when no DNS mapping is known for a remote address.
UNKNOWN_DOMAIN = "unknown"

#: Two-label public suffixes under which a third label is kept.
DEFAULT_SUFFIX_EXCEPTIONS = frozenset(
    {"co.uk", "ac.uk", "gov.uk", "co.jp", "co.nz", "com.au", "com.br", "co.in"}
)

_MAC_RE = re.compile(r"^[0-9a-f]{2}(:[0-9a-f]{2}){5}$")


@dataclass(frozen=True, slots=True)
class PacketRecord:
    """Header metadata of one transport-layer packet of a registered device."""

    timestamp: float
    device: str
    direction: str
    protocol: str
    length: int
    src_port: int | None
    dst_port: int | None
    remote_ip: str
    domain: str = UNKNOWN_DOMAIN

    def to_dict(self) -> dict:
        return {
            "timestamp": self.timestamp,
            "device": self.device,
            "direction": self.direction,
            "protocol": self.protocol,
            "length": self.length,
            "src_port": self.src_port,
            "dst_port": self.dst_port,
            "remote_ip": self.remote_ip,
            "domain": self.domain,
        }


def _check_port(value, field: str) -> int | None:
    if value is None:
        return None
    if isinstance(value, bool) or not isinstance(value, int):
        raise DataError(f"field '{field}': expected integer port or null, got {value!r}")
    if not 0 <= value <= 65535:
        raise DataError(f"field '{field}': port {value} outside [0, 65535]")
    return value


def record_from_dict(obj: dict) -> PacketRecord:
    """Validate one JSONL object and build a PacketRecord from it."""
    if not isinstance(obj, dict):
        raise DataError("field '<root>': expected a JSON object")
    for name in ("timestamp", "device", "direction", "protocol", "length", "remote_ip"):
        if name not in obj:
            raise DataError(f"field '{name}': missing")

    ts = obj["timestamp"]
    if isinstance(ts, bool) or not isinstance(ts, (int, float)) or not math.isfinite(ts):
        raise DataError(f"field 'timestamp': expected finite number, got {ts!r}")
    device = obj["device"]
    if not isinstance(device, str) or not device:
        raise DataError(f"field 'device': expected non-empty string, got {device!r}")
    direction = obj["direction"]
    if direction not in DIRECTIONS:
        raise DataError(f"field 'direction': expected one of {DIRECTIONS}, got {direction!r}")
    protocol = obj["protocol"]
    if protocol not in PROTOCOLS:
        raise DataError(f"field 'protocol': expected one of {PROTOCOLS}, got {protocol!r}")
    length = obj["length"]
    if isinstance(length, bool) or not isinstance(length, int) or length < 0:
        raise DataError(f"field 'length': expected non-negative integer, got {length!r}")
    src_port = _check_port(obj.get("src_port"), "src_port")
    dst_port = _check_port(obj.get("dst_port"), "dst_port")
    if protocol == "icmp" and (src_port is not None or dst_port is not None):
        raise DataError("field 'src_port': ports must be null for icmp")
    remote_ip = obj["remote_ip"]
    if not isinstance(remote_ip, str) or not remote_ip:
        raise DataError(f"field 'remote_ip': expected non-empty string, got {remote_ip!r}")
    domain = obj.get("domain", UNKNOWN_DOMAIN)
    if not isinstance(domain, str) or not domain:
        raise DataError(f"field 'domain': expected non-empty string, got {domain!r}")

    return PacketRecord(
        timestamp=float(ts),
        device=device,
        direction=direction,
        protocol=protocol,
        length=length,
        src_port=src_port,
        dst_port=dst_port,
        remote_ip=remote_ip,
        domain=domain,
    )


def read_records(path) -> Iterator[PacketRecord]:
    """Stream PacketRecords from a JSONL file, in file order.

    Raises DataError naming the line number and offending field on the first
    invalid line. Timestamps are not required to be sorted here.
    """
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"line {lineno}: invalid JSON: {exc}") from exc
            try:
                yield record_from_dict(obj)
            except DataError as exc:
                raise DataError(f"line {lineno}: {exc}") from exc


def write_records(path, records: Iterable[PacketRecord]) -> int:
    """Write records as JSONL; returns the number of lines written."""
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_dict()) + "\n")
            n += 1
    return n


def canonical_mac(mac: str) -> str:
    """Normalize a MAC address to lower-case colon-separated form."""
    cleaned = mac.strip().lower().replace("-", ":").replace(".", "")
    if ":" not in cleaned and len(cleaned) == 12:
        cleaned = ":".join(cleaned[i : i + 2] for i in range(0, 12, 2))
    if not _MAC_RE.match(cleaned):
        raise DataError(f"invalid MAC address: {mac!r}")
    return cleaned


@dataclass(frozen=True)
class DeviceRegistry:
    """MAC address -> device id map plus the fixed device ordering.

    The ordering defines the feature-column layout and is persisted with
    every trained model, so it must never be derived from set iteration.
    """

    mac_to_device: dict[str, str]
    device_order: tuple[str, ...]

    def __post_init__(self):
        macs = {canonical_mac(m): d for m, d in self.mac_to_device.items()}
        object.__setattr__(self, "mac_to_device", macs)
        devices = list(macs.values())
        if len(set(devices)) != len(devices):
            raise DataError("device ids in registry are not unique")
        if len(set(self.device_order)) != len(self.device_order):
            raise DataError("device_order contains duplicates")
        if set(self.device_order) != set(devices):
            raise DataError("device_order does not match the registered device ids")

    def lookup(self, mac: str) -> str | None:
        return self.mac_to_device.get(mac)

    @classmethod
    def from_json(cls, path) -> "DeviceRegistry":
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
        try:
            return cls(dict(doc["macs"]), tuple(doc["device_order"]))
        except KeyError as exc:
            raise DataError(f"registry file missing key {exc}") from exc

    def to_json(self, path) -> None:
        doc = {"macs": dict(self.mac_to_device), "device_order": list(self.device_order)}
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(doc, fh, indent=2, sort_keys=True)
            fh.write("\n")


class DnsMap:
    """IP -> FQDN mapping mined from observed DNS answers, last-write-wins.

    ``lookup(ip, t)`` returns the FQDN of the latest entry with
    ``first_seen <= t``; if every entry for that IP is newer than ``t``, the
    latest entry overall is returned (better a late mapping than none).
    """

    def __init__(self):
        self.entries: list[tuple[float, str, str]] = []
        self._by_ip: dict[str, list[tuple[float, str]]] = {}

    def add(self, first_seen: float, ip: str, fqdn: str) -> None:
        self.entries.append((first_seen, ip, fqdn))
        bisect.insort(self._by_ip.setdefault(ip, []), (first_seen, fqdn))

    def lookup(self, ip: str, t: float) -> str | None:
        seen = self._by_ip.get(ip)
        if not seen:
            return None
        idx = bisect.bisect_right(seen, (t, "￿"))
        if idx == 0:
            return seen[-1][1]
        return seen[idx - 1][1]

    def __len__(self) -> int:
        return len(self.entries)


def second_level_domain(fqdn: str, exceptions=DEFAULT_SUFFIX_EXCEPTIONS) -> str:
    """Collapse an FQDN to its registrable second-level domain.

    Keeps the last two labels, or the last three when the last two form a
    listed suffix exception such as "co.uk". Lower-cases and strips a
    trailing dot; single-label names pass through unchanged.
    """
    name = fqdn.strip().lower().rstrip(".")
    labels = name.split(".")
    if len(labels) < 2:
        return name
    if len(labels) >= 3 and ".".join(labels[-2:]) in exceptions:
        return ".".join(labels[-3:])
    return ".".join(labels[-2:])


def annotate_domains(
    records: Iterable[PacketRecord],
    dnsmap: DnsMap,
    exceptions=DEFAULT_SUFFIX_EXCEPTIONS,
) -> Iterator[PacketRecord]:
    """Set each record's domain from the DNS map, keyed by its remote IP.

    Unresolvable addresses get the "unknown" sentinel, so every record leaves
    with a domain value. Idempotent for a fixed map.
    """
    for rec in records:
        fqdn = dnsmap.lookup(rec.remote_ip, rec.timestamp)
        if fqdn is None:
            domain = UNKNOWN_DOMAIN
        else:
            domain = second_level_domain(fqdn, exceptions)
        yield replace(rec, domain=domain)
