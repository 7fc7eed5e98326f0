"""Seeded synthetic smart-home traffic with controllable user separation.

Each user-session is a per-device, per-minute Poisson process: a minute may
be paused entirely (burstiness), otherwise outgoing packets arrive with
exponential gaps at the device's effective rate (activity weight times
packet rate). Lengths are lognormal, protocols and destination domains are
drawn from the profile's categorical mixtures, and every outgoing packet is
answered by one incoming packet with its own length distribution. A single
PCG64 stream drives everything, so a spec plus seed reproduces the corpus
byte for byte.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, asdict
from typing import Sequence

import numpy as np

from . import DataError
from .ingest import DeviceRegistry, PacketRecord, write_records
from .sessions import SessionLog, write_sessions
from .evaluation import load_config_file

STOCK_DEVICES = (
    "echo_dot",
    "echo_spot",
    "echo_plus",
    "google_home_mini",
    "invoke_speaker",
    "lg_tv",
    "roku_tv",
    "fire_tv",
    "hue_bridge",
    "smart_fridge",
    "microwave",
    "kettle",
    "coffee_brewer",
    "smartthings_hub",
    "motion_sensor",
)

STOCK_DOMAINS = (
    "spotify.com",
    "kwimer.com",
    "iheart.com",
    "amazonaws.com",
    "cloudfront.net",
    "google.com",
    "samsung.com",
    "netflix.com",
    "pandora.com",
    "tunein.com",
    "philips.com",
    "roku.com",
    "amazon.com",
    "akamai.net",
    "doubleclick.net",
    "tplinkcloud.com",
)

SEPARATIONS = ("high", "medium", "low")

_PROTO_ORDER = ("tcp", "udp", "icmp")
_EPS = 1e-6
_BASE_TIME = 1_600_000_000.0


@dataclass(frozen=True)
class UserProfile:
    """Generative behavior of one user across the household devices."""

    user: str
    device_weights: dict[str, float]
    device_rates: dict[str, float]
    out_length: dict[str, tuple[float, float]]
    in_length: dict[str, tuple[float, float]]
    domain_mix: dict[str, dict[str, float]]
    protocol_mix: dict[str, float]
    pause_prob: float = 0.1

    def __post_init__(self):
        weights = self.device_weights
        if not weights or all(w <= 0 for w in weights.values()):
            raise DataError(f"profile {self.user}: needs at least one positive device weight")
        if any(w < 0 for w in weights.values()):
            raise DataError(f"profile {self.user}: negative device weight")
        if not 0 <= self.pause_prob < 1:
            raise DataError(f"profile {self.user}: pause_prob must be in [0, 1)")
        if abs(sum(self.protocol_mix.values()) - 1.0) > 1e-9:
            raise DataError(f"profile {self.user}: protocol mixture must sum to 1")
        for dev, mix in self.domain_mix.items():
            if mix and abs(sum(mix.values()) - 1.0) > 1e-9:
                raise DataError(f"profile {self.user}: domain mixture for {dev} must sum to 1")
        for dists in (self.out_length, self.in_length):
            for dev, (_, sigma) in dists.items():
                if sigma <= 0:
                    raise DataError(f"profile {self.user}: sigma must be positive for {dev}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "UserProfile":
        try:
            return cls(
                user=doc["user"],
                device_weights=dict(doc["device_weights"]),
                device_rates=dict(doc["device_rates"]),
                out_length={d: tuple(v) for d, v in doc["out_length"].items()},
                in_length={d: tuple(v) for d, v in doc["in_length"].items()},
                domain_mix={d: dict(v) for d, v in doc["domain_mix"].items()},
                protocol_mix=dict(doc["protocol_mix"]),
                pause_prob=doc.get("pause_prob", 0.1),
            )
        except KeyError as exc:
            raise DataError(f"profile document missing key {exc}") from exc


@dataclass(frozen=True)
class CorpusSpec:
    profiles: tuple[UserProfile, ...]
    sessions_per_user: int
    duration_minutes: tuple[float, float]
    seed: int
    gap_minutes: float = 5.0
    device_order: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "profiles", tuple(self.profiles))
        if len(self.profiles) < 2:
            raise DataError("corpus spec needs at least 2 profiles")
        users = [p.user for p in self.profiles]
        if len(set(users)) != len(users):
            raise DataError("profile users must be unique")
        if self.sessions_per_user < 1:
            raise DataError("sessions_per_user must be at least 1")
        lo, hi = self.duration_minutes
        if lo <= 0 or hi < lo:
            raise DataError("duration_minutes must be a positive (lo, hi) range")
        if not self.device_order:
            seen = sorted({d for p in self.profiles for d in p.device_weights})
            object.__setattr__(self, "device_order", tuple(seen))
        object.__setattr__(self, "duration_minutes", (float(lo), float(hi)))


@dataclass
class SimulatedCorpus:
    records: list[PacketRecord]
    sessions: list[SessionLog]
    registry: DeviceRegistry
    ground_truth: dict


def _domain_ips(spec: CorpusSpec) -> dict[str, str]:
    domains = sorted({d for p in spec.profiles for mix in p.domain_mix.values() for d in mix})
    ips = {}
    for i, dom in enumerate(domains):
        block = ("203.0.113", "198.51.100", "192.0.2")[i // 250]
        ips[dom] = f"{block}.{i % 250 + 1}"
    return ips


def _categorical(rng: np.random.Generator, items: Sequence[str], probs: Sequence[float]) -> str:
    u = rng.random()
    acc = 0.0
    for item, p in zip(items, probs):
        acc += p
        if u < acc:
            return item
    return items[-1]


def _session_records(
    rng: np.random.Generator,
    profile: UserProfile,
    device_order: Sequence[str],
    start: float,
    end: float,
    domain_ips: dict[str, str],
) -> list[PacketRecord]:
    proto_probs = [profile.protocol_mix.get(p, 0.0) for p in _PROTO_ORDER]
    raw: list[PacketRecord] = []
    n_minutes = int(np.ceil((end - start) / 60.0))
    for minute in range(n_minutes):
        m_start = start + minute * 60.0
        m_end = min(m_start + 60.0, end)
        for device in device_order:
            eff = profile.device_weights.get(device, 0.0) * profile.device_rates.get(device, 0.0)
            if eff <= 0:
                continue
            if rng.random() < profile.pause_prob:
                continue
            mix = profile.domain_mix.get(device, {})
            domains = sorted(mix)
            dom_probs = [mix[d] for d in domains]
            mu_out, sig_out = profile.out_length.get(device, (5.5, 0.5))
            mu_in, sig_in = profile.in_length.get(device, (6.0, 0.5))
            t = m_start
            while True:
                t += rng.exponential(60.0 / eff)
                if t >= m_end:
                    break
                protocol = _categorical(rng, _PROTO_ORDER, proto_probs)
                domain = _categorical(rng, domains, dom_probs) if domains else "unknown"
                remote_ip = domain_ips.get(domain, "192.0.2.250")
                if protocol == "icmp":
                    sport = dport = None
                else:
                    sport = int(rng.integers(49152, 65536))
                    dport = 443
                out_len = int(round(rng.lognormal(mu_out, sig_out)))
                raw.append(
                    PacketRecord(
                        timestamp=round(t, 6),
                        device=device,
                        direction="out",
                        protocol=protocol,
                        length=out_len,
                        src_port=sport,
                        dst_port=dport,
                        remote_ip=remote_ip,
                        domain=domain,
                    )
                )
                t_resp = t + rng.exponential(0.05) + 1e-4
                in_len = int(round(rng.lognormal(mu_in, sig_in)))
                if t_resp < end:
                    raw.append(
                        PacketRecord(
                            timestamp=round(t_resp, 6),
                            device=device,
                            direction="in",
                            protocol=protocol,
                            length=in_len,
                            src_port=dport,
                            dst_port=sport,
                            remote_ip=remote_ip,
                            domain=domain,
                        )
                    )

    # enforce strictly increasing timestamps per device with epsilon bumps
    raw.sort(key=lambda r: r.timestamp)
    last: dict[str, float] = {}
    fixed = []
    for rec in raw:
        ts = rec.timestamp
        prev = last.get(rec.device)
        if prev is not None and ts <= prev:
            ts = round(prev + _EPS, 6)
        if ts >= end:
            continue
        last[rec.device] = ts
        fixed.append(rec if ts == rec.timestamp else PacketRecord(**{**rec.to_dict(), "timestamp": ts}))
    fixed.sort(key=lambda r: r.timestamp)
    return fixed


def generate_corpus(spec: CorpusSpec) -> SimulatedCorpus:
    """Produce records, session log, device registry, and ground truth."""
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(spec.seed)))
    domain_ips = _domain_ips(spec)
    lo, hi = spec.duration_minutes

    records: list[PacketRecord] = []
    sessions: list[SessionLog] = []
    session_truth = []
    t = _BASE_TIME
    counter = 0
    for round_i in range(spec.sessions_per_user):
        for profile in spec.profiles:
            duration = float(np.round(rng.uniform(lo, hi) * 60.0))
            start, end = t, t + duration
            session_id = f"s{counter:03d}-{profile.user}"
            recs = _session_records(rng, profile, spec.device_order, start, end, domain_ips)
            sessions.append(
                SessionLog(session_id=session_id, user=profile.user, start=start, end=end)
            )
            session_truth.append(
                {
                    "session_id": session_id,
                    "user": profile.user,
                    "start": start,
                    "end": end,
                    "n_packets": len(recs),
                }
            )
            records.extend(recs)
            t = end + spec.gap_minutes * 60.0
            counter += 1

    macs = {
        f"02:00:00:00:{i // 256:02x}:{i % 256:02x}": dev
        for i, dev in enumerate(spec.device_order)
    }
    registry = DeviceRegistry(mac_to_device=macs, device_order=spec.device_order)

    ground_truth = {
        "seed": spec.seed,
        "devices": list(spec.device_order),
        "domains": sorted(domain_ips),
        "domain_ips": domain_ips,
        "users": [p.user for p in spec.profiles],
        "profiles": [p.to_dict() for p in spec.profiles],
        "sessions": session_truth,
        "total_packets": len(records),
    }
    return SimulatedCorpus(
        records=records, sessions=sessions, registry=registry, ground_truth=ground_truth
    )


def write_corpus(corpus: SimulatedCorpus, out_dir) -> dict[str, str]:
    """Write records.jsonl, sessions.csv, registry.json, ground_truth.json."""
    os.makedirs(out_dir, exist_ok=True)
    paths = {
        "records": os.path.join(out_dir, "records.jsonl"),
        "sessions": os.path.join(out_dir, "sessions.csv"),
        "registry": os.path.join(out_dir, "registry.json"),
        "ground_truth": os.path.join(out_dir, "ground_truth.json"),
    }
    write_records(paths["records"], corpus.records)
    write_sessions(paths["sessions"], corpus.sessions)
    corpus.registry.to_json(paths["registry"])
    with open(paths["ground_truth"], "w", encoding="utf-8") as fh:
        json.dump(corpus.ground_truth, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return paths


def preset_profiles(n_users: int, separation: str, seed: int) -> list[UserProfile]:
    """Household-scale profiles with controlled pairwise divergence.

    high: disjoint favorite devices and domains per user.
    medium: shared device pool with per-user weight boosts, distinct domain
    mixtures and per-user length scales.
    low: near-identical profiles with small rate perturbations.
    """
    if not 2 <= n_users <= 10:
        raise ValueError("n_users must be between 2 and 10")
    if separation not in SEPARATIONS:
        raise ValueError(f"separation must be one of {SEPARATIONS}")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
    devices = STOCK_DEVICES
    domains = STOCK_DOMAINS
    n_dev, n_dom = len(devices), len(domains)

    def lognormal_pair(rng, lo=5.0, hi=6.5, sig_lo=0.3, sig_hi=0.6):
        return (float(rng.uniform(lo, hi)), float(rng.uniform(sig_lo, sig_hi)))

    profiles = []
    if separation == "high":
        dev_perm = [devices[i] for i in rng.permutation(n_dev)]
        dom_perm = [domains[i] for i in rng.permutation(n_dom)]
        per_dev = n_dev // n_users
        per_dom = n_dom // n_users
        for u in range(n_users):
            favs = dev_perm[u * per_dev : (u + 1) * per_dev]
            own_doms = dom_perm[u * per_dom : (u + 1) * per_dom]
            weights = {d: (1.0 / len(favs) if d in favs else 0.0) for d in devices}
            mix_probs = rng.dirichlet(np.full(len(own_doms), 2.0))
            mix = {d: float(p) for d, p in zip(own_doms, mix_probs)}
            profiles.append(
                UserProfile(
                    user=f"user{u + 1}",
                    device_weights=weights,
                    device_rates={d: 45.0 for d in devices},
                    out_length={d: lognormal_pair(rng) for d in devices},
                    in_length={d: lognormal_pair(rng, 5.5, 7.0) for d in devices},
                    domain_mix={d: dict(mix) for d in favs},
                    protocol_mix={"tcp": 0.8, "udp": 0.18, "icmp": 0.02},
                    pause_prob=0.05,
                )
            )
    elif separation == "medium":
        # devices carry shared length profiles and a shared base domain mix;
        # identity comes mostly from usage weights, mildly from length offsets
        base = rng.dirichlet(np.full(n_dev, 1.5))
        dev_out = {d: lognormal_pair(rng) for d in devices}
        dev_in = {d: lognormal_pair(rng, 5.5, 7.0) for d in devices}
        dev_base_mix = {d: rng.dirichlet(np.full(n_dom, 1.0)) for d in devices}
        for u in range(n_users):
            boost_idx = rng.choice(n_dev, size=3, replace=False)
            boost = np.zeros(n_dev)
            boost[boost_idx] = rng.dirichlet(np.full(3, 2.0))
            w = 0.4 * base + 0.6 * boost
            w = w / w.sum()
            weights = {d: float(x) for d, x in zip(devices, w)}
            domain_mix = {}
            for d in devices:
                personal = rng.dirichlet(np.full(n_dom, 0.5))
                blend = 0.5 * dev_base_mix[d] + 0.5 * personal
                blend = blend / blend.sum()
                domain_mix[d] = {dom: float(p) for dom, p in zip(domains, blend)}
            out_length = {
                d: (mu + float(rng.uniform(-0.15, 0.15)), sig) for d, (mu, sig) in dev_out.items()
            }
            in_length = {
                d: (mu + float(rng.uniform(-0.15, 0.15)), sig) for d, (mu, sig) in dev_in.items()
            }
            profiles.append(
                UserProfile(
                    user=f"user{u + 1}",
                    device_weights=weights,
                    device_rates={d: 45.0 for d in devices},
                    out_length=out_length,
                    in_length=in_length,
                    domain_mix=domain_mix,
                    protocol_mix={"tcp": 0.8, "udp": 0.18, "icmp": 0.02},
                    pause_prob=0.1,
                )
            )
    else:  # low
        base_w = rng.dirichlet(np.full(n_dev, 3.0))
        base_out = {d: lognormal_pair(rng) for d in devices}
        base_in = {d: lognormal_pair(rng, 5.5, 7.0) for d in devices}
        base_mix_probs = rng.dirichlet(np.full(n_dom, 1.0))
        base_mix = {dom: float(p) for dom, p in zip(domains, base_mix_probs)}
        for u in range(n_users):
            w = base_w * (1.0 + 0.03 * rng.uniform(-1, 1, size=n_dev))
            w = w / w.sum()
            rate = float(45.0 * (1.0 + 0.05 * rng.uniform(-1, 1)))
            profiles.append(
                UserProfile(
                    user=f"user{u + 1}",
                    device_weights={d: float(x) for d, x in zip(devices, w)},
                    device_rates={d: rate for d in devices},
                    out_length=dict(base_out),
                    in_length=dict(base_in),
                    domain_mix={d: dict(base_mix) for d in devices},
                    protocol_mix={"tcp": 0.8, "udp": 0.18, "icmp": 0.02},
                    pause_prob=0.1,
                )
            )
    return profiles


def load_corpus_spec(path) -> CorpusSpec:
    """Build a CorpusSpec from a JSON/TOML file.

    The file either inlines "profiles" or names a "preset" with n_users and
    separation; see the repository docs for the full schema.
    """
    doc = load_config_file(path)
    if "preset" in doc:
        preset = doc["preset"]
        profiles = preset_profiles(
            n_users=int(preset["n_users"]),
            separation=preset.get("separation", "medium"),
            seed=int(preset.get("seed", doc.get("seed", 0))),
        )
        device_order = STOCK_DEVICES
    elif "profiles" in doc:
        profiles = [UserProfile.from_dict(p) for p in doc["profiles"]]
        device_order = tuple(doc.get("device_order", ()))
    else:
        raise DataError("corpus spec needs either 'profiles' or 'preset'")
    try:
        return CorpusSpec(
            profiles=tuple(profiles),
            sessions_per_user=int(doc["sessions_per_user"]),
            duration_minutes=tuple(doc["duration_minutes"]),
            seed=int(doc["seed"]),
            gap_minutes=float(doc.get("gap_minutes", 5.0)),
            device_order=device_order,
        )
    except KeyError as exc:
        raise DataError(f"corpus spec missing key {exc}") from exc
