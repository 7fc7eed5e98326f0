"""Deterministic per-device and per-domain feature vectors for one window.

Each device contributes 28 columns: seven order statistics of incoming packet
lengths, the same for outgoing lengths, the same for inter-event times over
all of the device's packets, six per-direction protocol counts, and the
distinct-domain count. Each vocabulary domain (plus the reserved OTHER
bucket) contributes the same layout minus the distinct-domain column, 27.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from . import DataError
from .sessions import ObservationWindow

STAT_NAMES = ("count", "sum", "min", "max", "std", "mean", "median")
PROTO_DIR_NAMES = ("tcp_in", "tcp_out", "udp_in", "udp_out", "icmp_in", "icmp_out")
DEVICE_BLOCK_WIDTH = 28
DOMAIN_BLOCK_WIDTH = 27

#: Column bucket for packets whose domain is outside the training vocabulary.
OTHER_DOMAIN = "__other__"

KIND_DEVICE = "device"
KIND_DOMAIN = "domain"
KIND_BOTH = "both"
KINDS = (KIND_DEVICE, KIND_DOMAIN, KIND_BOTH)

_PROTO_BASE = {"tcp": 0, "udp": 2, "icmp": 4}


@dataclass(frozen=True, slots=True)
class StatSummary:
    """Seven aggregate statistics; all zero for empty input."""

    count: float
    sum: float
    min: float
    max: float
    std: float
    mean: float
    median: float

    def as_array(self) -> np.ndarray:
        return np.array(
            [self.count, self.sum, self.min, self.max, self.std, self.mean, self.median]
        )


def _stats_vector(values) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64)
    if arr.size == 0:
        return np.zeros(7)
    return np.array(
        [arr.size, arr.sum(), arr.min(), arr.max(), arr.std(), arr.mean(), np.median(arr)]
    )


def compute_stats(values) -> StatSummary:
    """Count/sum/min/max/std/mean/median with population std and even-median
    as the mean of the two middle order statistics. Empty input is all zeros."""
    return StatSummary(*_stats_vector(values))


def inter_event_times(timestamps: Sequence[float]) -> np.ndarray:
    """Consecutive differences of a sorted timestamp list; empty for n < 2."""
    arr = np.asarray(timestamps, dtype=np.float64)
    if arr.size >= 2 and np.any(np.diff(arr) < 0):
        raise ValueError("timestamps must be sorted ascending")
    if arr.size < 2:
        return np.zeros(0)
    return np.diff(arr)


@dataclass(frozen=True)
class FeatureSchema:
    """Fixed column layout: representation kind, device order, domain vocab."""

    kind: str
    device_order: tuple[str, ...] = ()
    domain_vocab: tuple[str, ...] = ()

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}, got {self.kind!r}")
        if self.kind in (KIND_DEVICE, KIND_BOTH) and not self.device_order:
            raise ValueError(f"{self.kind} schema requires a non-empty device_order")
        object.__setattr__(self, "device_order", tuple(self.device_order))
        object.__setattr__(self, "domain_vocab", tuple(self.domain_vocab))

    @property
    def device_width(self) -> int:
        return DEVICE_BLOCK_WIDTH * len(self.device_order) if self.kind != KIND_DOMAIN else 0

    @property
    def domain_width(self) -> int:
        return DOMAIN_BLOCK_WIDTH * (len(self.domain_vocab) + 1) if self.kind != KIND_DEVICE else 0

    @property
    def width(self) -> int:
        return self.device_width + self.domain_width

    def column_names(self) -> list[str]:
        cols = []
        if self.kind in (KIND_DEVICE, KIND_BOTH):
            for dev in self.device_order:
                for group in ("in", "out", "iet"):
                    cols.extend(f"dev:{dev}:{group}:{s}" for s in STAT_NAMES)
                cols.extend(f"dev:{dev}:proto:{p}" for p in PROTO_DIR_NAMES)
                cols.append(f"dev:{dev}:domains")
        if self.kind in (KIND_DOMAIN, KIND_BOTH):
            for dom in (*self.domain_vocab, OTHER_DOMAIN):
                for group in ("in", "out", "iet"):
                    cols.extend(f"dom:{dom}:{group}:{s}" for s in STAT_NAMES)
                cols.extend(f"dom:{dom}:proto:{p}" for p in PROTO_DIR_NAMES)
        return cols

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "device_order": list(self.device_order),
            "domain_vocab": list(self.domain_vocab),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "FeatureSchema":
        try:
            return cls(
                kind=doc["kind"],
                device_order=tuple(doc.get("device_order", ())),
                domain_vocab=tuple(doc.get("domain_vocab", ())),
            )
        except (KeyError, ValueError) as exc:
            raise DataError(f"bad feature schema: {exc}") from exc


def save_schema(path, schema: FeatureSchema) -> None:
    doc = schema.to_dict()
    doc["columns"] = schema.column_names()
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_schema(path) -> FeatureSchema:
    with open(path, "r", encoding="utf-8") as fh:
        return FeatureSchema.from_dict(json.load(fh))


@dataclass(frozen=True, slots=True)
class FeatureVector:
    """One window's numeric features plus its label and end time."""

    schema: FeatureSchema
    values: np.ndarray
    label: str | None
    t: float


class _Acc:
    __slots__ = ("in_lens", "out_lens", "times", "proto_dir", "domains")

    def __init__(self):
        self.in_lens: list[int] = []
        self.out_lens: list[int] = []
        self.times: list[float] = []
        self.proto_dir = [0, 0, 0, 0, 0, 0]
        self.domains: set[str] = set()


def _accumulate(window: ObservationWindow, key_of) -> dict[str, _Acc]:
    groups: dict[str, _Acc] = {}
    for rec in window.records:
        key = key_of(rec)
        acc = groups.get(key)
        if acc is None:
            acc = groups[key] = _Acc()
        if rec.direction == "in":
            acc.in_lens.append(rec.length)
            acc.proto_dir[_PROTO_BASE[rec.protocol]] += 1
        else:
            acc.out_lens.append(rec.length)
            acc.proto_dir[_PROTO_BASE[rec.protocol] + 1] += 1
        acc.times.append(rec.timestamp)
        acc.domains.add(rec.domain)
    return groups


def _entity_block(acc: _Acc | None, with_domains: bool) -> np.ndarray:
    width = DEVICE_BLOCK_WIDTH if with_domains else DOMAIN_BLOCK_WIDTH
    if acc is None:
        return np.zeros(width)
    block = np.empty(width)
    block[0:7] = _stats_vector(acc.in_lens)
    block[7:14] = _stats_vector(acc.out_lens)
    block[14:21] = _stats_vector(inter_event_times(acc.times))
    block[21:27] = acc.proto_dir
    if with_domains:
        block[27] = len(acc.domains)
    return block


def device_features(window: ObservationWindow, device_order: Sequence[str]) -> np.ndarray:
    """28 columns per registered device, zeros for devices with no packets."""
    known = set(device_order)
    for rec in window.records:
        if rec.device not in known:
            raise RuntimeError(f"record for unregistered device {rec.device!r}")
    groups = _accumulate(window, lambda r: r.device)
    return np.concatenate([_entity_block(groups.get(d), True) for d in device_order])


def domain_features(window: ObservationWindow, domain_vocab: Sequence[str]) -> np.ndarray:
    """27 columns per vocabulary domain plus the trailing OTHER bucket."""
    vocab = set(domain_vocab)
    groups = _accumulate(
        window, lambda r: r.domain if r.domain in vocab else OTHER_DOMAIN
    )
    keys = (*domain_vocab, OTHER_DOMAIN)
    return np.concatenate([_entity_block(groups.get(k), False) for k in keys])


def build_domain_vocab(windows: Iterable[ObservationWindow]) -> tuple[str, ...]:
    """All second-level domains seen in training windows, sorted."""
    seen: set[str] = set()
    for w in windows:
        for rec in w.records:
            seen.add(rec.domain)
    return tuple(sorted(seen))


def extract(windows: Sequence[ObservationWindow], schema: FeatureSchema) -> list[FeatureVector]:
    """Map windows to feature vectors in input order (pure, deterministic)."""
    out = []
    for w in windows:
        parts = []
        if schema.kind in (KIND_DEVICE, KIND_BOTH):
            parts.append(device_features(w, schema.device_order))
        if schema.kind in (KIND_DOMAIN, KIND_BOTH):
            parts.append(domain_features(w, schema.domain_vocab))
        values = parts[0] if len(parts) == 1 else np.concatenate(parts)
        if not np.all(np.isfinite(values)):
            raise RuntimeError("feature vector contains non-finite values")
        out.append(FeatureVector(schema=schema, values=values, label=w.label, t=w.t_end))
    return out


def feature_matrix(vectors: Sequence[FeatureVector]) -> np.ndarray:
    if not vectors:
        return np.zeros((0, 0))
    return np.stack([fv.values for fv in vectors])


def write_features_csv(path, vectors: Sequence[FeatureVector], schema: FeatureSchema) -> None:
    """Feature matrix CSV: schema columns, then trailing label and t_end."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(schema.column_names() + ["label", "t_end"])
        for fv in vectors:
            row = [repr(float(v)) for v in fv.values]
            row.append("" if fv.label is None else fv.label)
            row.append(repr(float(fv.t)))
            writer.writerow(row)


def read_features_csv(path) -> tuple[list[str], np.ndarray, list[str | None], np.ndarray]:
    """Returns (columns, matrix, labels, t_end). Validates column count per row."""
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or len(header) < 3 or header[-2:] != ["label", "t_end"]:
            raise DataError("feature CSV must end with columns label,t_end")
        columns = header[:-2]
        rows, labels, t_end = [], [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise DataError(f"line {lineno}: expected {len(header)} columns, got {len(row)}")
            try:
                rows.append([float(v) for v in row[:-2]])
                t_end.append(float(row[-1]))
            except ValueError as exc:
                raise DataError(f"line {lineno}: non-numeric feature value: {exc}") from exc
            labels.append(row[-2] or None)
    matrix = np.asarray(rows, dtype=np.float64) if rows else np.zeros((0, len(columns)))
    return columns, matrix, labels, np.asarray(t_end)
