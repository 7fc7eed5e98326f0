"""Labeled user sessions and their sliding observation windows."""

from __future__ import annotations

import bisect
import csv
from dataclasses import dataclass, replace
from datetime import datetime, timezone
from typing import Iterable, Sequence

from . import DataError
from .ingest import PacketRecord

SESSION_CSV_HEADER = ["session_id", "user", "start_iso8601", "end_iso8601"]


@dataclass(frozen=True, slots=True)
class SessionLog:
    """One labeled interval during which a single known user was active."""

    session_id: str
    user: str
    start: float
    end: float

    def __post_init__(self):
        if not self.end > self.start:
            raise DataError(f"session {self.session_id}: end must be after start")

    @property
    def duration(self) -> float:
        return self.end - self.start


@dataclass(frozen=True, slots=True)
class ObservationWindow:
    """A half-open slice [t_start, t_end) of traffic, optionally labeled."""

    t_start: float
    t_end: float
    label: str | None = None
    records: tuple[PacketRecord, ...] = ()
    session_id: str | None = None


def window_spans(session: SessionLog, delta: float, stride: float = 60.0) -> list[tuple[float, float]]:
    """Sliding [start, start+delta) spans anchored at the session start.

    A session shorter than delta yields a single span covering all of it;
    otherwise spans advance by the stride while they fit inside the session,
    giving floor((duration - delta)/stride) + 1 of them.
    """
    if delta <= 0:
        raise ValueError(f"delta must be positive, got {delta}")
    if stride <= 0:
        raise ValueError(f"stride must be positive, got {stride}")
    if session.duration < delta:
        return [(session.start, session.end)]
    spans = []
    k = 0
    while True:
        t0 = session.start + k * stride
        if t0 + delta > session.end:
            break
        spans.append((t0, t0 + delta))
        k += 1
    return spans


def assign_records(
    windows: Sequence[ObservationWindow], records: Sequence[PacketRecord]
) -> list[ObservationWindow]:
    """Attach to each window the records with t_start <= ts < t_end.

    Records must be sorted by timestamp; overlapping windows share records.
    """
    timestamps = [r.timestamp for r in records]
    if any(b < a for a, b in zip(timestamps, timestamps[1:])):
        raise ValueError("records must be sorted by timestamp")
    out = []
    for w in windows:
        lo = bisect.bisect_left(timestamps, w.t_start)
        hi = bisect.bisect_left(timestamps, w.t_end)
        out.append(replace(w, records=tuple(records[lo:hi])))
    return out


def generate_windows(
    session: SessionLog,
    records: Sequence[PacketRecord],
    delta: float,
    stride: float = 60.0,
) -> list[ObservationWindow]:
    """Slice one session into labeled observation windows with records attached."""
    windows = [
        ObservationWindow(t_start=a, t_end=b, label=session.user, session_id=session.session_id)
        for a, b in window_spans(session, delta, stride)
    ]
    return assign_records(windows, records)


def _iso(ts: float) -> str:
    return datetime.fromtimestamp(ts, tz=timezone.utc).isoformat()


def _from_iso(text: str, lineno: int, field: str) -> float:
    try:
        dt = datetime.fromisoformat(text.strip())
    except ValueError as exc:
        raise DataError(f"line {lineno}: field '{field}': bad ISO8601 timestamp {text!r}") from exc
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return dt.timestamp()


def read_sessions(path) -> list[SessionLog]:
    """Load the session log CSV and check per-user non-overlap."""
    sessions = []
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != SESSION_CSV_HEADER:
            raise DataError(f"session CSV must start with header {','.join(SESSION_CSV_HEADER)}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 4:
                raise DataError(f"line {lineno}: expected 4 columns, got {len(row)}")
            sid, user, start_s, end_s = row
            sessions.append(
                SessionLog(
                    session_id=sid.strip(),
                    user=user.strip(),
                    start=_from_iso(start_s, lineno, "start_iso8601"),
                    end=_from_iso(end_s, lineno, "end_iso8601"),
                )
            )
    _check_no_overlap(sessions)
    return sessions


def write_sessions(path, sessions: Iterable[SessionLog]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(SESSION_CSV_HEADER)
        for s in sessions:
            writer.writerow([s.session_id, s.user, _iso(s.start), _iso(s.end)])


def _check_no_overlap(sessions: Sequence[SessionLog]) -> None:
    by_user: dict[str, list[SessionLog]] = {}
    for s in sessions:
        by_user.setdefault(s.user, []).append(s)
    for user, group in by_user.items():
        group = sorted(group, key=lambda s: s.start)
        for a, b in zip(group, group[1:]):
            if b.start < a.end:
                raise DataError(
                    f"sessions {a.session_id} and {b.session_id} of user {user} overlap"
                )
