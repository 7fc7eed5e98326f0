"""Continuous scoring over the most recent observation window.

Score emission times are the stride boundaries anchor + delta + k*stride.
A boundary fires once every record that could fall inside its window has
been seen: mid-stream that means the committed frontier (newest timestamp
minus the reorder tolerance) has passed it, and at end of stream every
remaining boundary up to the newest timestamp fires. Nothing is ever
emitted for a window extending past the observed data, and nothing before
a full delta of observation has elapsed.

Windows are materialized and featurized with the same code as the batch
path, so a sorted replay of a session scores bit-identically to batch
extraction plus prediction.
"""

from __future__ import annotations

import bisect
import logging
from typing import Iterable, Iterator

from . import DataError
from .ensemble import EnsembleDecision, EnsembleModel, ensemble_predict
from .features import FeatureVector, extract
from .models import AuthScore, TrainedModel, predict_proba
from .ingest import PacketRecord
from .sessions import ObservationWindow

log = logging.getLogger(__name__)


class StreamScorer:
    """Per-stream scoring state: reorder buffer, window ring, boundary clock.

    Memory stays proportional to the packets inside one window plus the
    reorder span, independent of stream length.
    """

    def __init__(
        self,
        model: TrainedModel | EnsembleModel,
        delta: float,
        stride: float = 60.0,
        anchor: float | None = None,
        tolerance: float = 1.0,
        min_confidence: float = 0.0,
    ):
        if delta <= 0 or stride <= 0:
            raise ValueError("delta and stride must be positive")
        if tolerance < 0:
            raise ValueError("tolerance must be non-negative")
        self.model = model
        if isinstance(model, EnsembleModel):
            if model.model_dev.schema is None or model.model_dom.schema is None:
                raise DataError("ensemble members need feature schemas for streaming")
        elif model.schema is None:
            raise DataError("model needs a feature schema for streaming")
        self.delta = float(delta)
        self.stride = float(stride)
        self.tolerance = float(tolerance)
        self.min_confidence = min_confidence
        self.anchor = anchor
        self._next_boundary = None if anchor is None else anchor + delta
        self._pending: list[tuple[float, int, PacketRecord]] = []
        self._window: list[tuple[float, PacketRecord]] = []
        self._head = 0
        self._seq = 0
        self._max_ts = float("-inf")
        self.last_emission: float | None = None
        self.dropped_late = 0

    @property
    def warmed_up(self) -> bool:
        return self.last_emission is not None

    @property
    def buffered(self) -> int:
        return (len(self._window) - self._head) + len(self._pending)

    def push(self, rec: PacketRecord) -> list[AuthScore | EnsembleDecision]:
        """Feed one record; returns any scores whose windows completed."""
        ts = rec.timestamp
        if self.anchor is None:
            self.anchor = ts
            self._next_boundary = ts + self.delta
        if ts < self._max_ts - self.tolerance:
            self.dropped_late += 1
            log.warning("dropping late record at %.6f (frontier %.6f)", ts, self._max_ts)
            return []
        bisect.insort(self._pending, (ts, self._seq, rec))
        self._seq += 1
        if ts > self._max_ts:
            self._max_ts = ts
        return self._advance(self._max_ts - self.tolerance)

    def close(self) -> list[AuthScore | EnsembleDecision]:
        """End of stream: fire all complete windows up to the newest record."""
        if self.anchor is None:
            return []
        return self._advance(self._max_ts)

    def _advance(self, frontier: float) -> list[AuthScore | EnsembleDecision]:
        # move reorder-buffer records at or before the frontier into the window;
        # the 2-tuple probe never reaches the (unorderable) record element
        n_commit = bisect.bisect_right(self._pending, (frontier, self._seq))
        if n_commit:
            for ts, _, rec in self._pending[:n_commit]:
                self._window.append((ts, rec))
            del self._pending[:n_commit]

        out: list[AuthScore | EnsembleDecision] = []
        while self._next_boundary <= frontier:
            t_end = self._next_boundary
            t_start = t_end - self.delta
            # evict records that can never appear in this or a later window
            while self._head < len(self._window) and self._window[self._head][0] < t_start:
                self._head += 1
            if self._head > 4096:
                del self._window[: self._head]
                self._head = 0
            hi = bisect.bisect_left(self._window, (t_end,), lo=self._head)
            recs = tuple(rec for _, rec in self._window[self._head : hi])
            out.append(self._score(ObservationWindow(t_start=t_start, t_end=t_end, records=recs)))
            self.last_emission = t_end
            self._next_boundary += self.stride
        return out

    def _score(self, window: ObservationWindow) -> AuthScore | EnsembleDecision:
        if isinstance(self.model, EnsembleModel):
            return ensemble_predict(self.model, window, self.min_confidence)
        fv: FeatureVector = extract([window], self.model.schema)[0]
        return predict_proba(self.model, fv)


def score_stream(
    records: Iterable[PacketRecord],
    model: TrainedModel | EnsembleModel,
    delta: float,
    stride: float = 60.0,
    anchor: float | None = None,
    tolerance: float = 1.0,
    min_confidence: float = 0.0,
) -> Iterator[AuthScore | EnsembleDecision]:
    """Score a record stream; yields one output per completed stride boundary."""
    scorer = StreamScorer(
        model,
        delta,
        stride=stride,
        anchor=anchor,
        tolerance=tolerance,
        min_confidence=min_confidence,
    )
    for rec in records:
        yield from scorer.push(rec)
    yield from scorer.close()
