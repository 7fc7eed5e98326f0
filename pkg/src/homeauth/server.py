"""Newline-delimited-JSON scoring service over TCP.

Clients write PacketRecord JSONL lines; the server answers with one JSON
line per completed stride boundary (an authentication score, or an ensemble
decision that may be an abstention). Each connection owns an independent
scoring state; models are shared read-only. A malformed input line yields
an {"error": ..., "line": n} response and the connection stays open. When
the client closes its write side, remaining complete windows are scored and
flushed; no partial-window score is ever produced.
"""

from __future__ import annotations

import json
import logging
import socket
import socketserver
import threading
from typing import Callable

from .ensemble import EnsembleDecision
from .ingest import record_from_dict
from .models import AuthScore
from .stream import StreamScorer
from . import DataError

log = logging.getLogger(__name__)


def score_to_json(out: AuthScore | EnsembleDecision) -> str:
    if isinstance(out, EnsembleDecision):
        return json.dumps(out.to_dict())
    return json.dumps({"t": out.t, "user": out.argmax_user, "scores": out.scores})


class _Handler(socketserver.StreamRequestHandler):
    def handle(self):
        server: ScoringServer = self.server  # type: ignore[assignment]
        scorer = server.scorer_factory()
        if server.idle_timeout is not None:
            self.connection.settimeout(server.idle_timeout)
        lineno = 0
        try:
            while True:
                try:
                    line = self.rfile.readline()
                except socket.timeout:
                    log.info("closing idle connection from %s", self.client_address)
                    break
                if not line:
                    break
                lineno += 1
                text = line.strip()
                if not text:
                    continue
                try:
                    rec = record_from_dict(json.loads(text))
                except (json.JSONDecodeError, DataError) as exc:
                    self._send({"error": str(exc), "line": lineno})
                    continue
                for out in scorer.push(rec):
                    self.wfile.write(score_to_json(out).encode() + b"\n")
                self.wfile.flush()
            for out in scorer.close():
                self.wfile.write(score_to_json(out).encode() + b"\n")
            self.wfile.flush()
        except (BrokenPipeError, ConnectionResetError):
            log.info("client %s disconnected", self.client_address)

    def _send(self, obj: dict) -> None:
        self.wfile.write(json.dumps(obj).encode() + b"\n")
        self.wfile.flush()


class ScoringServer(socketserver.ThreadingTCPServer):
    """One scoring state machine per connection, handled concurrently."""

    allow_reuse_address = True
    daemon_threads = True

    def __init__(self, address: tuple[str, int], scorer_factory: Callable[[], StreamScorer],
                 idle_timeout: float | None = None):
        self.scorer_factory = scorer_factory
        self.idle_timeout = idle_timeout
        super().__init__(address, _Handler)

    @property
    def port(self) -> int:
        return self.server_address[1]

    def run_background(self) -> threading.Thread:
        thread = threading.Thread(target=self.serve_forever, daemon=True)
        thread.start()
        return thread
