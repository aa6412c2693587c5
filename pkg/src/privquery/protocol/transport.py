"""Running the two parties in separate processes over TCP.

The quantum channel is simulated inside Ursula's process from the state
codes Dave sends; both ends must therefore agree on the protocol parameters,
which they check by exchanging a parameter digest before anything else.
"""

from __future__ import annotations

import logging
import socket
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import messages as wire
from .engine import (Dave, DaveBehaviour, Phase, ProtocolParams, QueryResult, Ursula,
                     make_dave, make_ursula)
from .messages import AbortReason, FrameDecoder, FramingError, Message

log = logging.getLogger(__name__)


def parse_address(text: str) -> tuple[str, int]:
    host, sep, port = text.rpartition(":")
    if not sep or not port.isdigit():
        raise ValueError(f"expected host:port, got {text!r}")
    return host or "127.0.0.1", int(port)


class FramedConnection:
    """A socket carrying length-prefixed frames, with an optional transcript."""

    def __init__(self, sock: socket.socket, name: str, transcript: list | None = None):
        self.sock = sock
        self.name = name
        self.peer = "dave" if name == "ursula" else "ursula"
        self.transcript = transcript
        self._decoder = FrameDecoder()
        self._inbox: list[Message] = []

    def send(self, msgs: list[Message]):
        for m in msgs:
            if self.transcript is not None:
                self.transcript.append((self.name, m))
            self.sock.sendall(m.frame())

    def recv(self) -> Message:
        while not self._inbox:
            data = self.sock.recv(1 << 16)
            if not data:
                raise ConnectionError("peer closed the connection")
            self._inbox.extend(self._decoder.feed(data))
        m = self._inbox.pop(0)
        if self.transcript is not None:
            self.transcript.append((self.peer, m))
        return m

    def close(self):
        try:
            self.sock.close()
        except OSError:
            pass


@dataclass
class Outcome:
    phase: Phase
    result: QueryResult | None = None
    results: list[QueryResult] = field(default_factory=list)
    abort_reason: AbortReason | None = None
    abort_detail: str = ""
    transcript: list | None = None

    @property
    def aborted(self) -> bool:
        return self.phase is Phase.ABORTED


def _receive(conn: FramedConnection, party) -> bool:
    """Feed one incoming message to ``party``; False once the stream is unusable."""
    try:
        msg = conn.recv()
    except FramingError as exc:
        party.phase = Phase.ABORTED
        party.abort_reason, party.abort_detail = AbortReason.FRAMING, str(exc)
        _send_quietly(conn, [wire.abort(AbortReason.FRAMING, str(exc))])
        return False
    except (ConnectionError, OSError) as exc:
        if party.phase not in (Phase.DONE, Phase.ABORTED):
            party.phase = Phase.ABORTED
            party.abort_reason = AbortReason.PROTOCOL_VIOLATION
            party.abort_detail = f"connection lost: {exc}"
        return False
    _send_quietly(conn, party.receive(msg))
    return True


def _send_quietly(conn: FramedConnection, msgs: list[Message]):
    try:
        conn.send(msgs)
    except OSError as exc:
        log.debug("send failed: %s", exc)


def run_dave(conn: FramedConnection, dave: Dave) -> Outcome:
    while dave.phase not in (Phase.DONE, Phase.ABORTED):
        if dave.ready_to_disclose:
            _send_quietly(conn, dave.disclose())
            continue
        if not _receive(conn, dave):
            break
    return Outcome(phase=dave.phase, abort_reason=dave.abort_reason,
                   abort_detail=dave.abort_detail, transcript=conn.transcript)


def run_ursula(conn: FramedConnection, ursula: Ursula, j: int) -> Outcome:
    _send_quietly(conn, [ursula.hello()])
    while ursula.phase not in (Phase.DONE, Phase.ABORTED):
        if ursula.ready_to_query:
            _send_quietly(conn, ursula.query(j))
            continue
        if not _receive(conn, ursula):
            break
    return Outcome(phase=ursula.phase, result=ursula.result, results=list(ursula.results),
                   abort_reason=ursula.abort_reason, abort_detail=ursula.abort_detail,
                   transcript=conn.transcript)


def serve(params: ProtocolParams, database, listen: str, seed=None,
          behaviour: DaveBehaviour = DaveBehaviour.HONEST, target_block: int = 0,
          sessions: int = 1, ready: Callable[[tuple[str, int]], None] | None = None,
          record: bool = False, timeout: float | None = 60.0) -> list[Outcome]:
    """Accept ``sessions`` connections one after another and run Dave on each."""
    host, port = parse_address(listen)
    outcomes = []
    with socket.create_server((host, port)) as srv:
        if ready is not None:
            ready(srv.getsockname()[:2])
        for _ in range(sessions):
            sock, addr = srv.accept()
            sock.settimeout(timeout)
            log.info("session from %s:%d", *addr[:2])
            conn = FramedConnection(sock, "dave", [] if record else None)
            dave = make_dave(params, np.asarray(database, dtype=np.uint8), seed,
                             behaviour=behaviour, target_block=target_block)
            try:
                outcomes.append(run_dave(conn, dave))
            finally:
                conn.close()
    return outcomes


def connect(params: ProtocolParams, peer: str, j: int, seed=None, record: bool = False,
            timeout: float | None = 60.0) -> Outcome:
    host, port = parse_address(peer)
    sock = socket.create_connection((host, port), timeout=timeout)
    conn = FramedConnection(sock, "ursula", [] if record else None)
    try:
        return run_ursula(conn, make_ursula(params, seed), j)
    finally:
        conn.close()
