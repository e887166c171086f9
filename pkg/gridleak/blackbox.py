"""
Query boundary between the adversary and an honest forecaster.

Both bindings answer :class:`ForecastQuery` objects with
:class:`ForecastResponse` objects and never expose weights. The wire binding
speaks length-prefixed JSON: every frame is a 4-byte big-endian length
followed by UTF-8 JSON. A client opens with ``"HELLO"`` and gets back
``{"w": ..., "interval_minutes": ...}``; queries are
``{"id", "window", "timestamps"}`` and answers ``{"id", "prediction"}`` or
``{"id", "error"}``.
"""

from collections import Counter
from dataclasses import dataclass
from datetime import datetime
import json
from math import isfinite
from pathlib import Path
from socket import create_connection, socket, timeout as SocketTimeout
from socketserver import BaseRequestHandler, ThreadingTCPServer
from struct import Struct
from threading import Lock, Thread
from time import sleep
from typing import (
    Any,
    Dict,
    List,
    Mapping,
    Optional,
    Protocol,
    Sequence,
    Tuple,
)

import numpy as np

from gridleak.dataio import INTERVAL_MINUTES
from gridleak.errors import OracleError, ProtocolError
from gridleak.forecaster import ForecastModel, encode_times
from gridleak.log import log


HELLO = "HELLO"

BAD_WINDOW_LEN = "BAD_WINDOW_LEN"
BAD_TIMESTAMPS = "BAD_TIMESTAMPS"
MALFORMED = "MALFORMED"

_HEADER = Struct(">I")
MAX_FRAME = 16 * 1024 * 1024


@dataclass(frozen=True)
class ForecastQuery:
    """A window of readings and the w+1 timestamps it covers."""

    id: Any
    window: Tuple[float, ...]
    timestamps: Tuple[datetime, ...]

    def to_message(self) -> Dict[str, Any]:
        """Wire representation."""
        return {
            "id": self.id,
            "window": [float(value) for value in self.window],
            "timestamps": [stamp.isoformat() for stamp in self.timestamps],
        }


@dataclass(frozen=True)
class ForecastResponse:
    """Prediction in kWh for one query."""

    id: Any
    prediction: float


class Oracle(Protocol):
    """Anything that answers forecast queries."""

    def handshake(self) -> Dict[str, int]:
        """Advertised window size and reading interval."""

    def query(self, query: ForecastQuery) -> ForecastResponse:
        """Answer one query."""


class OracleStats:
    """Thread-safe count of the queries an oracle has answered."""

    def __init__(self) -> None:
        self._lock = Lock()
        self._total = 0
        self._per_client: Counter[str] = Counter()

    def record(self, client: str, count: int = 1) -> None:
        """Count ``count`` well-formed queries from ``client``."""
        with self._lock:
            self._total += count
            self._per_client[client] += count

    @property
    def total(self) -> int:
        """All well-formed queries so far."""
        with self._lock:
            return self._total

    def per_client(self) -> Dict[str, int]:
        """Query counts per client."""
        with self._lock:
            return dict(self._per_client)

    def snapshot(self) -> Dict[str, Any]:
        """JSON-serializable copy of the counters."""
        with self._lock:
            return {
                "total": self._total,
                "per_client": dict(sorted(self._per_client.items())),
            }


def _parse_query(message: Any, window: int) -> ForecastQuery:
    """Validate a decoded query frame."""
    if not isinstance(message, dict) or "id" not in message:
        raise ProtocolError(MALFORMED)

    request_id = message["id"]
    values = message.get("window")
    stamps = message.get("timestamps")

    if not isinstance(values, list) or not isinstance(stamps, list):
        raise ProtocolError(MALFORMED, request_id)
    if not all(
        isinstance(value, (int, float)) and not isinstance(value, bool)
        for value in values
    ) or not all(isfinite(value) for value in values):
        raise ProtocolError(MALFORMED, request_id)
    if len(values) != window:
        raise ProtocolError(BAD_WINDOW_LEN, request_id)

    try:
        parsed = tuple(datetime.fromisoformat(stamp) for stamp in stamps)
    except (TypeError, ValueError) as e:
        raise ProtocolError(BAD_TIMESTAMPS, request_id) from e
    if len(parsed) != window + 1 or any(
        later <= earlier for earlier, later in zip(parsed, parsed[1:])
    ):
        raise ProtocolError(BAD_TIMESTAMPS, request_id)

    return ForecastQuery(request_id, tuple(map(float, values)), parsed)


def _check_query(query: ForecastQuery, window: int) -> ForecastQuery:
    return _parse_query(query.to_message(), window)


class LocalOracle:
    """In-process oracle around a trained model."""

    def __init__(self, model: ForecastModel, client: str = "local") -> None:
        self._model = model
        self.client = client
        self.stats = OracleStats()

    def handshake(self) -> Dict[str, int]:
        """Advertised window size and reading interval."""
        return {"w": self._model.window, "interval_minutes": INTERVAL_MINUTES}

    def query(self, query: ForecastQuery) -> ForecastResponse:
        """Answer one query."""
        checked = _check_query(query, self._model.window)
        self.stats.record(self.client)
        prediction = self._model.predict(checked.window, checked.timestamps)
        return ForecastResponse(checked.id, prediction)

    def query_batch(
        self, queries: Sequence[ForecastQuery]
    ) -> List[ForecastResponse]:
        """Answer several queries with one vectorized forward pass."""
        checked = [_check_query(q, self._model.window) for q in queries]
        self.stats.record(self.client, len(checked))
        windows = np.array([q.window for q in checked], dtype=np.float64)
        features = encode_times([q.timestamps[-1] for q in checked])
        predictions = self._model.predict_batch(windows, features)
        return [
            ForecastResponse(q.id, float(p))
            for q, p in zip(checked, predictions)
        ]


def send_frame(conn: socket, payload: Any) -> None:
    """Write one length-prefixed JSON frame."""
    raw = json.dumps(payload, separators=(",", ":")).encode("utf-8")
    conn.sendall(_HEADER.pack(len(raw)) + raw)


def _recv_exactly(conn: socket, size: int) -> Optional[bytes]:
    buffer = b""
    while len(buffer) < size:
        chunk = conn.recv(size - len(buffer))
        if not chunk:
            return None
        buffer += chunk
    return buffer


def recv_frame(conn: socket) -> Optional[bytes]:
    """Read one frame's payload, or None when the peer closed."""
    header = _recv_exactly(conn, _HEADER.size)
    if header is None:
        return None
    (size,) = _HEADER.unpack(header)
    if size > MAX_FRAME:
        raise ProtocolError(MALFORMED)
    return _recv_exactly(conn, size)


class _OracleHandler(BaseRequestHandler):
    """One client connection."""

    server: "OracleServer"

    def handle(self) -> None:
        host, port = self.client_address[:2]
        client = f"{host}:{port}"
        log.debug("Oracle client %s connected", client)

        while True:
            try:
                raw = recv_frame(self.request)
            except ProtocolError:
                log.warning("Oversized frame from %s, closing", client)
                return
            except OSError:
                return
            if raw is None:
                log.debug("Oracle client %s disconnected", client)
                return
            try:
                send_frame(self.request, self.server.answer(raw, client))
            except OSError:
                return


class OracleServer(ThreadingTCPServer):
    """Threaded TCP server answering forecast queries."""

    daemon_threads = True

    def __init__(
        self, address: Tuple[str, int], model: ForecastModel
    ) -> None:
        self.model = model
        self.stats = OracleStats()
        super().__init__(address, _OracleHandler)

    def answer(self, raw: bytes, client: str) -> Dict[str, Any]:
        """Reply to one frame's payload."""
        try:
            message = json.loads(raw.decode("utf-8"))
        except (UnicodeDecodeError, ValueError):
            return {"id": None, "error": MALFORMED}

        if message == HELLO:
            return {
                "w": self.model.window,
                "interval_minutes": INTERVAL_MINUTES,
            }

        try:
            query = _parse_query(message, self.model.window)
        except ProtocolError as e:
            return {"id": e.request_id, "error": e.code}

        self.stats.record(client)
        prediction = self.model.predict(query.window, query.timestamps)
        return {"id": query.id, "prediction": prediction}


class ServerHandle:
    """A running oracle server."""

    def __init__(self, server: OracleServer) -> None:
        self._server = server
        self._thread = Thread(target=server.serve_forever, daemon=True)
        self._thread.start()

    @property
    def address(self) -> Tuple[str, int]:
        """Bound host and port."""
        host, port = self._server.server_address[:2]
        return str(host), int(port)

    @property
    def stats(self) -> OracleStats:
        """Counters of the served queries."""
        return self._server.stats

    def shutdown(self, stats_path: Optional[Path] = None) -> None:
        """Stop serving; optionally write the counters to ``stats_path``."""
        self._server.shutdown()
        self._server.server_close()
        self._thread.join()
        if stats_path is not None:
            with open(stats_path, "w", encoding="utf-8") as f:
                json.dump(self.stats.snapshot(), f, sort_keys=True, indent=2)
        log.info("Oracle stopped after %d queries", self.stats.total)

    def __enter__(self) -> "ServerHandle":
        return self

    def __exit__(self, *_: Any) -> None:
        self.shutdown()


def serve(
    model: ForecastModel, host: str = "127.0.0.1", port: int = 0
) -> ServerHandle:
    """Start answering queries for ``model`` on ``host:port``."""
    try:
        server = OracleServer((host, port), model)
    except OSError as e:
        raise OracleError(f"Cannot listen on {host}:{port}: {e}") from e

    handle = ServerHandle(server)
    log.info("Serving forecaster on %s:%d", *handle.address)
    return handle


class WireOracle:
    """Protocol client for a served forecaster."""

    def __init__(
        self,
        host: str,
        port: int,
        timeout: float = 5.0,
        retries: int = 3,
    ) -> None:
        self.host = host
        self.port = port
        self.timeout = timeout
        self.retries = retries
        self._conn: Optional[socket] = None
        self._hello: Optional[Dict[str, int]] = None

    def close(self) -> None:
        """Drop the connection."""
        if self._conn is not None:
            try:
                self._conn.close()
            except OSError:
                pass
        self._conn = None

    def __enter__(self) -> "WireOracle":
        return self

    def __exit__(self, *_: Any) -> None:
        self.close()

    def _connect(self) -> socket:
        if self._conn is None:
            conn = create_connection((self.host, self.port), self.timeout)
            send_frame(conn, HELLO)
            reply = self._read(conn)
            if (
                not isinstance(reply, dict)
                or not isinstance(reply.get("w"), int)
                or not isinstance(reply.get("interval_minutes"), int)
            ):
                conn.close()
                raise OracleError(f"Malformed handshake: {reply!r}")
            self._hello = {
                "w": reply["w"],
                "interval_minutes": reply["interval_minutes"],
            }
            self._conn = conn
        return self._conn

    @staticmethod
    def _read(conn: socket) -> Any:
        raw = recv_frame(conn)
        if raw is None:
            raise ConnectionError("Oracle closed the connection")
        try:
            return json.loads(raw.decode("utf-8"))
        except (UnicodeDecodeError, ValueError) as e:
            raise OracleError("Malformed response from oracle") from e

    def _exchange(self, payload: Any) -> Any:
        last_error: Optional[Exception] = None
        for attempt in range(self.retries + 1):
            try:
                conn = self._connect()
                send_frame(conn, payload)
                return self._read(conn)
            except (SocketTimeout, ConnectionError, OSError) as e:
                last_error = e
                self.close()
                log.warning(
                    "Oracle %s:%d attempt %d failed: %s",
                    self.host,
                    self.port,
                    attempt + 1,
                    e,
                )
                sleep(0.05 * (attempt + 1))
        raise OracleError(
            f"Oracle {self.host}:{self.port} unreachable after "
            f"{self.retries + 1} attempts: {last_error}"
        )

    def handshake(self) -> Dict[str, int]:
        """Window size and interval advertised by the server."""
        for attempt in range(self.retries + 1):
            try:
                self._connect()
                break
            except (SocketTimeout, ConnectionError, OSError) as e:
                self.close()
                if attempt == self.retries:
                    raise OracleError(
                        f"Oracle {self.host}:{self.port} unreachable: {e}"
                    ) from e
                sleep(0.05 * (attempt + 1))
        assert self._hello is not None  # noqa: S101
        return dict(self._hello)

    def query(self, query: ForecastQuery) -> ForecastResponse:
        """Send one query and wait for its answer."""
        reply = self._exchange(query.to_message())
        if not isinstance(reply, dict) or reply.get("id") != query.id:
            raise OracleError(f"Malformed response: {reply!r}")
        if "error" in reply:
            raise ProtocolError(str(reply["error"]), query.id)
        prediction = reply.get("prediction")
        if (
            not isinstance(prediction, (int, float))
            or isinstance(prediction, bool)
            or not isfinite(prediction)
        ):
            raise OracleError(f"Malformed response: {reply!r}")
        return ForecastResponse(query.id, float(prediction))

    def query_batch(
        self, queries: Sequence[ForecastQuery]
    ) -> List[ForecastResponse]:
        """Send queries one after another on the same connection."""
        return [self.query(query) for query in queries]


def parse_endpoint(endpoint: str) -> Tuple[str, int]:
    """Split ``host:port``."""
    host, _, port = endpoint.rpartition(":")
    if not host or not port.isdigit():
        raise OracleError(f"Invalid endpoint {endpoint!r}, use host:port")
    return host, int(port)


def oracle_from_mapping(settings: Mapping[str, Any]) -> WireOracle:
    """Client configured from a ``{"host", "port", ...}`` mapping."""
    return WireOracle(
        settings["host"],
        int(settings["port"]),
        float(settings.get("timeout", 5.0)),
        int(settings.get("retries", 3)),
    )
