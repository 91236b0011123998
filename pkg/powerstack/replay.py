"""
TCP replay of a recorded telemetry log.

Each accepted connection receives the recorded bus traffic as lines of
`<topic> <payload>` in recording order, then the server closes it.
"""

import socket
import logging
from pathlib import Path
from typing import List, Optional, Union

from .bus import Topic, decode_sample
from .errors import BusError, PowerStackError, TelemetryLogError, WireFormatError
from .rate_limiter import TokenBucket
from .retry import with_retry

logger = logging.getLogger(__name__)

DEFAULT_HOST = '127.0.0.1'


def _check_energy(payload: bytes, lineno: int):
    end, sep, joules = payload.partition(b';')
    try:
        if not sep:
            raise ValueError
        int(end)
        float(joules)
    except ValueError:
        raise TelemetryLogError(f"bad energy payload {payload!r}", lineno)


def parse_log_line(line: str, lineno: int) -> str:
    """
    Check one log line and return it without its newline.

    Raises:
        TelemetryLogError: naming the line number
    """
    text = line.rstrip('\n')
    topic, sep, payload = text.partition(' ')
    if not sep or not payload:
        raise TelemetryLogError("expected '<topic> <payload>'", lineno)
    try:
        segments = Topic.parse(topic).segments
    except BusError as e:
        raise TelemetryLogError(str(e), lineno)
    raw = payload.encode('ascii', errors='replace')
    if len(segments) == 4 and segments[1] == 'jobs' and segments[3] == 'energy':
        _check_energy(raw, lineno)
    elif len(segments) == 5 and segments[4] == 'power':
        try:
            decode_sample(raw + b'\n')
        except WireFormatError as e:
            raise TelemetryLogError(str(e), lineno)
    else:
        raise TelemetryLogError(f"unexpected topic '{topic}'", lineno)
    return text


def read_telemetry_log(path: Union[str, Path]) -> List[str]:
    """All lines of a telemetry log, validated."""
    lines = []
    with open(path, encoding='ascii', errors='replace') as f:
        for lineno, line in enumerate(f, start=1):
            lines.append(parse_log_line(line, lineno))
    return lines


class ReplayServer:
    """
    Serves one recorded log to max_clients sequential connections.

    Binding retries with backoff on OSError; a port of 0 picks a free port,
    available as .port after bind().
    """

    def __init__(
        self,
        lines: List[str],
        host: str = DEFAULT_HOST,
        port: int = 0,
        max_clients: int = 1,
        pacer: Optional[TokenBucket] = None,
        bind_retries: int = 3,
    ):
        if max_clients < 1:
            raise PowerStackError("max_clients must be >= 1")
        self.lines = lines
        self.host = host
        self.port = port
        self.max_clients = max_clients
        self.pacer = pacer
        self.bind_retries = bind_retries
        self.clients_served = 0
        self.lines_sent = 0
        self._sock: Optional[socket.socket] = None

    def bind(self) -> int:
        @with_retry(max_retries=self.bind_retries, base_delay=0.2, retryable_exceptions=(OSError,))
        def _bind() -> socket.socket:
            sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
            try:
                sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
                sock.bind((self.host, self.port))
                sock.listen(self.max_clients)
            except OSError:
                sock.close()
                raise
            return sock

        self._sock = _bind()
        self.port = self._sock.getsockname()[1]
        logger.info(f"Replay server listening on {self.host}:{self.port}")
        return self.port

    def serve(self) -> int:
        """Serve every client, then close. Returns the number of clients served."""
        if not self.lines:
            logger.info("Telemetry log is empty, nothing to replay")
            self.close()
            return 0
        if self._sock is None:
            self.bind()
        try:
            while self.clients_served < self.max_clients:
                conn, addr = self._sock.accept()
                with conn:
                    logger.info(f"Replaying {len(self.lines)} lines to {addr[0]}:{addr[1]}")
                    self._stream(conn)
                self.clients_served += 1
        finally:
            self.close()
        return self.clients_served

    def _stream(self, conn: socket.socket):
        if self.pacer is None:
            conn.sendall(''.join(line + '\n' for line in self.lines).encode('ascii'))
            self.lines_sent += len(self.lines)
            return
        for line in self.lines:
            self.pacer.wait()
            conn.sendall((line + '\n').encode('ascii'))
            self.lines_sent += 1

    def close(self):
        if self._sock is not None:
            self._sock.close()
            self._sock = None
