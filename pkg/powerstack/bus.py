"""
In-process topic/subscriber bus.

MQTT-style topic filters ('+' one level, '#' trailing levels), at-most-once
delivery with no retained messages, and the single-sample text payload
`<timestamp_ns>;<power_uw>\\n`.
"""

import logging
import threading
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Deque, List, Optional, Tuple, Union

from .errors import BusError, WireFormatError
from .telemetry import PowerSample

logger = logging.getLogger(__name__)

TOPIC_ROOT = 'davide'
MAX_TOPIC_BYTES = 256
SINGLE_LEVEL = '+'
MULTI_LEVEL = '#'


def _split(text: str, kind: str) -> Tuple[str, ...]:
    if not isinstance(text, str) or not text:
        raise BusError(f"empty {kind}")
    if len(text.encode('utf-8')) > MAX_TOPIC_BYTES:
        raise BusError(f"{kind} longer than {MAX_TOPIC_BYTES} bytes")
    segments = tuple(text.split('/'))
    if any(not s for s in segments):
        raise BusError(f"{kind} '{text}' has an empty level")
    return segments


@dataclass(frozen=True)
class Topic:
    segments: Tuple[str, ...]

    @classmethod
    def parse(cls, text: str) -> 'Topic':
        segments = _split(text, 'topic')
        for s in segments:
            if SINGLE_LEVEL in s or MULTI_LEVEL in s:
                raise BusError(f"topic '{text}' contains a wildcard")
        return cls(segments)

    def __str__(self):
        return '/'.join(self.segments)


@dataclass(frozen=True)
class TopicFilter:
    segments: Tuple[str, ...]

    @classmethod
    def parse(cls, text: str) -> 'TopicFilter':
        segments = _split(text, 'filter')
        for i, s in enumerate(segments):
            if s in (SINGLE_LEVEL, MULTI_LEVEL):
                if s == MULTI_LEVEL and i != len(segments) - 1:
                    raise BusError(f"filter '{text}': '#' must be the last level")
                continue
            if SINGLE_LEVEL in s or MULTI_LEVEL in s:
                raise BusError(f"filter '{text}': wildcards must occupy a whole level")
        return cls(segments)

    def __str__(self):
        return '/'.join(self.segments)


def _as_topic(topic: Union[str, Topic]) -> Topic:
    return topic if isinstance(topic, Topic) else Topic.parse(topic)


def _as_filter(pattern: Union[str, TopicFilter]) -> TopicFilter:
    return pattern if isinstance(pattern, TopicFilter) else TopicFilter.parse(pattern)


def topic_matches(pattern: Union[str, TopicFilter], topic: Union[str, Topic]) -> bool:
    """'+' matches exactly one level, a trailing '#' matches zero or more levels."""
    f = _as_filter(pattern).segments
    t = _as_topic(topic).segments
    for i, segment in enumerate(f):
        if segment == MULTI_LEVEL:
            return True
        if i >= len(t):
            return False
        if segment != SINGLE_LEVEL and segment != t[i]:
            return False
    return len(f) == len(t)


@dataclass(frozen=True)
class Envelope:
    topic: str
    payload: bytes
    publish_seq: int


class Subscription:
    """Handle returned by MessageBus.subscribe; envelopes queue in `inbox`."""

    def __init__(self, pattern: TopicFilter, callback: Optional[Callable[[Envelope], None]] = None):
        self.filter = pattern
        self.callback = callback
        self.inbox: Deque[Envelope] = deque()
        self.active = True

    def deliver(self, envelope: Envelope):
        if self.callback is not None:
            self.callback(envelope)
        else:
            self.inbox.append(envelope)

    def drain(self) -> List[Envelope]:
        items = list(self.inbox)
        self.inbox.clear()
        return items

    def __len__(self):
        return len(self.inbox)


class MessageBus:
    """
    Serialises publishes into one total order.

    Subscriptions either queue envelopes in their inbox or hand them to a
    callback; callbacks run on the publishing thread, under the bus lock.
    """

    def __init__(self):
        self._lock = threading.RLock()
        self._subscriptions: List[Subscription] = []
        self._next_seq = 0

    @property
    def published(self) -> int:
        return self._next_seq

    def subscribe(
        self,
        pattern: Union[str, TopicFilter],
        callback: Optional[Callable[[Envelope], None]] = None,
    ) -> Subscription:
        subscription = Subscription(_as_filter(pattern), callback)
        with self._lock:
            self._subscriptions.append(subscription)
        logger.debug(f"Subscribed to {subscription.filter}")
        return subscription

    def unsubscribe(self, subscription: Subscription):
        with self._lock:
            if subscription in self._subscriptions:
                self._subscriptions.remove(subscription)
            subscription.active = False

    def publish(self, topic: Union[str, Topic], payload: bytes) -> int:
        """Deliver to every matching subscription; returns the number of deliveries."""
        parsed = _as_topic(topic)
        with self._lock:
            envelope = Envelope(str(parsed), bytes(payload), self._next_seq)
            self._next_seq += 1
            delivered = 0
            for subscription in list(self._subscriptions):
                if topic_matches(subscription.filter, parsed):
                    subscription.deliver(envelope)
                    delivered += 1
        return delivered


def encode_sample(sample: PowerSample) -> bytes:
    return f"{sample.timestamp_ns};{sample.power_uw}\n".encode('ascii')


def _parse_int(data: bytes, offset: int, what: str, signed: bool) -> int:
    if not data:
        raise WireFormatError(f"empty {what}", offset)
    start = 0
    if data[:1] == b'-':
        if not signed:
            raise WireFormatError(f"negative {what}", offset)
        start = 1
    digits = data[start:]
    if not digits:
        raise WireFormatError(f"{what} has no digits", offset + start)
    for i, byte in enumerate(digits):
        if not 0x30 <= byte <= 0x39:
            raise WireFormatError(f"non-digit byte {bytes([byte])!r} in {what}", offset + start + i)
    if len(digits) > 1 and digits[:1] == b'0':
        raise WireFormatError(f"leading zero in {what}", offset + start)
    if start and digits == b'0':
        raise WireFormatError(f"negative zero in {what}", offset)
    return int(digits) * (-1 if start else 1)


def decode_sample(data: bytes, node_id: str = '', channel: str = '') -> PowerSample:
    """
    Parse `<timestamp_ns>;<power_uw>\\n`.

    Raises:
        WireFormatError with the byte offset of the first offending byte
    """
    if not data.endswith(b'\n'):
        raise WireFormatError("missing trailing newline", len(data))
    body = data[:-1]
    separator = body.find(b';')
    if separator < 0:
        raise WireFormatError("missing ';' separator", len(body))
    timestamp = _parse_int(body[:separator], 0, 'timestamp', signed=True)
    power = _parse_int(body[separator + 1:], separator + 1, 'power', signed=False)
    return PowerSample(node_id, channel, timestamp, power)


def sample_topic(root: str, rack_id: str, node_id: str, channel: str) -> str:
    return f"{root}/{rack_id}/{node_id}/{channel}/power"


def job_energy_topic(root: str, job_id: str) -> str:
    return f"{root}/jobs/{job_id}/energy"


def parse_sample_topic(topic: str) -> Tuple[str, str, str]:
    """(rack, node, channel) of a sample topic."""
    segments = Topic.parse(topic).segments
    if len(segments) != 5 or segments[-1] != 'power' or segments[1] == 'jobs':
        raise BusError(f"'{topic}' is not a sample topic")
    return segments[1], segments[2], segments[3]


def encode_energy(end_ns: int, energy_j: float) -> bytes:
    """Job energy-to-solution payload: `<end_ns>;<joules>\\n`."""
    return f"{end_ns};{energy_j:.6f}\n".encode('ascii')


@dataclass
class TelemetryRecorder:
    """Captures every envelope under a filter as `<topic> <payload>` log lines."""
    bus: MessageBus
    pattern: str = f"{TOPIC_ROOT}/#"
    lines: List[str] = field(default_factory=list)

    def __post_init__(self):
        self.subscription = self.bus.subscribe(self.pattern, self._record)

    def _record(self, envelope: Envelope):
        payload = envelope.payload.decode('ascii').rstrip('\n')
        self.lines.append(f"{envelope.topic} {payload}")

    def close(self):
        self.bus.unsubscribe(self.subscription)

    def write(self, path: Path):
        with open(path, 'w', encoding='ascii', newline='\n') as f:
            for line in self.lines:
                f.write(line + '\n')
