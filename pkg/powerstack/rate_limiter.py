"""
Token bucket for pacing replayed telemetry.

A replay normally streams as fast as the client reads; with a pace set,
lines leave at a steady rate with a bounded burst, like a live gateway.
"""

import time
import threading
import logging
from dataclasses import dataclass
from typing import Callable

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class PacingConfig:
    lines_per_second: float = 1000.0
    burst: float = 100.0

    def __post_init__(self):
        if self.lines_per_second <= 0 or self.burst < 1:
            raise ValueError("lines_per_second must be > 0 and burst >= 1")


class TokenBucket:
    """
    Tokens refill at a fixed rate up to max_tokens; each line costs one.

    clock and sleep are injectable so tests can drive time by hand.
    """

    def __init__(
        self,
        tokens_per_second: float,
        max_tokens: float,
        clock: Callable[[], float] = time.monotonic,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.tokens_per_second = tokens_per_second
        self.max_tokens = max_tokens
        self.tokens = max_tokens
        self._clock = clock
        self._sleep = sleep
        self.last_update = clock()
        self.total_wait = 0.0
        self._lock = threading.Lock()

    @classmethod
    def from_config(cls, config: PacingConfig, **kwargs) -> 'TokenBucket':
        return cls(config.lines_per_second, config.burst, **kwargs)

    def _refill(self):
        now = self._clock()
        elapsed = now - self.last_update
        self.tokens = min(self.max_tokens, self.tokens + elapsed * self.tokens_per_second)
        self.last_update = now

    def acquire(self, tokens: float = 1) -> float:
        """
        Take tokens if available.

        Returns:
            0.0 on success, otherwise the seconds until enough tokens exist
        """
        with self._lock:
            self._refill()
            if self.tokens >= tokens:
                self.tokens -= tokens
                return 0.0
            return (tokens - self.tokens) / self.tokens_per_second

    def try_acquire(self, tokens: float = 1) -> bool:
        with self._lock:
            self._refill()
            if self.tokens >= tokens:
                self.tokens -= tokens
                return True
            return False

    def wait(self, tokens: float = 1) -> float:
        """Block until tokens are taken; returns the time waited."""
        waited = 0.0
        while True:
            delay = self.acquire(tokens)
            if delay == 0.0:
                break
            self._sleep(delay)
            waited += delay
        self.total_wait += waited
        if waited:
            logger.debug(f"Paced, waited {waited:.3f}s")
        return waited
