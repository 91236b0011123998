"""
Retry with exponential backoff.

The replay server wraps its socket bind in this, so a rerun can start
while the previous run's listening port is still being released.
"""

import time
import random
import logging
import functools
from typing import Callable, Iterator, Optional, Tuple, Type

logger = logging.getLogger(__name__)

RETRYABLE_EXCEPTIONS: Tuple[Type[Exception], ...] = (
    ConnectionError,
    TimeoutError,
    OSError,
)


def backoff_delays(
    retries: int,
    base_delay: float,
    max_delay: float,
    exponential_base: float,
    jitter: bool,
) -> Iterator[float]:
    """Delays before each retry: base * growth**n, capped, optionally scaled by [0.75, 1.25)."""
    for n in range(retries):
        delay = min(base_delay * exponential_base ** n, max_delay)
        yield delay * (0.75 + random.random() * 0.5) if jitter else delay


def with_retry(
    max_retries: int = 3,
    base_delay: float = 0.5,
    max_delay: float = 10.0,
    exponential_base: float = 2.0,
    jitter: bool = True,
    retryable_exceptions: Optional[Tuple[Type[Exception], ...]] = None,
    sleep: Callable[[float], None] = time.sleep,
):
    """
    Decorator: call again after a retryable exception, up to max_retries times.

    The last exception propagates once retries run out; anything not in
    retryable_exceptions propagates immediately.
    """
    retry_on = retryable_exceptions or RETRYABLE_EXCEPTIONS

    def decorator(func: Callable):
        @functools.wraps(func)
        def wrapper(*args, **kwargs):
            delays = backoff_delays(max_retries, base_delay, max_delay, exponential_base, jitter)
            attempt = 1
            while True:
                try:
                    return func(*args, **kwargs)
                except retry_on as e:
                    delay = next(delays, None)
                    if delay is None:
                        logger.error(f"{func.__name__}: giving up after {attempt} attempts ({e})")
                        raise
                    logger.warning(f"{func.__name__}: attempt {attempt} failed ({e}), retrying in {delay:.2f}s")
                    sleep(delay)
                    attempt += 1

        return wrapper
    return decorator
