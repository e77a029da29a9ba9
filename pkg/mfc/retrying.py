"""Retry wrapper for damped fixed-point iterations that diverge."""

import logging
from typing import Callable, TypeVar

from tenacity import Retrying, before_sleep_log, retry_if_exception_type, stop_after_attempt

from config import get_default

from .errors import DivergenceError

logger = logging.getLogger(__name__)

T = TypeVar('T')


def with_damping_backoff(solve: Callable[[float], T], damping: float, label: str,
                         attempts: int = None) -> T:
    """
    Call solve(damping); on DivergenceError retry with the damping halved.
    The last failure is re-raised.
    """
    attempts = attempts or get_default('flow.retry_attempts')
    retryer = Retrying(
        stop=stop_after_attempt(attempts),
        retry=retry_if_exception_type(DivergenceError),
        before_sleep=before_sleep_log(logger, logging.WARNING),
        reraise=True,
    )
    for attempt in retryer:
        with attempt:
            number = attempt.retry_state.attempt_number
            theta = damping / 2 ** (number - 1)
            if number > 1:
                logger.info(f"🔄 {label}: retrying with damping {theta:g} (attempt {number}/{attempts})")
            return solve(theta)
