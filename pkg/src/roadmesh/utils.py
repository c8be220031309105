"""Logging setup and memory monitoring for simulation runs."""

import functools
import gc
import logging
import os
from typing import Any, Callable

import psutil

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(levelname)s %(name)s: %(message)s"


def configure_logging(verbose: int = 0) -> None:
    """Configure the root logger once, at the command-line entry point."""
    level = logging.WARNING
    if verbose == 1:
        level = logging.INFO
    elif verbose >= 2:
        level = logging.DEBUG
    logging.basicConfig(level=level, format=LOG_FORMAT)


def get_process_memory() -> float:
    """Get current memory usage in MB."""
    process = psutil.Process(os.getpid())
    return process.memory_info().rss / 1024 / 1024


def monitor_memory(threshold_mb: float = 50.0):
    """Decorator that warns when a call grows the process by more than ``threshold_mb``.

    Args:
        threshold_mb: Allowed growth in MB
    """
    def decorator(func: Callable) -> Callable:
        @functools.wraps(func)
        def wrapper(*args, **kwargs) -> Any:
            initial_memory = get_process_memory()
            try:
                result = func(*args, **kwargs)
            except Exception as e:
                logger.error(f"Error in {func.__name__}: {e}")
                raise

            memory_used = get_process_memory() - initial_memory
            if memory_used > threshold_mb:
                logger.warning(
                    f"{func.__name__} used {memory_used:.2f}MB of memory "
                    f"(threshold: {threshold_mb}MB)"
                )
                gc.collect()
            return result

        return wrapper
    return decorator
