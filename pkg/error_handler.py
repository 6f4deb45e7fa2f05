import logging
import traceback
from typing import Dict, Optional

from pydantic import ValidationError

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_USAGE = 2
EXIT_NUMERICAL = 3


class GateDapError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(GateDapError, ValueError):
    pass


class DomainError(GateDapError, ValueError):
    pass


class UsageError(GateDapError):
    pass


class InputError(GateDapError):
    pass


class FormatError(GateDapError):
    pass


class ConfigError(GateDapError):
    pass


class CheckFailure(GateDapError):
    pass


class NumericalAbort(GateDapError):
    """Training produced a non-finite loss."""

    def __init__(self, step: int, loss: float, param_norms: Optional[Dict[str, float]] = None):
        self.step = step
        self.loss = loss
        self.param_norms = param_norms or {}
        # NaN norms first, then the largest
        worst = sorted(self.param_norms.items(), key=lambda kv: (kv[1] != kv[1], kv[1]), reverse=True)[:5]
        summary = ", ".join(f"{name}={norm:.3g}" for name, norm in worst)
        super().__init__(f"non-finite loss {loss} at step {step}; largest parameter norms: {summary}")


def exit_code_for(error: BaseException) -> int:
    if isinstance(error, CheckFailure):
        return EXIT_CHECK_FAILED
    if isinstance(error, NumericalAbort):
        return EXIT_NUMERICAL
    return EXIT_USAGE


def report_error(error: BaseException) -> int:
    """Log an error the way the CLI reports it and return its exit code."""
    if isinstance(error, ValidationError):
        for item in error.errors():
            location = ".".join(str(part) for part in item.get("loc", ()))
            logger.error(f"❌ Config error at '{location}': {item.get('msg')}")

    elif isinstance(error, NumericalAbort):
        logger.error(f"❌ Numerical abort: {error}")

    elif isinstance(error, CheckFailure):
        logger.error(f"❌ Check failed: {error}")

    elif isinstance(error, (UsageError, InputError, FormatError, ConfigError, ShapeError, DomainError)):
        logger.error(f"❌ {type(error).__name__}: {error}")

    elif isinstance(error, OSError):
        logger.error(f"❌ I/O error: {error}")

    else:
        # Log full traceback for unhandled errors
        logger.error(f"Unhandled error: {error}\n{traceback.format_exc()}")

    return exit_code_for(error)
