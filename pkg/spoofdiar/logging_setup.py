"""
Logging configuration
structlog events rendered through the standard logging handlers
"""

import logging
import os
import sys

import structlog

_CONFIGURED = False


def configure_logging(level: str = None, force: bool = False) -> None:
    """Configure stdlib logging and route structlog through it"""
    global _CONFIGURED
    if _CONFIGURED and not force:
        return

    level_name = (level or os.environ.get("SPOOFDIAR_LOG_LEVEL", "INFO")).upper()
    numeric_level = getattr(logging, level_name, logging.INFO)

    logging.basicConfig(
        level=numeric_level,
        format="%(message)s",
        stream=sys.stderr,
        force=force,
    )

    structlog.configure(
        processors=[
            structlog.contextvars.merge_contextvars,
            structlog.stdlib.filter_by_level,
            structlog.stdlib.add_logger_name,
            structlog.stdlib.add_log_level,
            structlog.processors.TimeStamper(fmt="iso"),
            structlog.processors.StackInfoRenderer(),
            structlog.processors.format_exc_info,
            structlog.dev.ConsoleRenderer(colors=False),
        ],
        logger_factory=structlog.stdlib.LoggerFactory(),
        wrapper_class=structlog.stdlib.BoundLogger,
        cache_logger_on_first_use=True,
    )
    _CONFIGURED = True
