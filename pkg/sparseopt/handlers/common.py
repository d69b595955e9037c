"""
Shared result plumbing for the subcommand handlers.
"""

import functools
import logging
from typing import Callable, Dict

from ..exceptions import DivergenceError, NonFiniteGradientError, SparseOptError

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DIVERGED = 2


def ok(message: str, **fields) -> Dict:
    return {"exit_code": EXIT_OK, "message": message, **fields}


def failed(message: str, exit_code: int = EXIT_USAGE, **fields) -> Dict:
    return {"exit_code": exit_code, "message": message, **fields}


def guarded(handler: Callable[[Dict], Dict]) -> Callable[[Dict], Dict]:
    """Turn library exceptions into result dicts with an exit code."""

    @functools.wraps(handler)
    def wrapper(args: Dict) -> Dict:
        try:
            return handler(args)
        except (DivergenceError, NonFiniteGradientError) as e:
            logger.debug("numerical failure in %s", handler.__name__, exc_info=True)
            return failed(str(e), EXIT_DIVERGED)
        except (SparseOptError, ValueError, KeyError) as e:
            logger.debug("%s rejected its input", handler.__name__, exc_info=True)
            return failed(f"{type(e).__name__}: {e}")
        except OSError as e:
            return failed(f"I/O error: {e}")

    return wrapper
