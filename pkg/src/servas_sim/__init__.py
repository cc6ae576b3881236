"""Behavioral simulator of a tweak-authenticated memory-encryption isolation
primitive and the enclave architecture built on it."""

from .machine import AccessKind, Machine
from .mee import AuthenticationError, Mee
from .monitor import SecurityMonitor
from .scenarios import builtin_suite, run_scenario
from .tweak import PageType, SwTweak

__version__ = "0.1.0"

__all__ = [
    "AccessKind",
    "AuthenticationError",
    "Machine",
    "Mee",
    "PageType",
    "SecurityMonitor",
    "SwTweak",
    "builtin_suite",
    "run_scenario",
    "__version__",
]
