"""Monitor, crash injection and verification."""
from .log import HistoryLog
from .plan import CrashPlan
from .runner import RunConfig, RunResult, run, run_threads
from .system import STRUCTURES, System

__all__ = ["HistoryLog", "CrashPlan", "RunConfig", "RunResult", "run", "run_threads",
           "STRUCTURES", "System"]
