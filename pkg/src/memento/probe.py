"""Labeled yield points, coverage counters and ground-truth tracing.

Every detectable algorithm calls :func:`point` at its numbered steps.  With no
hook installed the call is a cheap no-op; the scripted scheduler installs a
hook that may switch to another simulated thread or kill the current one.
"""
from __future__ import annotations

from collections import Counter
from typing import Any, Callable, Optional

import greenlet

_hook: Optional[Callable[[str], None]] = None
_tracer: Optional[Callable[..., Any]] = None

#: label -> number of times the labeled recovery state was entered
coverage: Counter = Counter()

current = greenlet.getcurrent


def point(label: str) -> None:
    hook = _hook
    if hook is not None:
        hook(label)


def cover(label: str) -> None:
    coverage[label] += 1
    hook = _hook
    if hook is not None:
        hook(label)


def trace(kind: str, *args: Any) -> Any:
    tracer = _tracer
    if tracer is not None:
        return tracer(kind, *args)
    return None


def set_hook(hook: Optional[Callable[[str], None]]) -> Optional[Callable[[str], None]]:
    global _hook
    prev, _hook = _hook, hook
    return prev


def set_tracer(tracer: Optional[Callable[..., Any]]) -> Optional[Callable[..., Any]]:
    global _tracer
    prev, _tracer = _tracer, tracer
    return prev


def reset_coverage() -> None:
    coverage.clear()
