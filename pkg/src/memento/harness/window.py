"""Exhaustive crash-image enumeration over a window of labeled points.

:func:`enumerate_crash_window` runs a script with a probe hook installed.
From the first point labeled ``label_from`` up to and including the next
``label_to`` (``None`` means the start or the end of the script), every point
reached is a crash site: every subset of the pool's dirty lines is turned
into an image and handed to ``check``, which boots it, recovers and returns
a list of problems.  The window reopens at every later ``label_from``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

from .. import probe
from ..pmem import CrashModel, PmemPool


@dataclass
class Verdict:
    label: str
    index: int
    images: int
    problems: list = field(default_factory=list)
    #: the first image that failed its check, kept for post-mortems
    image: Optional[bytes] = None


@dataclass
class WindowReport:
    verdicts: list = field(default_factory=list)

    @property
    def images(self) -> int:
        return sum(v.images for v in self.verdicts)

    @property
    def problems(self) -> list:
        return [f"{v.label}#{v.index}: {p}" for v in self.verdicts for p in v.problems]

    @property
    def ok(self) -> bool:
        return not self.problems and bool(self.verdicts)

    def first_bad_image(self) -> Optional[bytes]:
        return next((v.image for v in self.verdicts if v.image is not None), None)

    def extend(self, other: "WindowReport") -> "WindowReport":
        self.verdicts.extend(other.verdicts)
        return self


def enumerate_crash_window(label_from: Optional[str], label_to: Optional[str],
                           op_script: Callable[[], None], pool: Callable[[], PmemPool],
                           check: Callable[[bytes, str], list],
                           inner_hook: Optional[Callable[[str], None]] = None) -> WindowReport:
    """Crash at every point of the window under the enumerate model.

    ``pool`` returns the pool the script mutates.  ``inner_hook`` is chained
    after the window logic so scenarios can interleave threads.
    """
    report = WindowReport()
    state = {"open": label_from is None, "n": 0}

    def visit(label: str) -> None:
        images = 0
        problems: list = []
        first_bad = None
        prev_hook = probe.set_hook(None)
        prev_tracer = probe.set_tracer(None)
        try:
            for image in pool().crash(CrashModel.enumerate()):
                images += 1
                found = check(image, label)
                if found and first_bad is None:
                    first_bad = bytes(image)
                problems.extend(found)
        finally:
            probe.set_hook(prev_hook)
            probe.set_tracer(prev_tracer)
        report.verdicts.append(Verdict(label, state["n"], images, problems, first_bad))
        state["n"] += 1

    def hook(label: str) -> None:
        if not state["open"] and label == label_from:
            state["open"] = True
        if state["open"]:
            visit(label)
            if label == label_to:
                state["open"] = False
        if inner_hook is not None:
            inner_hook(label)

    prev = probe.set_hook(hook)
    try:
        op_script()
    finally:
        probe.set_hook(prev)
    if state["open"] and label_to is None:
        visit("<end>")
    return report


def boot_image(image: bytes) -> PmemPool:
    return PmemPool.from_image(image)
