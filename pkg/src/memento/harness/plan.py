"""Crash plans: what to crash, when, and under which persistence model."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

from ..pmem import CrashMode, CrashModel

NONE = "none"
FULL = "full"
THREAD = "thread"

RANDOM = "random"
OP_COUNT = "op_count"
LABEL = "label"


class PlanError(ValueError):
    pass


@dataclass(frozen=True)
class CrashPlan:
    """``kind`` is ``none``, ``full`` (whole system) or ``thread``.

    Triggers: ``random`` picks ``count`` global operation counts and crashes a
    random number of steps (< ``jitter``) after each; ``op_count`` crashes at
    the first labeled point after each count in ``at``; ``label`` crashes at
    the ``nth`` execution of ``label`` (``count`` times, counting anew after
    each crash).  ``tid`` restricts thread crashes to one thread.
    """

    kind: str = NONE
    trigger: str = RANDOM
    count: int = 0
    at: tuple = ()
    label: Optional[str] = None
    nth: int = 1
    tid: Optional[int] = None
    jitter: int = 400
    model: CrashModel = field(default_factory=CrashModel)

    def __post_init__(self):
        if self.kind not in (NONE, FULL, THREAD):
            raise PlanError(f"unknown crash kind {self.kind!r}")
        if self.trigger not in (RANDOM, OP_COUNT, LABEL):
            raise PlanError(f"unknown trigger {self.trigger!r}")
        if self.trigger == LABEL and not self.label:
            raise PlanError("label trigger needs a label")
        if self.model.mode is CrashMode.ENUMERATE:
            raise PlanError("enumerate mode belongs to crash windows, not plans")
        if self.count < 0 or self.nth < 1 or self.jitter < 1:
            raise PlanError("count, nth and jitter must be positive")

    @property
    def crashes(self) -> int:
        if self.kind == NONE:
            return 0
        return len(self.at) if self.trigger == OP_COUNT else self.count

    @classmethod
    def full(cls, count: int, **kw) -> "CrashPlan":
        return cls(kind=FULL, count=count, **kw)

    @classmethod
    def thread(cls, count: int, **kw) -> "CrashPlan":
        return cls(kind=THREAD, count=count, **kw)

    @classmethod
    def parse(cls, text: str) -> "CrashPlan":
        """Parse ``key=value`` lines; ``#`` starts a comment."""
        kw: dict = {}
        model, seed = CrashMode.REVERT_ALL_DIRTY.value, 0
        for n, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = (s.strip() for s in line.partition("="))
            if not sep:
                raise PlanError(f"line {n}: expected key=value")
            try:
                if key in ("kind", "trigger", "label"):
                    kw[key] = value
                elif key in ("count", "nth", "jitter"):
                    kw[key] = int(value)
                elif key == "tid":
                    kw[key] = int(value)
                elif key == "at":
                    kw[key] = tuple(int(x) for x in value.split(",") if x.strip())
                elif key == "model":
                    model = value
                elif key == "seed":
                    seed = int(value)
                else:
                    raise PlanError(f"line {n}: unknown key {key!r}")
            except ValueError as exc:
                if isinstance(exc, PlanError):
                    raise
                raise PlanError(f"line {n}: bad value for {key}: {value!r}") from None
        try:
            kw["model"] = CrashModel.parse(model, seed)
        except ValueError:
            raise PlanError(f"unknown crash model {model!r}") from None
        return cls(**kw)

    @classmethod
    def load(cls, path: Union[str, Path]) -> "CrashPlan":
        return cls.parse(Path(path).read_text())
