"""Per-boot environment shared by every detectable object."""
from __future__ import annotations

from dataclasses import dataclass, field

from .clock import Clock, GlobalArrays
from .pmem import PmemPool

DEFAULT_PATIENCE = 100


@dataclass
class Runtime:
    pool: PmemPool
    clock: Clock = field(default_factory=Clock)
    arrays: GlobalArrays = None  # type: ignore[assignment]
    patience: int = DEFAULT_PATIENCE
    #: test-only: skip DeferFlush on the delete path to reproduce the
    #: use-after-free that a missing flush before reclamation causes
    omit_delete_flush: bool = False
    help_count: int = 0

    def __post_init__(self):
        if self.arrays is None:
            self.arrays = GlobalArrays(self.pool)
