"""Static memento layouts for the detectable data structures.

A root memento is a fixed record of sub-mementos, one per syntactic
sub-operation.  Fields are packed into cachelines so that no field straddles
a line, which keeps every two-slot checkpoint a single-flush operation.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Union

from ..checkpoint import CheckpointSlots
from ..dcas import CasMemento
from ..pmem import LINE
from ..runtime import Runtime

CKPT = "checkpoint"
CAS = "cas"


@dataclass(frozen=True)
class Field:
    name: str
    kind: str
    #: buffer words of a checkpoint field
    nwords: int = 1
    #: indices of buffer words that hold block handles (use-after-free sweep)
    handles: tuple = ()

    @property
    def size(self) -> int:
        return CheckpointSlots.size_for(self.nwords) if self.kind == CKPT else CasMemento.SIZE

    @property
    def align(self) -> int:
        # a checkpoint pair of 2^k bytes is aligned to 2^k so it never straddles
        size = self.size
        return size if size & (size - 1) == 0 else 16


def pack(fields: tuple[Field, ...]) -> tuple[dict[str, int], int]:
    """Assign each field a byte offset; returns ``(offsets, total_size)``."""
    offsets: dict[str, int] = {}
    pos = 0
    for f in sorted(fields, key=lambda f: -f.size):
        if f.size > LINE:
            raise ValueError(f"field {f.name} larger than a cacheline")
        pos = -(-pos // f.align) * f.align
        if pos // LINE != (pos + f.size - 1) // LINE:
            pos = -(-pos // LINE) * LINE
        offsets[f.name] = pos
        pos += f.size
    names = [f.name for f in fields]
    if len(set(names)) != len(names):
        raise ValueError(f"duplicate field names in {names}")
    return {n: offsets[n] for n in names}, -(-pos // LINE) * LINE


Sub = Union[CheckpointSlots, CasMemento]


class Memento:
    """Sub-memento objects bound to a line-aligned region of the pool."""

    def __init__(self, rt: Runtime, base: int, fields: tuple[Field, ...]):
        if base % LINE:
            raise ValueError(f"memento base {base:#x} is not line aligned")
        offsets, self.size = pack(fields)
        self.base = base
        self.fields = fields
        self.subs: dict[str, Sub] = {}
        for f in fields:
            off = base + offsets[f.name]
            sub = CheckpointSlots(rt, off, f.nwords) if f.kind == CKPT else CasMemento(rt, off)
            self.subs[f.name] = sub
            setattr(self, f.name, sub)

    def __iter__(self) -> Iterator[Sub]:
        return iter(self.subs.values())

    def clear(self, flush: bool = True) -> None:
        for sub in self.subs.values():
            sub.clear(flush)

    def lines(self) -> set:
        out: set = set()
        for sub in self.subs.values():
            out |= sub.lines()
        return out

    def timestamps(self) -> Iterator[int]:
        for sub in self.subs.values():
            yield sub.max_timestamp()

    def cas_words(self) -> Iterator[int]:
        for sub in self.subs.values():
            if isinstance(sub, CasMemento):
                yield sub.load()

    def handles(self) -> Iterator[int]:
        """Block handles in the latest slot of every checkpoint field."""
        for f in self.fields:
            if not f.handles:
                continue
            got = self.subs[f.name].peek()
            if got is None:
                continue
            value = got[1] if isinstance(got[1], tuple) else (got[1],)
            for i in f.handles:
                yield value[i]


def layout_size(fields: tuple[Field, ...]) -> int:
    return pack(fields)[1]
