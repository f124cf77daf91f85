"""Append-only history of invocations, responses and ground-truth events.

One record per line: ``boot,seq,tid,kind,op,args,result,ts``.  ``seq`` is the
per-thread sequence number of the logical operation and ``ts`` the position
of the record in the log.  The log lives outside the pool so it survives
every simulated crash.
"""
from __future__ import annotations

from pathlib import Path
from typing import Iterable, Iterator, NamedTuple, Optional, Union

FIELDS = ("boot", "seq", "tid", "kind", "op", "args", "result", "ts")

INV = "inv"
RES = "res"
CRASH = "crash"
THREAD_CRASH = "tcrash"
BOOT = "boot"
RETIRE = "retire"
FREE = "free"


class Event(NamedTuple):
    boot: int
    seq: int
    tid: int
    kind: str
    op: str
    args: str
    result: str
    ts: int

    def line(self) -> str:
        return ",".join(str(x) for x in self)

    @classmethod
    def parse(cls, line: str) -> "Event":
        b, s, t, k, o, a, r, ts = line.rstrip("\n").split(",")
        return cls(int(b), int(s), int(t), k, o, a, r, int(ts))


class HistoryLog:
    def __init__(self, path: Union[str, Path, None] = None):
        self.events: list[Event] = []
        self.boot = 0
        self._fh = open(path, "w") if path is not None else None

    def append(self, seq: int, tid: int, kind: str, op: str = "", args="", result="") -> Event:
        ev = Event(self.boot, seq, tid, kind, op, str(args), str(result), len(self.events))
        self.events.append(ev)
        if self._fh is not None:
            self._fh.write(ev.line() + "\n")
            if kind in (CRASH, THREAD_CRASH):
                self._fh.flush()
        return ev

    def new_boot(self) -> int:
        self.boot += 1
        self.append(0, 0, BOOT)
        return self.boot

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None

    def __iter__(self) -> Iterator[Event]:
        return iter(self.events)

    def __len__(self) -> int:
        return len(self.events)

    def text(self) -> str:
        return "".join(ev.line() + "\n" for ev in self.events)

    def save(self, path: Union[str, Path]) -> None:
        Path(path).write_text(self.text())

    @classmethod
    def load(cls, path: Union[str, Path]) -> "HistoryLog":
        log = cls()
        log.events = [Event.parse(ln) for ln in Path(path).read_text().splitlines() if ln]
        log.boot = max((e.boot for e in log.events), default=0)
        return log

    def of_kind(self, *kinds: str) -> list[Event]:
        return [e for e in self.events if e.kind in kinds]


def parse_lines(lines: Iterable[str]) -> list[Event]:
    return [Event.parse(ln) for ln in lines if ln.strip()]


def fmt_result(value: Optional[int], empty: int) -> str:
    if value is None:
        return ""
    return "empty" if value == empty else str(value)
