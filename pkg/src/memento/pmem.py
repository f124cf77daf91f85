"""Simulated persistent memory.

A pool is two byte buffers of equal size: ``mem`` is what the CPUs see
(cache-coherent content, possibly unflushed) and ``image`` is what the
persistent media holds.  ``flush`` copies one 64-byte line from ``mem`` to
``image``; a crash rebuilds ``mem`` from ``image`` plus whichever dirty lines
the crash model lets survive.  Whole lines are persisted at once, which gives
the single-cacheline ordering guarantee for free.

Offsets are pool-relative, so images are position independent.  Offset 0
holds the pool header and doubles as the null block handle.

Header layout (all words little-endian, 4 KiB total)::

    0    magic b"MMTK" + u32 version
    8    capacity in bytes
    16   cacheline size
    24   max threads P
    32   root_offset          application root record (0 = none)
    40   clearing_offset      per-thread root memento records, one line each
    48   help_offset          HELP[2][P] timestamp words
    56   heap_start
    64   heap_top             allocator high-water mark (own cacheline)
"""
from __future__ import annotations

import enum
import itertools
import mmap
import os
import random
import struct
import sys
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional, Union

from . import probe

if sys.byteorder != "little":  # pragma: no cover
    raise ImportError("the pool simulator assumes a little-endian host")

LINE = 64
HEADER_SIZE = 4096
MAGIC = b"MMTK"
VERSION = 1
MAX_CAPACITY = 1 << 45
OFFSET_BITS = 45
OFFSET_MASK = (1 << OFFSET_BITS) - 1
WORD_MASK = (1 << 64) - 1
DEFAULT_THREADS = 64
MAX_ENUMERATED_LINES = 12

H_MAGIC = 0
H_CAPACITY = 8
H_LINE = 16
H_NTHREADS = 24
H_ROOT = 32
H_CLEARING = 40
H_HELP = 48
H_HEAP_START = 56
H_HEAP_TOP = 64

NULL = 0


class PoolError(Exception):
    pass


class UnrecoverablePoolError(PoolError):
    """The pool header or allocator metadata is corrupt."""


class PoolConfigError(PoolError):
    pass


class PoolUsageError(PoolError, ValueError):
    """Misaligned or out-of-bounds access."""


class CrashExplosionError(PoolError):
    """Too many dirty lines to enumerate every crash image."""


class PoolFullError(PoolError, MemoryError):
    pass


class DoubleFreeError(PoolError):
    pass


class CrashMode(enum.Enum):
    REVERT_ALL_DIRTY = "revert_all_dirty"
    PER_LINE_RANDOM = "per_line_random"
    ENUMERATE = "enumerate"


@dataclass(frozen=True)
class CrashModel:
    mode: CrashMode = CrashMode.REVERT_ALL_DIRTY
    seed: int = 0

    @classmethod
    def revert_all_dirty(cls) -> "CrashModel":
        return cls(CrashMode.REVERT_ALL_DIRTY)

    @classmethod
    def per_line_random(cls, seed: int) -> "CrashModel":
        return cls(CrashMode.PER_LINE_RANDOM, seed)

    @classmethod
    def enumerate(cls) -> "CrashModel":
        return cls(CrashMode.ENUMERATE)

    @classmethod
    def parse(cls, text: str, seed: int = 0) -> "CrashModel":
        return cls(CrashMode(text), seed)


@dataclass
class PmemStats:
    flush: int = 0
    flush_opt: int = 0
    sfence: int = 0
    cas: int = 0

    @property
    def flushes(self) -> int:
        """Flush instructions issued (``flush`` plus ``flush_opt``)."""
        return self.flush + self.flush_opt

    def reset(self) -> None:
        self.flush = self.flush_opt = self.sfence = self.cas = 0


@dataclass(frozen=True)
class LineState:
    snapshot: bytes
    dirty: bool


PostCrashImage = bytes


def _is_pow2(n: int) -> bool:
    return n > 0 and n & (n - 1) == 0


def header_layout(capacity: int, nthreads: int) -> dict[str, int]:
    help_off = HEADER_SIZE
    clearing_off = help_off + _round_up(2 * nthreads * 8, LINE)
    heap_start = clearing_off + nthreads * LINE
    if heap_start >= capacity:
        raise PoolConfigError(f"capacity {capacity} too small for {nthreads} threads")
    return {"help": help_off, "clearing": clearing_off, "heap_start": heap_start}


def _round_up(n: int, to: int) -> int:
    return (n + to - 1) // to * to


class PmemPool:
    """File-backed (or purely in-memory) simulated persistent memory pool."""

    def __init__(self, mem: bytearray, image, path: Optional[Path] = None, mapped=None):
        self._mem = mem
        self._image = image
        self._w = memoryview(mem).cast("Q")
        self._iw = memoryview(image).cast("Q")
        self.capacity = len(mem)
        self.path = path
        self._mmap = mapped
        self._fd: Optional[int] = None
        self._dirty: set[int] = set()
        self._pending: dict[object, set[int]] = {}
        self._lock = threading.Lock()
        self.stats = PmemStats()
        self.closed = False

    # ------------------------------------------------------------------ #
    # construction
    # ------------------------------------------------------------------ #

    @classmethod
    def create(cls, capacity: int, path: Union[str, Path, None] = None,
               nthreads: int = DEFAULT_THREADS) -> "PmemPool":
        if not _is_pow2(capacity) or capacity > MAX_CAPACITY:
            raise PoolConfigError(f"capacity must be a power of two <= 2^45, got {capacity}")
        if not 2 <= nthreads <= 511:
            raise PoolConfigError(f"thread count out of range: {nthreads}")
        layout = header_layout(capacity, nthreads)
        hdr = bytearray(HEADER_SIZE)
        struct.pack_into("<4sI", hdr, H_MAGIC, MAGIC, VERSION)
        struct.pack_into("<QQQQQQQ", hdr, H_CAPACITY, capacity, LINE, nthreads, 0,
                         layout["clearing"], layout["help"], layout["heap_start"])
        struct.pack_into("<Q", hdr, H_HEAP_TOP, layout["heap_start"])
        if path is None:
            mem = bytearray(capacity)
            mem[:HEADER_SIZE] = hdr
            return cls(mem, bytearray(mem))
        path = Path(path)
        if path.exists():
            raise PoolConfigError(f"{path} already exists")
        with open(path, "wb") as fh:
            fh.write(hdr)
            fh.truncate(capacity)
        return cls._map(path, capacity)

    @classmethod
    def open(cls, path: Union[str, Path], capacity: Optional[int] = None,
             nthreads: int = DEFAULT_THREADS) -> "PmemPool":
        """Open ``path``, creating it with ``capacity`` when absent."""
        path = Path(path)
        if not path.exists():
            if capacity is None:
                raise PoolConfigError(f"{path} does not exist and no capacity given")
            return cls.create(capacity, path, nthreads)
        size = path.stat().st_size
        with open(path, "rb") as fh:
            hdr = fh.read(HEADER_SIZE)
        _validate_header(hdr, size)
        if capacity is not None and capacity != size:
            raise PoolConfigError(f"capacity mismatch: file has {size}, asked for {capacity}")
        return cls._map(path, size)

    @classmethod
    def _map(cls, path: Path, capacity: int) -> "PmemPool":
        fd = os.open(path, os.O_RDWR)
        mapped = mmap.mmap(fd, capacity)
        pool = cls(bytearray(mapped), mapped, path, mapped)
        pool._fd = fd
        return pool

    @classmethod
    def from_image(cls, image: bytes) -> "PmemPool":
        """Boot an in-memory pool whose content equals a post-crash image."""
        _validate_header(bytes(image[:HEADER_SIZE]), len(image))
        mem = bytearray(image)
        return cls(mem, bytearray(image))

    def close(self) -> None:
        if self.closed:
            return
        self.closed = True
        self._w.release()
        self._iw.release()
        if self._mmap is not None:
            self._mmap.flush()
            self._mmap.close()
            os.close(self._fd)

    # ------------------------------------------------------------------ #
    # header
    # ------------------------------------------------------------------ #

    @property
    def nthreads(self) -> int:
        return self._w[H_NTHREADS >> 3]

    @property
    def root_offset(self) -> int:
        return self._w[H_ROOT >> 3]

    def set_root(self, off: int) -> None:
        self.store_word(H_ROOT, off)
        self.flush(H_ROOT)

    @property
    def help_offset(self) -> int:
        return self._w[H_HELP >> 3]

    @property
    def clearing_offset(self) -> int:
        return self._w[H_CLEARING >> 3]

    @property
    def heap_start(self) -> int:
        return self._w[H_HEAP_START >> 3]

    # ------------------------------------------------------------------ #
    # word access
    # ------------------------------------------------------------------ #

    def _check(self, off: int) -> None:
        if off & 7 or not 0 <= off < self.capacity:
            raise PoolUsageError(f"bad word offset {off:#x}")

    def load_word(self, off: int) -> int:
        if off & 7 or not 0 <= off < self.capacity:
            raise PoolUsageError(f"bad word offset {off:#x}")
        return self._w[off >> 3]

    def store_word(self, off: int, v: int) -> None:
        if off & 7 or not 0 <= off < self.capacity:
            raise PoolUsageError(f"bad word offset {off:#x}")
        self._w[off >> 3] = v
        self._dirty.add(off >> 6)

    def cas_word(self, off: int, old: int, new: int) -> int:
        """Compare-exchange; returns the word observed before the operation.

        The CAS succeeded iff the returned value equals ``old``.  A successful
        CAS also drains the calling thread's pending ``flush_opt`` set.
        """
        if off & 7 or not 0 <= off < self.capacity:
            raise PoolUsageError(f"bad word offset {off:#x}")
        i = off >> 3
        with self._lock:
            self.stats.cas += 1
            cur = self._w[i]
            if cur != old:
                return cur
            self._w[i] = new
            self._dirty.add(off >> 6)
        pending = self._pending.pop(probe.current(), None)
        if pending:
            self._persist_lines(pending)
        return cur

    def read_bytes(self, off: int, n: int) -> bytes:
        return bytes(self._mem[off:off + n])

    # ------------------------------------------------------------------ #
    # persistence
    # ------------------------------------------------------------------ #

    def _persist_lines(self, lines) -> None:
        mem, img, dirty = self._mem, self._image, self._dirty
        with self._lock:
            for line in lines:
                a = line << 6
                img[a:a + LINE] = mem[a:a + LINE]
                dirty.discard(line)

    def flush(self, off: int) -> None:
        self._check(off)
        self.stats.flush += 1
        line = off >> 6
        a = line << 6
        with self._lock:
            self._image[a:a + LINE] = self._mem[a:a + LINE]
            self._dirty.discard(line)

    def flush_opt(self, off: int) -> None:
        self._check(off)
        self.stats.flush_opt += 1
        key = probe.current()
        pending = self._pending.get(key)
        if pending is None:
            self._pending[key] = {off >> 6}
        else:
            pending.add(off >> 6)

    def sfence(self) -> None:
        self.stats.sfence += 1
        pending = self._pending.pop(probe.current(), None)
        if pending:
            self._persist_lines(pending)

    def drop_pending(self, key: object) -> None:
        """Forget a dead thread's unfenced ``flush_opt`` requests."""
        self._pending.pop(key, None)

    def flush_all(self) -> None:
        """Persist every dirty line (test setup helper: quiesce the pool)."""
        self._persist_lines(sorted(self._dirty))
        self._pending.clear()

    def line_state(self, off: int) -> LineState:
        a = (off >> 6) << 6
        return LineState(bytes(self._image[a:a + LINE]), (off >> 6) in self._dirty)

    def is_dirty(self, off: int) -> bool:
        return (off >> 6) in self._dirty

    def persisted_word(self, off: int) -> int:
        self._check(off)
        return self._iw[off >> 3]

    @property
    def dirty_lines(self) -> list[int]:
        return sorted(self._dirty)

    # ------------------------------------------------------------------ #
    # crashes
    # ------------------------------------------------------------------ #

    def crash(self, model: CrashModel = CrashModel()) -> Union[PostCrashImage, Iterator[PostCrashImage]]:
        """Produce the persistent content a power failure would leave behind.

        ``revert_all_dirty`` and ``per_line_random`` return a single image and
        also write it to the backing file, if any.  ``enumerate`` returns an
        iterator over every subset of surviving dirty lines and leaves the
        pool untouched.  Callers must quiesce mutators first.
        """
        lines = sorted(self._dirty)
        if model.mode is CrashMode.ENUMERATE:
            if len(lines) > MAX_ENUMERATED_LINES:
                raise CrashExplosionError(
                    f"{len(lines)} dirty lines (max {MAX_ENUMERATED_LINES}); narrow the window")
            return self._enumerate(lines)
        if model.mode is CrashMode.REVERT_ALL_DIRTY:
            keep: list[int] = []
        else:
            rng = random.Random(model.seed)
            keep = [ln for ln in lines if rng.random() < 0.5]
        self._persist_lines(keep)
        self._pending.clear()
        if self._mmap is not None:
            self._mmap.flush()
        return bytes(self._image)

    def _enumerate(self, lines: list[int]) -> Iterator[PostCrashImage]:
        base = bytes(self._image)
        snaps = [(ln << 6, bytes(self._mem[ln << 6:(ln << 6) + LINE])) for ln in lines]
        for r in range(len(lines) + 1):
            for subset in itertools.combinations(snaps, r):
                img = bytearray(base)
                for a, content in subset:
                    img[a:a + LINE] = content
                yield bytes(img)


def _validate_header(hdr: bytes, size: int) -> None:
    if len(hdr) < HEADER_SIZE:
        raise UnrecoverablePoolError("truncated pool header")
    magic, version = struct.unpack_from("<4sI", hdr, H_MAGIC)
    if magic != MAGIC or version != VERSION:
        raise UnrecoverablePoolError(f"bad pool magic/version {magic!r}/{version}")
    capacity, line, nthreads, root, clearing, help_off, heap_start = struct.unpack_from(
        "<QQQQQQQ", hdr, H_CAPACITY)
    (heap_top,) = struct.unpack_from("<Q", hdr, H_HEAP_TOP)
    if capacity != size or not _is_pow2(capacity) or capacity > MAX_CAPACITY:
        raise UnrecoverablePoolError(f"header capacity {capacity} disagrees with size {size}")
    if line != LINE:
        raise UnrecoverablePoolError(f"unsupported cacheline size {line}")
    layout = header_layout(capacity, nthreads)
    if (help_off, clearing, heap_start) != (layout["help"], layout["clearing"], layout["heap_start"]):
        raise UnrecoverablePoolError("header region offsets are inconsistent")
    if not heap_start <= heap_top <= capacity or (root and not HEADER_SIZE <= root < capacity):
        raise UnrecoverablePoolError("header heap/root fields out of range")


# ---------------------------------------------------------------------- #
# allocator
# ---------------------------------------------------------------------- #

_BLOCK_MAGIC = 0xB10C
_HDR_SIZE = 8


def _hdr(granules: int, allocated: bool) -> int:
    return _BLOCK_MAGIC << 48 | granules << 1 | int(allocated)


class PmemAllocator:
    """Segregated free-list allocator over 64-byte granules.

    Every block starts with one header word (magic, size in granules,
    allocated bit); the handle returned to clients is the payload offset just
    past it.  The headers are the persistent truth.  Free lists are volatile
    and rebuilt by a linear scan at open, so a crash can only leak a block
    that was published but never linked, never corrupt the heap.

    Allocation is two-phase: :meth:`alloc` reserves a block and writes its
    header in cache; :meth:`publish` persists the block, header included.
    """

    GRANULE = LINE

    def __init__(self, pool: PmemPool, on_free=None):
        self.pool = pool
        self.on_free = on_free
        self._free: dict[int, list[int]] = {}
        self._lock = threading.Lock()
        self.allocs = 0
        self.frees = 0
        self._scan()

    def _scan(self) -> None:
        pool = self.pool
        block = pool.heap_start
        top = pool.load_word(H_HEAP_TOP)
        while block < top:
            h = pool.load_word(block)
            granules = (h >> 1) & ((1 << 47) - 1)
            if h >> 48 != _BLOCK_MAGIC or granules == 0 or block + granules * LINE > top:
                raise UnrecoverablePoolError(f"corrupt block header at {block:#x}: {h:#x}")
            if not h & 1:
                self._free.setdefault(granules, []).append(block)
            block += granules * LINE
        for blocks in self._free.values():
            blocks.reverse()

    @staticmethod
    def granules_for(size: int) -> int:
        return (size + _HDR_SIZE + LINE - 1) // LINE

    def alloc(self, size: int) -> int:
        """Reserve a block with at least ``size`` payload bytes, zeroed."""
        g = self.granules_for(size)
        pool = self.pool
        with self._lock:
            blocks = self._free.get(g)
            if blocks:
                block = blocks.pop()
                pool.store_word(block, _hdr(g, True))
            else:
                block = pool.load_word(H_HEAP_TOP)
                if block + g * LINE > pool.capacity:
                    raise PoolFullError(f"pool exhausted allocating {size} bytes")
                # publish the header before moving the high-water mark
                pool.store_word(block, _hdr(g, True))
                pool.flush(block)
                pool.store_word(H_HEAP_TOP, block + g * LINE)
                pool.flush(H_HEAP_TOP)
            self.allocs += 1
        for off in range(block + _HDR_SIZE, block + g * LINE, 8):
            pool.store_word(off, 0)
        return block + _HDR_SIZE

    def publish(self, handle: int) -> None:
        """Persist the whole block behind ``handle``."""
        block = handle - _HDR_SIZE
        g = (self.pool.load_word(block) >> 1) & ((1 << 47) - 1)
        for line in range(block, block + g * LINE, LINE):
            self.pool.flush(line)

    def free(self, handle: int) -> None:
        block = handle - _HDR_SIZE
        pool = self.pool
        with self._lock:
            h = pool.load_word(block)
            if h >> 48 != _BLOCK_MAGIC:
                raise UnrecoverablePoolError(f"free of non-block {handle:#x}")
            if not h & 1:
                raise DoubleFreeError(f"block {handle:#x} freed twice")
            g = (h >> 1) & ((1 << 47) - 1)
            pool.store_word(block, _hdr(g, False))
            pool.flush(block)
            self._free.setdefault(g, []).append(block)
            self.frees += 1
        if self.on_free is not None:
            self.on_free(handle)

    def is_allocated(self, handle: int) -> bool:
        block = handle - _HDR_SIZE
        if not self.pool.heap_start <= block < self.pool.load_word(H_HEAP_TOP):
            return False
        h = self.pool.load_word(block)
        return h >> 48 == _BLOCK_MAGIC and bool(h & 1)

    def walk(self) -> Iterator[tuple[int, int, bool]]:
        """Yield ``(handle, granules, allocated)`` for every block in address order."""
        pool = self.pool
        block = pool.heap_start
        top = pool.load_word(H_HEAP_TOP)
        while block < top:
            h = pool.load_word(block)
            g = (h >> 1) & ((1 << 47) - 1)
            yield block + _HDR_SIZE, g, bool(h & 1)
            block += g * LINE

    def free_handles(self) -> list[int]:
        return sorted(b + _HDR_SIZE for blocks in self._free.values() for b in blocks)
