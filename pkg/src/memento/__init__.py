"""Detectable persistent-memory primitives and structures built on them.

The pool is simulated in DRAM with explicit cacheline flush and crash
semantics, so every algorithm here can be crashed and recovered in tests.
"""
from .pmem import CrashModel, PmemAllocator, PmemPool

__version__ = "0.1.0"
__all__ = ["CrashModel", "PmemAllocator", "PmemPool", "__version__"]
