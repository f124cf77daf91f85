"""Persistent queues and a stack composed from detectable primitives."""
from .base import EMPTY, OP_INSERT, OP_REMOVE, Structure
from .queue import MsqCas, MsqIndel, MsqVol
from .stack import TreiberStack

__all__ = ["EMPTY", "OP_INSERT", "OP_REMOVE", "Structure", "MsqCas", "MsqIndel", "MsqVol",
           "TreiberStack"]
