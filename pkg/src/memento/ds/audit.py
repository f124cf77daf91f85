"""Self-audit of how each root operation composes its sub-operations.

Every detectable sub-operation site owns a distinct sub-memento field, and
every loop that contains one checkpoints a single merged loop-carried value
(its phi) before anything else.  Insert and delete on an insert/delete
location need no field of their own: the node being inserted and the
(head, next) pair being deleted are already checkpointed values.
"""
from __future__ import annotations

from .base import OP_INSERT, OP_REMOVE

#: structure -> op -> sub-operation site -> memento field (None: memento-free)
SUBOPS: dict[str, dict[int, dict[str, object]]] = {
    "msq-cas": {
        OP_INSERT: {
            "allocate node": "node",
            "read tail and tail.next": "snap",
            "cas tail.next null->node": "link",
            "help swing tail": "help_swing",
            "swing tail to node": "swing",
        },
        OP_REMOVE: {
            "read head, head.next, tail": "snap",
            "help swing tail": "help_swing",
            "cas head": "cas",
            "read dequeued value": "ret",
        },
    },
    "msq-indel": {
        OP_INSERT: {
            "allocate node": "node",
            "read tail": "tail",
            "insert node at tail.next": None,
        },
        OP_REMOVE: {
            "read head, head.next, tail": "snap",
            "delete head": None,
            "read dequeued value": "ret",
        },
    },
    "stack": {
        OP_INSERT: {
            "allocate node": "node",
            "read top": "top",
            "cas top": "cas",
        },
        OP_REMOVE: {
            "read top and top.next": "snap",
            "cas top": "cas",
            "read popped value": "ret",
        },
    },
}
SUBOPS["msq-vol"] = SUBOPS["msq-indel"]

#: structure -> op -> loop -> the field checkpointing its phi value
LOOPS: dict[str, dict[int, dict[str, str]]] = {
    "msq-cas": {OP_INSERT: {"link loop": "snap"}, OP_REMOVE: {"dequeue loop": "snap"}},
    "msq-indel": {OP_INSERT: {"insert loop": "tail"}, OP_REMOVE: {"dequeue loop": "snap"}},
    "msq-vol": {OP_INSERT: {"insert loop": "tail"}, OP_REMOVE: {"dequeue loop": "snap"}},
    "stack": {OP_INSERT: {"push loop": "top"}, OP_REMOVE: {"pop loop": "snap"}},
}
