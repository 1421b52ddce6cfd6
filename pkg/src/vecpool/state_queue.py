"""Ring of pre-allocated result blocks.

Each block holds ``batch_size`` slots stored field by field. Workers claim
slots first come first serve from one allocation counter; the slot for
counter ``c`` is offset ``c % M`` of generation ``c // M``, which lives in
descriptor ``generation % B`` with ``B = ceil(N / M) + 1``. When a block's
write count reaches ``M`` it is handed whole to the consumer as a
:class:`StateBatch` and the descriptor gets fresh buffers.
"""

from __future__ import annotations

from . import _backend
from ._types import BlockView, SlotHandle, StateBatch

StateQueue = _backend.get().StateQueue


def num_blocks(num_envs: int, batch_size: int) -> int:
    return -(-num_envs // batch_size) + 1


__all__ = ["BlockView", "SlotHandle", "StateBatch", "StateQueue", "num_blocks"]
