"""Bounded MPMC ring carrying routed actions from ``send`` to the workers.

Capacity is ``2 * num_envs`` cells. Producers claim a run of cells by
advancing ``head``; consumers take one cell each by advancing ``tail`` after
acquiring a token from a counting semaphore, which is the only blocking
point. Per-cell sequence stamps keep a consumer from reading a cell whose
producer has not finished writing it.

Messages are single integers, ``env_id << 1 | reset``; see :class:`ActionMsg`.
The step payload itself lives in the pool's action table.
"""

from __future__ import annotations

from . import _backend
from ._types import SHUTDOWN, ActionMsg

ActionQueue = _backend.get().ActionQueue

__all__ = ["ActionMsg", "ActionQueue", "SHUTDOWN"]
