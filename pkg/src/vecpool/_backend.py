"""Backend selection.

The compiled core (``vecpool._core``) is used when it imports; otherwise the
pure-Python implementation in ``vecpool._pure`` takes over. Set
``VECPOOL_BACKEND=pure`` to force the fallback, or ``=native`` to make a
missing extension an import error.
"""

from __future__ import annotations

import importlib
import os
from types import ModuleType

_requested = os.environ.get("VECPOOL_BACKEND", "").strip().lower()
if _requested not in ("", "native", "pure"):
    raise ImportError(f"VECPOOL_BACKEND must be 'native' or 'pure', got {_requested!r}")

try:
    from . import _core as _native
except ImportError as exc:
    if _requested == "native":
        raise ImportError("VECPOOL_BACKEND=native but the compiled core is not built") from exc
    _native = None

DEFAULT = "native" if _native is not None and _requested != "pure" else "pure"


def native_available() -> bool:
    return _native is not None


def native_module() -> ModuleType:
    if _native is None:
        raise ImportError("the compiled core is not built")
    return _native


def get(name: str | None = None) -> ModuleType:
    """Backend module with ``ActionQueue``, ``StateQueue``, ``WorkerContext``
    and ``Dispatcher``."""
    name = DEFAULT if name is None else name
    if name == "native":
        return native_module()
    if name == "pure":
        return importlib.import_module("vecpool._pure")
    raise ValueError(f"unknown backend {name!r}")


def available() -> list[str]:
    return ["native", "pure"] if _native is not None else ["pure"]
