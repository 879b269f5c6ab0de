"""Graph-kernel selection: compiled extension when available, numpy fallback otherwise.

The active kernel is chosen at import time; set ``HIRET_KERNEL=python`` or
``HIRET_KERNEL=fast`` to override, or pass ``kernel=`` explicitly to the index
build/search entry points. ``bench/bench_kernels.py`` compares the two.
"""

from __future__ import annotations

import os
from types import ModuleType

from . import _graph_py

try:
    from . import _graph_fast
except ImportError:  # extension not built: pure-Python kernel only
    _graph_fast = None

_KERNELS: dict[str, ModuleType] = {"python": _graph_py}
if _graph_fast is not None:
    _KERNELS["fast"] = _graph_fast


def available_kernels() -> list[str]:
    return sorted(_KERNELS)


def default_kernel() -> str:
    env = os.environ.get("HIRET_KERNEL")
    if env:
        if env not in _KERNELS:
            raise ValueError(
                f"HIRET_KERNEL={env!r} is not available (have: {', '.join(available_kernels())})"
            )
        return env
    return "fast" if "fast" in _KERNELS else "python"


def resolve_kernel(name: str | None = None) -> tuple[str, ModuleType]:
    """Map a kernel name (or None for the default) to its module."""
    if name is None:
        name = default_kernel()
    try:
        return name, _KERNELS[name]
    except KeyError:
        raise ValueError(
            f"unknown kernel {name!r} (have: {', '.join(available_kernels())})"
        ) from None
