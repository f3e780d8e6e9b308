"""Kernel backend selection.

The compiled extension ``sleb._core`` is preferred when importable; the pure
numpy module ``sleb._engine_np`` is the fallback and the reference.  Both
expose the same two kernels with bit-identical results, so everything above
this layer is backend-agnostic.  Set SLEB_FORCE_NUMPY=1 to skip the compiled
core (useful for benchmarking and for debugging kernel changes).
"""

from __future__ import annotations

import os

from ._engine_np import (  # noqa: F401  (re-export)
    WALK_ENTER,
    WALK_ESCAPE,
    WALK_P_DEAD,
    WALK_PINCH_FRAC,
    WALK_STEP_FRAC,
)

_force = os.environ.get("SLEB_FORCE_NUMPY", "") not in ("", "0")

if _force:
    from . import _engine_np as _impl

    BACKEND = "numpy"
else:
    try:
        from . import _core as _impl  # type: ignore[no-redef]

        BACKEND = "compiled"
    except ImportError:
        from . import _engine_np as _impl  # type: ignore[no-redef]

        BACKEND = "numpy"

drive_epoch = _impl.drive_epoch
track_epoch_pd = _impl.track_epoch_pd


def kernel_set(name):
    """Return (drive_epoch, track_epoch_pd) for a named backend.

    ``name`` is "compiled" or "numpy"; raises ImportError if the compiled
    core was never built.  Used by the parity tests and the benchmark.
    """
    if name == "numpy":
        from . import _engine_np as mod
    elif name == "compiled":
        from . import _core as mod
    else:
        raise ValueError(f"unknown backend {name!r}")
    return mod.drive_epoch, mod.track_epoch_pd
