"""Selects the compiled flow kernel when available.

Set ``MHPINN_PURE_PYTHON=1`` to force the numpy implementation.
"""
from __future__ import annotations

import os

BACKEND = "python"
if os.environ.get("MHPINN_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from ._flowkern import flow_logp_grad  # noqa: F401
        BACKEND = "cython"
    except ImportError:
        pass
if BACKEND == "python":
    from ._flowkern_py import flow_logp_grad  # noqa: F401
