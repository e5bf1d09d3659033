"""Hot-loop kernels: the compiled extension when it is built, else pure Python.

Set ``CRISLOC_PURE_PYTHON=1`` to force the fallback.
"""
import os

BACKEND = "python"
if os.environ.get("CRISLOC_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from ._kernels import (dbscan_labels, jenks_breakpoint, k_distances,  # noqa: F401
                               pairwise_dist, portion_count)
        BACKEND = "cython"
    except ImportError:
        pass
if BACKEND == "python":
    from ._kernels_py import (dbscan_labels, jenks_breakpoint, k_distances,  # noqa: F401
                              pairwise_dist, portion_count)

OUTLIER = -1

__all__ = ["BACKEND", "OUTLIER", "dbscan_labels", "jenks_breakpoint", "k_distances",
           "pairwise_dist", "portion_count"]
