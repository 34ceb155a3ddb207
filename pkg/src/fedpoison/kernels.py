"""Kernel dispatch: compiled extension when available, numpy otherwise.

Set ``FEDPOISON_PURE_PYTHON=1`` to force the numpy fallback.
"""
import os

from fedpoison import _pykernels

if os.environ.get("FEDPOISON_PURE_PYTHON"):
    _impl = _pykernels
else:
    try:
        from fedpoison import _ckernels as _impl
    except ImportError:
        _impl = _pykernels

BACKEND = "python" if _impl is _pykernels else "cython"

krum_scores = _impl.krum_scores
select_extreme = _impl.select_extreme
rank_counts = _impl.rank_counts
scatter_add_rows = _impl.scatter_add_rows

__all__ = ["BACKEND", "krum_scores", "select_extreme", "rank_counts", "scatter_add_rows"]
