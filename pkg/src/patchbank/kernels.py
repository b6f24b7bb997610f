"""Nearest-neighbor scan kernels with a compiled core and a NumPy fallback.

Two implementations of the same two primitives:

* ``max_dot_scan``: per query, the maximum dot product against all bank rows.
* ``tail_mean_distance_scan``: per query, the mean of the k smallest cosine
  distances (1 - dot) against all bank rows.

The compiled extension accumulates each dot product sequentially in float64,
so its results are bitwise independent of tiling, threading and bank row
order.  The NumPy fallback mirrors that guarantee where it is contractually
required (the tail kernel); its max kernel uses BLAS, which is deterministic
for a fixed block shape but may drift by ~1e-15 under bank row permutation.

Selection: PATCHBANK_KERNEL=auto|ext|numpy (default auto = compiled when
available).  Queries are always processed in fixed blocks of 64 and threads
only distribute whole blocks, so results never depend on the thread count.
"""

from __future__ import annotations

import logging
import os
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from .errors import InvalidInputError

LOGGER = logging.getLogger(__name__)

_BLOCK = 64

try:
    from . import _nnscan

    _HAVE_EXT = True
except ImportError:  # pragma: no cover - depends on the build
    _nnscan = None
    _HAVE_EXT = False


def _initial_kernel() -> str:
    choice = os.environ.get("PATCHBANK_KERNEL", "auto")
    if choice not in ("auto", "ext", "numpy"):
        raise InvalidInputError(f"PATCHBANK_KERNEL must be auto|ext|numpy, got {choice!r}")
    if choice == "ext" and not _HAVE_EXT:
        raise InvalidInputError("PATCHBANK_KERNEL=ext but the compiled extension is not available")
    if choice == "auto":
        return "ext" if _HAVE_EXT else "numpy"
    return choice


_ACTIVE = _initial_kernel()


def active_kernel() -> str:
    """Name of the kernel implementation currently in use ("ext" or "numpy")."""
    return _ACTIVE


def available_kernels() -> tuple[str, ...]:
    return ("ext", "numpy") if _HAVE_EXT else ("numpy",)


def use_kernel(name: str) -> None:
    """Force a kernel implementation; mainly for tests and benchmarks."""
    global _ACTIVE
    if name not in available_kernels():
        raise InvalidInputError(f"kernel {name!r} not available (have {available_kernels()})")
    _ACTIVE = name


def _check_inputs(queries: np.ndarray, bank: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    queries = np.ascontiguousarray(queries, dtype=np.float64)
    bank = np.ascontiguousarray(bank, dtype=np.float64)
    if queries.ndim != 2 or bank.ndim != 2:
        raise InvalidInputError("queries and bank must be 2-D arrays")
    if queries.shape[1] != bank.shape[1]:
        raise InvalidInputError(
            f"dim mismatch: queries dim {queries.shape[1]} vs bank dim {bank.shape[1]}"
        )
    if bank.shape[0] < 1:
        raise InvalidInputError("bank must contain at least one row")
    return queries, bank


def _max_dots_numpy(queries, bank, out, i0, i1):
    out[i0:i1] = (queries[i0:i1] @ bank.T).max(axis=1)


def _tail_means_numpy(queries, bank, k, out, i0, i1):
    # Fixed-order elementwise accumulation: each dot is a sequential chain
    # over the feature dim, so values are stable under bank row permutation.
    q = queries[i0:i1]
    dots = np.zeros((q.shape[0], bank.shape[0]))
    for c in range(queries.shape[1]):
        dots += q[:, c : c + 1] * bank[None, :, c]
    dists = 1.0 - dots
    if k == 1:
        out[i0:i1] = dists.min(axis=1)
        return
    kept = np.partition(dists, k - 1, axis=1)[:, :k]
    kept.sort(axis=1)
    out[i0:i1] = kept.sum(axis=1) / k


def _run_blocked(fn, n: int, threads: int) -> None:
    blocks = [(i, min(i + _BLOCK, n)) for i in range(0, n, _BLOCK)]
    if threads <= 1 or len(blocks) <= 1:
        for i0, i1 in blocks:
            fn(i0, i1)
        return
    with ThreadPoolExecutor(max_workers=threads) as pool:
        list(pool.map(lambda b: fn(*b), blocks))


def max_dot_scan(queries: np.ndarray, bank: np.ndarray, threads: int = 1) -> np.ndarray:
    """Maximum dot product of each query row against every bank row.

    Args:
        queries: (n, d) float array; rows need not be normalized here.
        bank: (m, d) float array.
        threads: worker threads; never changes the result.

    Returns:
        (n,) float64 array of per-query maxima.
    """
    queries, bank = _check_inputs(queries, bank)
    out = np.empty(queries.shape[0], dtype=np.float64)
    if _ACTIVE == "ext":
        fn = lambda i0, i1: _nnscan.max_dots_block(queries, bank, out, i0, i1)
    else:
        fn = lambda i0, i1: _max_dots_numpy(queries, bank, out, i0, i1)
    _run_blocked(fn, queries.shape[0], threads)
    return out


def tail_mean_distance_scan(
    queries: np.ndarray, bank: np.ndarray, k: int, threads: int = 1
) -> np.ndarray:
    """Mean of the k smallest cosine distances per query against the bank.

    Distances are 1 - dot; callers pass unit-normalized rows.  The selected k
    values are summed in ascending order, which makes the result independent
    of bank row order even for exact bitwise comparison.
    """
    queries, bank = _check_inputs(queries, bank)
    if not 1 <= k <= bank.shape[0]:
        raise InvalidInputError(f"k must be in [1, {bank.shape[0]}], got {k}")
    out = np.empty(queries.shape[0], dtype=np.float64)
    if _ACTIVE == "ext":
        fn = lambda i0, i1: _nnscan.tail_means_block(queries, bank, k, out, i0, i1)
    else:
        fn = lambda i0, i1: _tail_means_numpy(queries, bank, k, out, i0, i1)
    _run_blocked(fn, queries.shape[0], threads)
    return out
