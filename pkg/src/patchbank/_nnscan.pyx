# cython: boundscheck=False, wraparound=False, initializedcheck=False
"""Python bindings for the C nearest-neighbor scan core.

The heavy loops live in _nnscan_core.c, where restrict-qualified pointers
let the compiler keep the 8-lane accumulator strips in vector registers.
Every dot product is accumulated sequentially over the feature dimension in
float64, so outputs are bitwise independent of tiling, thread partitioning
and bank row order.
"""

from libc.stddef cimport ptrdiff_t
from libc.stdlib cimport free, malloc

cdef extern from "_nnscan_core.h":
    void pb_max_dots_range(const double* q, const double* bank, double* out,
                           ptrdiff_t d, ptrdiff_t m,
                           ptrdiff_t i0, ptrdiff_t i1, double* qt) nogil
    void pb_tail_means_range(const double* q, const double* bank, double* out,
                             ptrdiff_t d, ptrdiff_t m, ptrdiff_t k,
                             ptrdiff_t i0, ptrdiff_t i1,
                             double* qt, double* heaps) nogil

DEF TILE = 8


def max_dots_block(const double[:, ::1] queries, const double[:, ::1] bank,
                   double[::1] out, Py_ssize_t i0, Py_ssize_t i1):
    """Write max dot product against the bank for queries [i0, i1) into out."""
    cdef Py_ssize_t d = queries.shape[1]
    cdef Py_ssize_t m = bank.shape[0]
    cdef double* qt
    if i1 <= i0:
        return
    qt = <double*> malloc(d * TILE * sizeof(double))
    if qt == NULL:
        raise MemoryError()
    try:
        with nogil:
            pb_max_dots_range(&queries[0, 0], &bank[0, 0], &out[0],
                              d, m, i0, i1, qt)
    finally:
        free(qt)


def tail_means_block(const double[:, ::1] queries, const double[:, ::1] bank,
                     Py_ssize_t k, double[::1] out, Py_ssize_t i0, Py_ssize_t i1):
    """Write the mean of the k smallest cosine distances for queries [i0, i1)."""
    cdef Py_ssize_t d = queries.shape[1]
    cdef Py_ssize_t m = bank.shape[0]
    cdef double* qt
    cdef double* heaps
    if i1 <= i0:
        return
    if k < 1 or k > m:
        raise ValueError("k out of range")
    qt = <double*> malloc(d * TILE * sizeof(double))
    heaps = <double*> malloc(TILE * k * sizeof(double))
    if qt == NULL or heaps == NULL:
        free(qt)
        free(heaps)
        raise MemoryError()
    try:
        with nogil:
            pb_tail_means_range(&queries[0, 0], &bank[0, 0], &out[0],
                                d, m, k, i0, i1, qt, heaps)
    finally:
        free(qt)
        free(heaps)
