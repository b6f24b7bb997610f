#ifndef PB_NNSCAN_CORE_H
#define PB_NNSCAN_CORE_H

#include <stddef.h>

/* Query rows [i0, i1) of q (n x d, row-major) are scanned against all m
 * bank rows.  Results land in out[i0..i1).  qt is caller-provided scratch
 * of d * 8 doubles.  Every dot product is accumulated sequentially over
 * the feature dimension, so outputs are bitwise independent of tiling,
 * threading and bank row order (compile with -ffp-contract=off). */

void pb_max_dots_range(const double *restrict q, const double *restrict bank,
                       double *restrict out,
                       ptrdiff_t d, ptrdiff_t m,
                       ptrdiff_t i0, ptrdiff_t i1, double *restrict qt);

/* Mean of the k smallest distances 1 - dot per query; heaps is scratch of
 * 8 * k doubles.  The kept k values are summed in ascending order. */
void pb_tail_means_range(const double *restrict q, const double *restrict bank,
                         double *restrict out,
                         ptrdiff_t d, ptrdiff_t m, ptrdiff_t k,
                         ptrdiff_t i0, ptrdiff_t i1,
                         double *restrict qt, double *restrict heaps);

#endif
