/* Cosine nearest-neighbor scan core.
 *
 * The 8 lanes of each vector are 8 query rows scanned in lockstep; the
 * feature dimension is walked sequentially, so each (query, bank row) dot
 * product is one fixed chain of mul+add regardless of tiling, threading or
 * bank row order.  Lanewise vector ops round exactly like their scalar
 * counterparts, so the grouped, remainder and fallback paths are bitwise
 * interchangeable (compile with -ffp-contract=off to keep mul+add from
 * fusing on some paths only).
 *
 * Bank rows are processed in groups of four to keep four independent add
 * chains in flight, hiding FP latency.
 */

#include "_nnscan_core.h"

#include <math.h>

#define TILE 8

#if defined(__GNUC__) || defined(__clang__)
#define PB_VEC 1
typedef double pb_v8 __attribute__((vector_size(64), aligned(8), may_alias));
typedef long long pb_m8 __attribute__((vector_size(64), aligned(8), may_alias));

static inline pb_v8 pb_load(const double *restrict p) {
    return *(const pb_v8 *)p;
}

static inline pb_v8 pb_lanemax(pb_v8 a, pb_v8 b) {
    pb_m8 take_a = a > b;
    return (pb_v8)(((pb_m8)a & take_a) | ((pb_m8)b & ~take_a));
}
#endif

static void pack_tile(const double *restrict q, ptrdiff_t d,
                      ptrdiff_t i0, ptrdiff_t nt, double *restrict qt) {
    for (ptrdiff_t c = 0; c < d; c++) {
        for (ptrdiff_t t = 0; t < nt; t++)
            qt[c * TILE + t] = q[(i0 + t) * d + c];
        for (ptrdiff_t t = nt; t < TILE; t++)
            qt[c * TILE + t] = 0.0;
    }
}

/* Dot products of the packed 8-query tile against bank rows j0..j0+3,
 * written to acc[0..3][lane].  Identical accumulation order per pair on
 * every path. */
static void dots4(const double *restrict qt, const double *restrict br,
                  ptrdiff_t d, double acc[4][TILE]) {
#ifdef PB_VEC
    pb_v8 A0 = {0}, A1 = {0}, A2 = {0}, A3 = {0};
    for (ptrdiff_t c = 0; c < d; c++) {
        pb_v8 Q = pb_load(qt + c * TILE);
        A0 += Q * br[c];
        A1 += Q * br[d + c];
        A2 += Q * br[2 * d + c];
        A3 += Q * br[3 * d + c];
    }
    *(pb_v8 *)acc[0] = A0;
    *(pb_v8 *)acc[1] = A1;
    *(pb_v8 *)acc[2] = A2;
    *(pb_v8 *)acc[3] = A3;
#else
    for (int s = 0; s < 4; s++)
        for (int t = 0; t < TILE; t++)
            acc[s][t] = 0.0;
    for (ptrdiff_t c = 0; c < d; c++) {
        double v0 = br[c], v1 = br[d + c], v2 = br[2 * d + c], v3 = br[3 * d + c];
        const double *restrict qs = qt + c * TILE;
        for (int t = 0; t < TILE; t++) {
            double qv = qs[t];
            acc[0][t] += qv * v0;
            acc[1][t] += qv * v1;
            acc[2][t] += qv * v2;
            acc[3][t] += qv * v3;
        }
    }
#endif
}

static void dots1(const double *restrict qt, const double *restrict br,
                  ptrdiff_t d, double acc[TILE]) {
#ifdef PB_VEC
    pb_v8 A0 = {0};
    for (ptrdiff_t c = 0; c < d; c++)
        A0 += pb_load(qt + c * TILE) * br[c];
    *(pb_v8 *)acc = A0;
#else
    for (int t = 0; t < TILE; t++)
        acc[t] = 0.0;
    for (ptrdiff_t c = 0; c < d; c++) {
        double v0 = br[c];
        const double *restrict qs = qt + c * TILE;
        for (int t = 0; t < TILE; t++)
            acc[t] += qs[t] * v0;
    }
#endif
}

void pb_max_dots_range(const double *restrict q, const double *restrict bank,
                       double *restrict out,
                       ptrdiff_t d, ptrdiff_t m,
                       ptrdiff_t i0, ptrdiff_t i1, double *restrict qt) {
    ptrdiff_t m4 = m - (m & 3);
    double acc[4][TILE];

    for (ptrdiff_t i = i0; i < i1; i += TILE) {
        ptrdiff_t nt = i1 - i;
        if (nt > TILE)
            nt = TILE;
        pack_tile(q, d, i, nt, qt);
#ifdef PB_VEC
        double ninf = -INFINITY;
        pb_v8 Best = {ninf, ninf, ninf, ninf, ninf, ninf, ninf, ninf};
        for (ptrdiff_t j = 0; j < m4; j += 4) {
            dots4(qt, bank + j * d, d, acc);
            pb_v8 g01 = pb_lanemax(*(pb_v8 *)acc[0], *(pb_v8 *)acc[1]);
            pb_v8 g23 = pb_lanemax(*(pb_v8 *)acc[2], *(pb_v8 *)acc[3]);
            Best = pb_lanemax(Best, pb_lanemax(g01, g23));
        }
        for (ptrdiff_t j = m4; j < m; j++) {
            dots1(qt, bank + j * d, d, acc[0]);
            Best = pb_lanemax(Best, *(pb_v8 *)acc[0]);
        }
        double best[TILE];
        *(pb_v8 *)best = Best;
#else
        double best[TILE];
        for (int t = 0; t < TILE; t++)
            best[t] = -INFINITY;
        for (ptrdiff_t j = 0; j < m4; j += 4) {
            dots4(qt, bank + j * d, d, acc);
            for (int s = 0; s < 4; s++)
                for (int t = 0; t < TILE; t++)
                    if (acc[s][t] > best[t])
                        best[t] = acc[s][t];
        }
        for (ptrdiff_t j = m4; j < m; j++) {
            dots1(qt, bank + j * d, d, acc[0]);
            for (int t = 0; t < TILE; t++)
                if (acc[0][t] > best[t])
                    best[t] = acc[0][t];
        }
#endif
        for (ptrdiff_t t = 0; t < nt; t++)
            out[i + t] = best[t];
    }
}

/* Max-heap on distances: the root is the largest of the kept k smallest. */
static void heap_sift_down(double *restrict h, ptrdiff_t size, ptrdiff_t i) {
    double v = h[i];
    for (;;) {
        ptrdiff_t child = 2 * i + 1;
        if (child >= size)
            break;
        if (child + 1 < size && h[child + 1] > h[child])
            child++;
        if (h[child] > v) {
            h[i] = h[child];
            i = child;
        } else {
            break;
        }
    }
    h[i] = v;
}

static void heap_push(double *restrict h, ptrdiff_t *restrict size,
                      ptrdiff_t cap, double v) {
    if (*size < cap) {
        ptrdiff_t i = (*size)++;
        h[i] = v;
        while (i > 0) {
            ptrdiff_t parent = (i - 1) >> 1;
            if (h[parent] < h[i]) {
                double tmp = h[parent];
                h[parent] = h[i];
                h[i] = tmp;
                i = parent;
            } else {
                break;
            }
        }
    } else if (v < h[0]) {
        h[0] = v;
        heap_sift_down(h, cap, 0);
    }
}

static void sort_ascending(double *restrict a, ptrdiff_t n) {
    for (ptrdiff_t i = 1; i < n; i++) {
        double v = a[i];
        ptrdiff_t j = i - 1;
        while (j >= 0 && a[j] > v) {
            a[j + 1] = a[j];
            j--;
        }
        a[j + 1] = v;
    }
}

void pb_tail_means_range(const double *restrict q, const double *restrict bank,
                         double *restrict out,
                         ptrdiff_t d, ptrdiff_t m, ptrdiff_t k,
                         ptrdiff_t i0, ptrdiff_t i1,
                         double *restrict qt, double *restrict heaps) {
    ptrdiff_t m4 = m - (m & 3);
    ptrdiff_t sizes[TILE];
    double acc[4][TILE];

    for (ptrdiff_t i = i0; i < i1; i += TILE) {
        ptrdiff_t nt = i1 - i;
        if (nt > TILE)
            nt = TILE;
        pack_tile(q, d, i, nt, qt);
        for (ptrdiff_t t = 0; t < nt; t++)
            sizes[t] = 0;
        for (ptrdiff_t j = 0; j < m4; j += 4) {
            dots4(qt, bank + j * d, d, acc);
            /* Push order never matters: the kept multiset of values, hence
             * the ascending-sorted sum, is order-independent. */
            for (ptrdiff_t t = 0; t < nt; t++) {
                heap_push(heaps + t * k, &sizes[t], k, 1.0 - acc[0][t]);
                heap_push(heaps + t * k, &sizes[t], k, 1.0 - acc[1][t]);
                heap_push(heaps + t * k, &sizes[t], k, 1.0 - acc[2][t]);
                heap_push(heaps + t * k, &sizes[t], k, 1.0 - acc[3][t]);
            }
        }
        for (ptrdiff_t j = m4; j < m; j++) {
            dots1(qt, bank + j * d, d, acc[0]);
            for (ptrdiff_t t = 0; t < nt; t++)
                heap_push(heaps + t * k, &sizes[t], k, 1.0 - acc[0][t]);
        }
        for (ptrdiff_t t = 0; t < nt; t++) {
            double *h = heaps + t * k;
            sort_ascending(h, k);
            double total = 0.0;
            for (ptrdiff_t r = 0; r < k; r++)
                total += h[r];
            out[i + t] = total / (double)k;
        }
    }
}
