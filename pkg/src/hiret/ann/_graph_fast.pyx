# cython: language_level=3, boundscheck=False, wraparound=False, initializedcheck=False, cdivision=True
"""Compiled graph-traversal kernel for the HNSW index.

Same function contracts as ``_graph_py`` (the pure-Python fallback): distances
are negated inner products, every ordering uses the lexicographic key
(distance, node), and results are deterministic for fixed inputs. The two
kernels accumulate float32 products in different orders and are therefore not
bit-identical to each other.
"""

import numpy as np

cimport numpy as cnp

cnp.import_array()

ctypedef cnp.float32_t f32
ctypedef cnp.float64_t f64
ctypedef cnp.int32_t i32
ctypedef cnp.uint8_t u8


cdef inline f64 _neg_ip(const f32[:, ::1] vectors, Py_ssize_t row, const f32[::1] query) noexcept nogil:
    cdef f64 acc = 0.0
    cdef Py_ssize_t j
    for j in range(query.shape[0]):
        acc += <f64> vectors[row, j] * <f64> query[j]
    return -acc


cdef inline f64 _neg_ip_rows(const f32[:, ::1] vectors, Py_ssize_t a, Py_ssize_t b) noexcept nogil:
    cdef f64 acc = 0.0
    cdef Py_ssize_t j
    for j in range(vectors.shape[1]):
        acc += <f64> vectors[a, j] * <f64> vectors[b, j]
    return -acc


cdef inline bint _key_lt(f64 d1, i32 i1, f64 d2, i32 i2) noexcept nogil:
    return d1 < d2 or (d1 == d2 and i1 < i2)


# Binary heaps over parallel (dist, id) arrays. sign > 0 puts the smallest
# (dist, id) key at the root, sign < 0 the largest.

cdef inline bint _heap_before(f64 d1, i32 i1, f64 d2, i32 i2, int sign) noexcept nogil:
    if sign > 0:
        return _key_lt(d1, i1, d2, i2)
    return _key_lt(d2, i2, d1, i1)


cdef void _heap_push(f64* hd, i32* hi, Py_ssize_t* size, f64 d, i32 node, int sign) noexcept nogil:
    cdef Py_ssize_t child = size[0]
    cdef Py_ssize_t parent
    cdef f64 td
    cdef i32 ti
    hd[child] = d
    hi[child] = node
    size[0] += 1
    while child > 0:
        parent = (child - 1) >> 1
        if _heap_before(hd[child], hi[child], hd[parent], hi[parent], sign):
            td = hd[parent]; hd[parent] = hd[child]; hd[child] = td
            ti = hi[parent]; hi[parent] = hi[child]; hi[child] = ti
            child = parent
        else:
            break


cdef void _heap_pop(f64* hd, i32* hi, Py_ssize_t* size, int sign) noexcept nogil:
    cdef Py_ssize_t node = 0
    cdef Py_ssize_t child
    cdef f64 td
    cdef i32 ti
    size[0] -= 1
    hd[0] = hd[size[0]]
    hi[0] = hi[size[0]]
    while True:
        child = 2 * node + 1
        if child >= size[0]:
            break
        if child + 1 < size[0] and _heap_before(hd[child + 1], hi[child + 1], hd[child], hi[child], sign):
            child += 1
        if _heap_before(hd[child], hi[child], hd[node], hi[node], sign):
            td = hd[node]; hd[node] = hd[child]; hd[child] = td
            ti = hi[node]; hi[node] = hi[child]; hi[child] = ti
            node = child
        else:
            break


def dists_to(const f32[:, ::1] vectors, Py_ssize_t center, const i32[::1] ids):
    """Negated inner products between node ``center`` and each node in ``ids``."""
    out_arr = np.empty(ids.shape[0], dtype=np.float64)
    cdef f64[::1] out = out_arr
    cdef Py_ssize_t t
    with nogil:
        for t in range(ids.shape[0]):
            out[t] = _neg_ip_rows(vectors, center, ids[t])
    return out_arr


def search_layer(
    const f32[:, ::1] vectors,
    const i32[:, ::1] adj,
    const i32[::1] deg,
    const f32[::1] query,
    const i32[::1] entries,
    Py_ssize_t ef,
):
    """Beam search over one graph layer; see ``_graph_py.search_layer``."""
    cdef Py_ssize_t n = vectors.shape[0]
    cdef Py_ssize_t n_entries = entries.shape[0]

    visited_arr = np.zeros(n, dtype=np.uint8)
    cand_d_arr = np.empty(n, dtype=np.float64)
    cand_i_arr = np.empty(n, dtype=np.int32)
    best_cap = ef + n_entries + 1
    best_d_arr = np.empty(best_cap, dtype=np.float64)
    best_i_arr = np.empty(best_cap, dtype=np.int32)

    cdef u8[::1] visited = visited_arr
    cdef f64[::1] cand_d = cand_d_arr
    cdef i32[::1] cand_i = cand_i_arr
    cdef f64[::1] best_d = best_d_arr
    cdef i32[::1] best_i = best_i_arr

    cdef Py_ssize_t cand_size = 0
    cdef Py_ssize_t best_size = 0
    cdef Py_ssize_t t, e
    cdef i32 c, nb
    cdef f64 d, dist_c

    with nogil:
        for t in range(n_entries):
            c = entries[t]
            visited[c] = 1
            d = _neg_ip(vectors, c, query)
            _heap_push(&cand_d[0], &cand_i[0], &cand_size, d, c, 1)
            _heap_push(&best_d[0], &best_i[0], &best_size, d, c, -1)
        while best_size > ef:
            _heap_pop(&best_d[0], &best_i[0], &best_size, -1)

        while cand_size > 0:
            dist_c = cand_d[0]
            c = cand_i[0]
            _heap_pop(&cand_d[0], &cand_i[0], &cand_size, 1)
            if best_size >= ef and _key_lt(best_d[0], best_i[0], dist_c, c):
                break
            for t in range(deg[c]):
                nb = adj[c, t]
                if visited[nb]:
                    continue
                visited[nb] = 1
                d = _neg_ip(vectors, nb, query)
                if best_size < ef or _key_lt(d, nb, best_d[0], best_i[0]):
                    _heap_push(&cand_d[0], &cand_i[0], &cand_size, d, nb, 1)
                    _heap_push(&best_d[0], &best_i[0], &best_size, d, nb, -1)
                    if best_size > ef:
                        _heap_pop(&best_d[0], &best_i[0], &best_size, -1)

    ids = best_i_arr[:best_size].copy()
    dists = best_d_arr[:best_size].copy()
    order = np.lexsort((ids, dists))
    return ids[order], dists[order]


def select_neighbors(
    const f32[:, ::1] vectors,
    const i32[::1] cand_ids,
    const f64[::1] cand_dists,
    Py_ssize_t m,
):
    """Diversity-aware neighbor selection; see ``_graph_py.select_neighbors``."""
    cand_ids_arr = np.asarray(cand_ids)
    order_arr = np.lexsort((cand_ids_arr, np.asarray(cand_dists)))
    cdef Py_ssize_t n_cand = cand_ids.shape[0]
    if n_cand <= m:
        return cand_ids_arr[order_arr].astype(np.int32, copy=False)

    cdef cnp.intp_t[::1] order = order_arr
    selected_arr = np.empty(m, dtype=np.int32)
    cdef i32[::1] selected = selected_arr
    cdef Py_ssize_t n_selected = 0
    cdef Py_ssize_t t, r, pos
    cdef i32 e
    cdef f64 d_eq
    cdef bint keep
    with nogil:
        for t in range(n_cand):
            if n_selected == m:
                break
            pos = order[t]
            e = cand_ids[pos]
            d_eq = cand_dists[pos]
            keep = True
            for r in range(n_selected):
                if _neg_ip_rows(vectors, e, selected[r]) <= d_eq:
                    keep = False
                    break
            if keep:
                selected[n_selected] = e
                n_selected += 1
    return selected_arr[:n_selected].copy()
