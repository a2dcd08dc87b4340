# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
# distutils: language = c++
"""Compiled graph kernels: the hot twin of _graph_py.

Same algorithm, same (score descending, id ascending) tie-breaking, same
float64 accumulation over float32 vectors; only the inner loops differ.
"""

import numpy as np

from libcpp.pair cimport pair
from libcpp.queue cimport priority_queue
from libcpp.vector cimport vector

ctypedef pair[double, long long] hpair


cdef inline double dot_row_q(const float[:, ::1] vec, Py_ssize_t row, const double[::1] q) nogil:
    cdef double s = 0.0
    cdef Py_ssize_t i
    for i in range(vec.shape[1]):
        s += (<double> vec[row, i]) * q[i]
    return s


cdef inline double dot_rows(const float[:, ::1] vec, Py_ssize_t a, Py_ssize_t b) nogil:
    cdef double s = 0.0
    cdef Py_ssize_t i
    for i in range(vec.shape[1]):
        s += (<double> vec[a, i]) * (<double> vec[b, i])
    return s


cdef long long greedy_descent(const float[:, ::1] vec, const int[:, ::1] adj,
                              const int[::1] deg, long long start, const double[::1] q,
                              long long* counter, double* out_score) nogil:
    """Greedy walk to a local max at one layer; moves on (score, -id)."""
    cdef long long cur = start
    cdef double cur_score = dot_row_q(vec, cur, q)
    counter[0] += 1
    cdef long long best_id, nb
    cdef double best_score, s
    cdef int j, dg
    while True:
        dg = deg[cur]
        if dg == 0:
            out_score[0] = cur_score
            return cur
        best_id = -1
        best_score = 0.0
        for j in range(dg):
            nb = adj[cur, j]
            s = dot_row_q(vec, nb, q)
            counter[0] += 1
            if best_id < 0 or s > best_score or (s == best_score and nb < best_id):
                best_id = nb
                best_score = s
        if best_score > cur_score or (best_score == cur_score and best_id < cur):
            cur = best_id
            cur_score = best_score
        else:
            out_score[0] = cur_score
            return cur


cdef class Cursor:
    """Resumable best-first traversal of the layer-0 graph for one query."""

    cdef float[:, ::1] vec
    cdef double[::1] q
    cdef int[:, ::1] adj0
    cdef int[::1] deg0
    cdef int ef
    cdef char[::1] visited
    cdef priority_queue[hpair] frontier   # (score, -id): top = best
    cdef priority_queue[hpair] reserve    # (score, -id)
    cdef priority_queue[hpair] window     # (-score, id): top = worst kept
    cdef vector[hpair] emitted            # (-score, id), best-first after epoch
    cdef Py_ssize_t emit_pos
    cdef long long scanned_
    cdef bint has_seed
    cdef double seed_score
    cdef long long seed_id
    cdef object _visited_arr

    def __init__(self, vectors, levels, adjs, degs, entry, query, ef):
        self.vec = vectors
        self.q = query
        self.adj0 = adjs[0]
        self.deg0 = degs[0]
        self.ef = int(ef)
        n = vectors.shape[0]
        self._visited_arr = np.zeros(n, dtype=np.int8)
        self.visited = self._visited_arr
        self.scanned_ = 0
        self.emit_pos = 0

        cdef long long start = int(entry)
        cdef double start_score = dot_row_q(self.vec, start, self.q)
        self.scanned_ += 1
        cdef int[:, ::1] adj_l
        cdef int[::1] deg_l
        cdef double out_score
        cdef int level
        for level in range(int(levels[entry]), 0, -1):
            adj_l = adjs[level]
            deg_l = degs[level]
            start = greedy_descent(self.vec, adj_l, deg_l, start, self.q,
                                   &self.scanned_, &out_score)
            start_score = out_score
        self.visited[start] = 1
        self.frontier.push(hpair(start_score, -start))
        self.has_seed = True
        self.seed_score = start_score
        self.seed_id = start

    @property
    def scanned(self):
        return self.scanned_

    @property
    def exhausted(self):
        return (self.emit_pos >= <Py_ssize_t> self.emitted.size()
                and self.frontier.empty() and self.reserve.empty()
                and not self.has_seed)

    cdef void _run_epoch(self):
        cdef priority_queue[hpair] window
        cdef hpair top, ftop, cand, wtop
        if self.has_seed:
            window.push(hpair(-self.seed_score, self.seed_id))
            self.has_seed = False
        while (not self.reserve.empty()) and <int> window.size() < self.ef:
            top = self.reserve.top()
            self.reserve.pop()
            window.push(hpair(-top.first, -top.second))

        cdef long long node, nb
        cdef double s
        cdef int j, dg
        while not self.frontier.empty():
            ftop = self.frontier.top()
            if <int> window.size() >= self.ef and ftop.first < -window.top().first:
                break
            self.frontier.pop()
            node = -ftop.second
            dg = self.deg0[node]
            for j in range(dg):
                nb = self.adj0[node, j]
                if self.visited[nb]:
                    continue
                self.visited[nb] = 1
                s = dot_row_q(self.vec, nb, self.q)
                self.scanned_ += 1
                self.frontier.push(hpair(s, -nb))
                cand = hpair(-s, nb)
                if <int> window.size() < self.ef:
                    window.push(cand)
                elif cand < window.top():
                    wtop = window.top()
                    window.pop()
                    self.reserve.push(hpair(-wtop.first, -wtop.second))
                    window.push(cand)
                else:
                    self.reserve.push(hpair(s, -nb))

        self.emitted.clear()
        while not window.empty():
            self.emitted.push_back(window.top())  # worst first
            window.pop()
        # reverse to best-first: (score desc, id asc)
        cdef Py_ssize_t lo = 0, hi = self.emitted.size()
        cdef hpair tmp
        while hi - lo > 1:
            hi -= 1
            tmp = self.emitted[lo]
            self.emitted[lo] = self.emitted[hi]
            self.emitted[hi] = tmp
            lo += 1
        self.emit_pos = 0

    def draw(self, n):
        """Next <= n best unseen candidates: (ids int64[m], scores f64[m])."""
        cdef Py_ssize_t want = int(n)
        ids = np.empty(want, dtype=np.int64)
        scores = np.empty(want, dtype=np.float64)
        cdef long long[::1] ids_v = ids
        cdef double[::1] scores_v = scores
        cdef Py_ssize_t got = 0
        cdef hpair e
        while got < want:
            if self.emit_pos >= <Py_ssize_t> self.emitted.size():
                if self.frontier.empty() and self.reserve.empty() and not self.has_seed:
                    break
                self._run_epoch()
                if self.emit_pos >= <Py_ssize_t> self.emitted.size():
                    break
            e = self.emitted[self.emit_pos]
            self.emit_pos += 1
            ids_v[got] = e.second
            scores_v[got] = -e.first
            got += 1
        return ids[:got], scores[:got]


# ---------------------------------------------------------------------------
# Build
# ---------------------------------------------------------------------------


cdef void search_layer_build(const float[:, ::1] vec, const int[:, ::1] adj,
                             const int[::1] deg, vector[hpair]& entries,
                             Py_ssize_t q_row, int ef,
                             long long[::1] visited_stamp, long long stamp,
                             long long* counter, vector[hpair]& out):
    """Beam search at one layer during build; out = (score, id) sorted desc."""
    cdef priority_queue[hpair] window    # (-score, id)
    cdef priority_queue[hpair] frontier  # (score, -id)
    cdef hpair ftop, cand, wtop
    cdef Py_ssize_t i
    cdef long long e, node, nb
    cdef double es, s
    cdef int j, dg
    for i in range(entries.size()):
        es = entries[i].first
        e = entries[i].second
        if visited_stamp[e] != stamp:
            visited_stamp[e] = stamp
            frontier.push(hpair(es, -e))
            window.push(hpair(-es, e))
    while not frontier.empty():
        ftop = frontier.top()
        if <int> window.size() >= ef and ftop.first < -window.top().first:
            break
        frontier.pop()
        node = -ftop.second
        dg = deg[node]
        for j in range(dg):
            nb = adj[node, j]
            if visited_stamp[nb] == stamp:
                continue
            visited_stamp[nb] = stamp
            s = dot_rows(vec, nb, q_row)
            counter[0] += 1
            cand = hpair(-s, nb)
            if <int> window.size() < ef:
                window.push(cand)
                frontier.push(hpair(s, -nb))
            elif cand < window.top():
                window.pop()
                window.push(cand)
                frontier.push(hpair(s, -nb))
    out.clear()
    while not window.empty():
        wtop = window.top()
        window.pop()
        out.push_back(hpair(-wtop.first, wtop.second))  # (score, id), worst first
    cdef Py_ssize_t lo = 0, hi = out.size()
    cdef hpair tmp
    while hi - lo > 1:
        hi -= 1
        tmp = out[lo]
        out[lo] = out[hi]
        out[hi] = tmp
        lo += 1


cdef void select_neighbors(const float[:, ::1] vec, vector[hpair]& candidates,
                           int m, vector[long long]& out):
    """Diversity heuristic over (score, id) candidates sorted desc."""
    out.clear()
    cdef vector[long long] discarded
    cdef Py_ssize_t i, j
    cdef long long nid
    cdef double s
    cdef bint keep
    if <int> candidates.size() <= m:
        for i in range(candidates.size()):
            out.push_back(candidates[i].second)
        return
    for i in range(candidates.size()):
        if <int> out.size() == m:
            break
        s = candidates[i].first
        nid = candidates[i].second
        keep = True
        for j in range(out.size()):
            if dot_rows(vec, nid, out[j]) > s:
                keep = False
                break
        if keep:
            out.push_back(nid)
        else:
            discarded.push_back(nid)
    i = 0
    while <int> out.size() < m and i < <Py_ssize_t> discarded.size():
        out.push_back(discarded[i])
        i += 1


cdef void remove_edge(int[:, ::1] adj, int[::1] deg, long long a, long long b):
    cdef int j
    for j in range(deg[a]):
        if adj[a, j] == b:
            deg[a] -= 1
            adj[a, j] = adj[a, deg[a]]
            return


cdef void sort_desc(vector[hpair]& items):
    """Insertion sort by (score desc, id asc); candidate lists are small."""
    cdef Py_ssize_t i, j
    cdef hpair key
    for i in range(1, <Py_ssize_t> items.size()):
        key = items[i]
        j = i - 1
        while j >= 0 and (items[j].first < key.first or
                          (items[j].first == key.first and items[j].second > key.second)):
            items[j + 1] = items[j]
            j -= 1
        items[j + 1] = key


def build_graph(float[:, ::1] vectors, int[::1] levels, int max_degree, int ef_construction):
    """Insert nodes 0..N-1 into a layered proximity graph (see _graph_py)."""
    cdef Py_ssize_t n = vectors.shape[0]
    cdef int max_level = 0
    cdef Py_ssize_t i
    for i in range(n):
        if levels[i] > max_level:
            max_level = levels[i]
    adjs = [np.zeros((n, max_degree + 1), dtype=np.int32) for _ in range(max_level + 1)]
    degs = [np.zeros(n, dtype=np.int32) for _ in range(max_level + 1)]
    visited_arr = np.full(n, -1, dtype=np.int64)
    cdef long long[::1] visited_stamp = visited_arr
    cdef long long stamp = 0
    cdef long long counter = 0

    cdef long long entry = 0
    cdef int entry_level = levels[0] if n else 0
    cdef int xl, level, m_cap
    cdef long long x, cur, s_id, dr, other
    cdef double cur_score, out_score, sc
    cdef int[:, ::1] adj_l
    cdef int[::1] deg_l
    cdef vector[hpair] entries, found, prune_cands
    cdef vector[long long] selected, keep
    cdef hpair tmp
    cdef Py_ssize_t ci, ci2, kj
    cdef bint dropped_flag

    for x in range(1, n):
        xl = levels[x]
        cur = entry
        cur_score = dot_rows(vectors, cur, x)
        counter += 1
        for level in range(entry_level, xl, -1):
            adj_l = adjs[level]
            deg_l = degs[level]
            cur = greedy_descent_build(vectors, adj_l, deg_l, cur, x, &counter, &out_score)
            cur_score = out_score
        entries.clear()
        entries.push_back(hpair(cur_score, cur))
        level = xl if xl < entry_level else entry_level
        while level >= 0:
            adj_l = adjs[level]
            deg_l = degs[level]
            stamp += 1
            search_layer_build(vectors, adj_l, deg_l, entries, x, ef_construction,
                               visited_stamp, stamp, &counter, found)
            m_cap = max_degree
            select_neighbors(vectors, found, m_cap, selected)
            for ci in range(selected.size()):
                s_id = selected[ci]
                adj_l[x, deg_l[x]] = <int> s_id
                deg_l[x] += 1
                adj_l[s_id, deg_l[s_id]] = <int> x
                deg_l[s_id] += 1
                if deg_l[s_id] > m_cap:
                    prune_cands.clear()
                    for kj in range(deg_l[s_id]):
                        other = adj_l[s_id, kj]
                        prune_cands.push_back(hpair(dot_rows(vectors, other, s_id), other))
                    sort_desc(prune_cands)
                    select_neighbors(vectors, prune_cands, m_cap, keep)
                    for kj in range(prune_cands.size()):
                        dr = prune_cands[kj].second
                        dropped_flag = True
                        for ci2 in range(keep.size()):
                            if keep[ci2] == dr:
                                dropped_flag = False
                                break
                        if dropped_flag:
                            remove_edge(adj_l, deg_l, dr, s_id)
                    deg_l[s_id] = <int> keep.size()
                    for kj in range(keep.size()):
                        adj_l[s_id, kj] = <int> keep[kj]
            if not selected.empty():
                entries.clear()
                for ci in range(selected.size()):
                    s_id = selected[ci]
                    entries.push_back(hpair(dot_rows(vectors, s_id, x), s_id))
            level -= 1
        if xl > entry_level:
            entry = x
            entry_level = xl
    return adjs, degs, int(entry)


cdef long long greedy_descent_build(const float[:, ::1] vec, const int[:, ::1] adj,
                                    const int[::1] deg, long long start, Py_ssize_t q_row,
                                    long long* counter, double* out_score) nogil:
    cdef long long cur = start
    cdef double cur_score = dot_rows(vec, cur, q_row)
    counter[0] += 1
    cdef long long best_id, nb
    cdef double best_score, s
    cdef int j, dg
    while True:
        dg = deg[cur]
        if dg == 0:
            out_score[0] = cur_score
            return cur
        best_id = -1
        best_score = 0.0
        for j in range(dg):
            nb = adj[cur, j]
            s = dot_rows(vec, nb, q_row)
            counter[0] += 1
            if best_id < 0 or s > best_score or (s == best_score and nb < best_id):
                best_id = nb
                best_score = s
        if best_score > cur_score or (best_score == cur_score and best_id < cur):
            cur = best_id
            cur_score = best_score
        else:
            out_score[0] = cur_score
            return cur
