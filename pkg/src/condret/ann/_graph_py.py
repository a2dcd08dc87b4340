"""Pure-Python (numpy + heapq) graph kernels: build and resumable search.

This is the fallback for environments without the compiled extension. Both
backends implement the same algorithm with the same tie-breaking:
similarity is the float64 dot product, and every ordering is by
(score descending, id ascending).

Search is organized around a resumable cursor. Each "epoch" runs a standard
beam search over the layer-0 graph with window `ef`, seeded by the best
not-yet-emitted candidates; when the beam settles, the window is emitted in
sorted order. Drawing past one window resumes expansion from the retained
frontier, so a caller can stream arbitrarily deep into the corpus.
"""

import heapq

import numpy as np


def _dots(vectors64, ids, q64):
    return vectors64[ids] @ q64


def _greedy_descent(vectors64, adj, deg, start, q64, counter):
    """Greedy walk to a local maximum at one layer; moves on (score, -id)."""
    cur = start
    cur_score = float(vectors64[cur] @ q64)
    counter[0] += 1
    while True:
        nbrs = adj[cur, : deg[cur]]
        if len(nbrs) == 0:
            return cur, cur_score
        scores = _dots(vectors64, nbrs, q64)
        counter[0] += len(nbrs)
        best = np.lexsort((nbrs, -scores))[0]
        b_id, b_score = int(nbrs[best]), float(scores[best])
        if b_score > cur_score or (b_score == cur_score and b_id < cur):
            cur, cur_score = b_id, b_score
        else:
            return cur, cur_score


class Cursor:
    """Resumable best-first traversal of the layer-0 graph for one query."""

    def __init__(self, vectors, levels, adjs, degs, entry, query, ef):
        self._vec = np.asarray(vectors, dtype=np.float64)
        self._adj0 = adjs[0]
        self._deg0 = degs[0]
        self._q = np.asarray(query, dtype=np.float64)
        self._ef = int(ef)
        n = len(self._vec)
        self._visited = np.zeros(n, dtype=bool)
        self._frontier = []  # (-score, id): unexpanded scored nodes
        self._reserve = []   # (-score, id): scored, unemitted, outside the window
        self._emitted = []   # sorted (score desc, id asc) pairs awaiting draw
        self._emit_pos = 0
        self._scanned = [0]

        start = int(entry)
        start_score = float(self._vec[start] @ self._q)
        self._scanned[0] += 1
        for level in range(int(levels[entry]), 0, -1):
            start, start_score = _greedy_descent(
                self._vec, adjs[level], degs[level], start, self._q, self._scanned
            )
        self._visited[start] = True
        heapq.heappush(self._frontier, (-start_score, start))
        self._seed = [(start_score, start)]

    @property
    def scanned(self):
        """Distance evaluations so far (including upper-layer descent)."""
        return self._scanned[0]

    @property
    def exhausted(self):
        return (
            self._emit_pos >= len(self._emitted)
            and not self._frontier
            and not self._reserve
            and self._seed is None
        )

    def _run_epoch(self):
        ef = self._ef
        window = []  # (score, -id) min-heap; root = worst kept
        if self._seed is not None:
            for score, nid in self._seed:
                heapq.heappush(window, (score, -nid))
            self._seed = None
        while self._reserve and len(window) < ef:
            neg_score, nid = heapq.heappop(self._reserve)
            heapq.heappush(window, (-neg_score, -nid))

        vec, q, adj0, deg0 = self._vec, self._q, self._adj0, self._deg0
        visited = self._visited
        frontier = self._frontier
        reserve = self._reserve
        while frontier:
            f_negscore, f_id = frontier[0]
            if len(window) >= ef and -f_negscore < window[0][0]:
                break
            heapq.heappop(frontier)
            nbrs = adj0[f_id, : deg0[f_id]]
            fresh = nbrs[~visited[nbrs]]
            if len(fresh) == 0:
                continue
            visited[fresh] = True
            scores = vec[fresh] @ q
            self._scanned[0] += len(fresh)
            for nid, s in zip(fresh, scores):
                nid = int(nid)
                s = float(s)
                heapq.heappush(frontier, (-s, nid))
                if len(window) < ef:
                    heapq.heappush(window, (s, -nid))
                elif (s, -nid) > window[0]:
                    worst_s, worst_negid = heapq.heappushpop(window, (s, -nid))
                    heapq.heappush(reserve, (-worst_s, -worst_negid))
                else:
                    heapq.heappush(reserve, (-s, nid))
        self._emitted = sorted(((s, -negid) for s, negid in window), key=lambda p: (-p[0], p[1]))
        self._emit_pos = 0

    def draw(self, n):
        """Next <= n best unseen candidates: (ids int64[m], scores f64[m])."""
        ids, scores = [], []
        while len(ids) < n:
            if self._emit_pos >= len(self._emitted):
                if not self._frontier and not self._reserve and self._seed is None:
                    break
                self._run_epoch()
                if self._emit_pos >= len(self._emitted):
                    break
            s, nid = self._emitted[self._emit_pos]
            self._emit_pos += 1
            ids.append(nid)
            scores.append(s)
        return np.asarray(ids, dtype=np.int64), np.asarray(scores, dtype=np.float64)


# ---------------------------------------------------------------------------
# Build
# ---------------------------------------------------------------------------


def _search_layer(vectors64, adj, deg, entries, q64, ef, visited_stamp, stamp, counter):
    """Standard beam search at one layer; returns [(score, id)] sorted desc."""
    window = []  # (score, -id) min-heap, root = worst
    frontier = []
    for e, e_score in entries:
        if visited_stamp[e] != stamp:
            visited_stamp[e] = stamp
            heapq.heappush(frontier, (-e_score, e))
            heapq.heappush(window, (e_score, -e))
    while frontier:
        f_negscore, f_id = frontier[0]
        if len(window) >= ef and -f_negscore < window[0][0]:
            break
        heapq.heappop(frontier)
        nbrs = adj[f_id, : deg[f_id]]
        fresh = nbrs[visited_stamp[nbrs] != stamp]
        if len(fresh) == 0:
            continue
        visited_stamp[fresh] = stamp
        scores = vectors64[fresh] @ q64
        counter[0] += len(fresh)
        for nid, s in zip(fresh, scores):
            nid = int(nid)
            s = float(s)
            if len(window) < ef:
                heapq.heappush(window, (s, -nid))
                heapq.heappush(frontier, (-s, nid))
            elif (s, -nid) > window[0]:
                heapq.heappushpop(window, (s, -nid))
                heapq.heappush(frontier, (-s, nid))
    return sorted(((s, -negid) for s, negid in window), key=lambda p: (-p[0], p[1]))


def _select_neighbors(vectors64, candidates, m):
    """Diversity heuristic: keep a candidate only if it scores higher against
    the query than against every already-kept candidate; backfill from the
    discards in order. `candidates` is [(score, id)] sorted desc."""
    if len(candidates) <= m:
        return [nid for _, nid in candidates]
    selected = []
    discarded = []
    for s, nid in candidates:
        if len(selected) == m:
            break
        keep = True
        for kid in selected:
            if float(vectors64[nid] @ vectors64[kid]) > s:
                keep = False
                break
        if keep:
            selected.append(nid)
        else:
            discarded.append(nid)
    for nid in discarded:
        if len(selected) == m:
            break
        selected.append(nid)
    return selected


def _remove_edge(adj, deg, a, b):
    row = adj[a, : deg[a]]
    hits = np.flatnonzero(row == b)
    if len(hits):
        j = hits[0]
        deg[a] -= 1
        adj[a, j] = adj[a, deg[a]]


def build_graph(vectors, levels, max_degree, ef_construction):
    """Insert nodes 0..N-1 into a layered proximity graph.

    Returns (adjs, degs, entry): per-layer fixed-capacity adjacency arrays
    (one spare column for pre-prune overflow), per-layer degrees, and the
    entry node id. Every layer caps degrees at max_degree.
    """
    vec = np.asarray(vectors, dtype=np.float64)
    n = len(vec)
    levels = np.asarray(levels, dtype=np.int32)
    max_level = int(levels.max()) if n else 0
    caps = [max_degree for _ in range(max_level + 1)]
    adjs = [np.zeros((n, caps[l] + 1), dtype=np.int32) for l in range(max_level + 1)]
    degs = [np.zeros(n, dtype=np.int32) for _ in range(max_level + 1)]
    visited_stamp = np.full(n, -1, dtype=np.int64)
    stamp = 0
    counter = [0]

    entry = 0
    entry_level = int(levels[0]) if n else 0
    for x in range(1, n):
        xl = int(levels[x])
        q = vec[x]
        cur = entry
        cur_score = float(vec[cur] @ q)
        for level in range(entry_level, xl, -1):
            cur, cur_score = _greedy_descent(vec, adjs[level], degs[level], cur, q, counter)
        entries = [(cur_score, cur)]
        for level in range(min(xl, entry_level), -1, -1):
            stamp += 1
            found = _search_layer(vec, adjs[level], degs[level], [(e, s) for s, e in entries],
                                  q, ef_construction, visited_stamp, stamp, counter)
            m = caps[level]
            selected = _select_neighbors(vec, found, m)
            a, d = adjs[level], degs[level]
            for s_id in selected:
                a[x, d[x]] = s_id
                d[x] += 1
                a[s_id, d[s_id]] = x
                d[s_id] += 1
                if d[s_id] > m:
                    row = a[s_id, : d[s_id]]
                    scores = vec[row] @ vec[s_id]
                    order = np.lexsort((row, -scores))
                    cands = [(float(scores[j]), int(row[j])) for j in order]
                    keep = _select_neighbors(vec, cands, m)
                    dropped = set(int(r) for r in row) - set(keep)
                    d[s_id] = len(keep)
                    a[s_id, : len(keep)] = keep
                    for dr in dropped:
                        _remove_edge(a, d, dr, s_id)
            entries = [(float(vec[s_id] @ q), s_id) for s_id in selected] or entries
        if xl > entry_level:
            entry = x
            entry_level = xl
    return adjs, degs, entry
