"""Layered proximity graph over item embeddings: build, repair, search API.

Backend-independent plumbing lives here: geometric level assignment, the
post-build layer-0 connectivity repair, and the AnnGraph value object that
retrieval serializes. The hot kernels (insertion loop, beam search cursor)
come from the selected backend module.
"""

import math
from dataclasses import dataclass

import numpy as np

from ..errors import InvalidConfigError

_MAX_LEVEL = 60


@dataclass(frozen=True)
class AnnConfig:
    max_degree: int = 16
    build_beam_width: int = 100
    query_beam_width: int = 64
    level_multiplier: float = 0.0  # 0 means the 1/ln(max_degree) default
    seed: int = 0

    def validate(self):
        if self.max_degree < 2:
            raise InvalidConfigError("max_degree must be >= 2")
        if self.build_beam_width < self.max_degree:
            raise InvalidConfigError("build_beam_width must be >= max_degree")
        if self.query_beam_width < 1:
            raise InvalidConfigError("query_beam_width must be >= 1")
        if self.level_multiplier < 0:
            raise InvalidConfigError("level_multiplier must be >= 0")

    @property
    def effective_level_multiplier(self):
        return self.level_multiplier if self.level_multiplier > 0 else 1.0 / math.log(self.max_degree)

    def to_dict(self):
        return dict(self.__dict__)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class AnnGraph:
    levels: np.ndarray          # int32[N]
    adjs: "list[np.ndarray]"    # per layer, int32[N, cap+1]
    degs: "list[np.ndarray]"    # per layer, int32[N]
    entry: int
    config: AnnConfig

    @property
    def num_layers(self):
        return len(self.adjs)

    def degree_bound_ok(self):
        return all(int(d.max(initial=0)) <= self.config.max_degree for d in self.degs)

    def edges_symmetric(self, layer=0):
        adj, deg = self.adjs[layer], self.degs[layer]
        for node in range(len(deg)):
            for nb in adj[node, : deg[node]]:
                if node not in adj[nb, : deg[nb]]:
                    return False
        return True

    def equals(self, other):
        return (
            np.array_equal(self.levels, other.levels)
            and self.entry == other.entry
            and self.num_layers == other.num_layers
            and all(np.array_equal(a, b) for a, b in zip(self.degs, other.degs))
            and all(
                np.array_equal(a[:, : self.config.max_degree], b[:, : other.config.max_degree])
                for a, b in zip(self.adjs, other.adjs)
            )
        )


def assign_levels(n, level_multiplier, seed):
    """Geometric level per node: floor(-ln(1-U) * multiplier), capped."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 7]))
    u = rng.random(n)
    levels = np.floor(-np.log1p(-u) * level_multiplier).astype(np.int32)
    return np.minimum(levels, _MAX_LEVEL)


def _components(adj, deg, n):
    comp = np.full(n, -1, dtype=np.int64)
    n_comp = 0
    for start in range(n):
        if comp[start] >= 0:
            continue
        stack = [start]
        comp[start] = n_comp
        while stack:
            node = stack.pop()
            for nb in adj[node, : deg[node]]:
                if comp[nb] < 0:
                    comp[nb] = n_comp
                    stack.append(int(nb))
        n_comp += 1
    return comp, n_comp


def repair_connectivity(vectors, adj, deg, max_degree):
    """Bridge stray layer-0 components into the main one, deterministically.

    Each stray component is joined through its best cross-component
    dot-product pair; bridge endpoints are protected while pruning the
    overflowing side back to the degree cap.
    """
    vec = np.asarray(vectors, dtype=np.float64)
    n = len(vec)
    protected = set()
    while True:
        comp, n_comp = _components(adj, deg, n)
        if n_comp <= 1:
            return
        sizes = np.bincount(comp, minlength=n_comp)
        main = int(np.argmax(sizes))  # ties: lowest component id
        stray_ids = np.flatnonzero(comp != main)
        stray_comp = comp[stray_ids[0]]
        members = np.flatnonzero(comp == stray_comp)
        main_members = np.flatnonzero(comp == main)
        block = vec[members] @ vec[main_members].T
        flat = int(np.argmax(block))  # ties: lowest (member, main member) position
        u = int(members[flat // len(main_members)])
        v = int(main_members[flat % len(main_members)])
        _add_bridge(vec, adj, deg, u, v, max_degree, protected)
        protected.add((u, v))
        protected.add((v, u))


def _add_bridge(vec, adj, deg, u, v, max_degree, protected):
    for a, b in ((u, v), (v, u)):
        adj[a, deg[a]] = b
        deg[a] += 1
        if deg[a] > max_degree:
            row = adj[a, : deg[a]]
            keep_forced = [int(r) for r in row if (a, int(r)) in protected or int(r) == b]
            others = [int(r) for r in row if int(r) not in keep_forced]
            scores = vec[others] @ vec[a]
            order = np.lexsort((others, -scores))
            budget = max(max_degree - len(keep_forced), 0)
            kept = keep_forced + [others[j] for j in order[:budget]]
            dropped = [int(r) for r in row if int(r) not in kept]
            deg[a] = len(kept)
            adj[a, : len(kept)] = kept
            for dr in dropped:
                _drop_directed(adj, deg, dr, a)


def _drop_directed(adj, deg, a, b):
    row = adj[a, : deg[a]]
    hits = np.flatnonzero(row == b)
    if len(hits):
        j = hits[0]
        deg[a] -= 1
        adj[a, j] = adj[a, deg[a]]
