"""Serving: exact top-k oracle, graph ANN, filtered search, popularity baseline.

Similarity is the raw dot product everywhere; every ranking breaks ties by
ascending item id, which makes the oracle-equality tests exact. The ANN
traversal counts distance evaluations; the streaming filter counts candidates
drawn, which is the artifact's serving-cost proxy.
"""

from dataclasses import dataclass, field

import numpy as np

from . import ann
from .ann.graph import AnnConfig, AnnGraph
from .arrayio import load_container, save_container
from .data import Dataset, item_popularity, item_topics_table, topic_members_table
from .errors import InvalidConfigError, MissingGraphError
from .model import ModelParams, item_tower_forward

_FORWARD_BATCH = 4096


@dataclass
class RetrievalResult:
    item_ids: np.ndarray          # int64[m], scores non-increasing, ties id-ascending
    scores: np.ndarray            # float64[m]
    match_flags: "np.ndarray | None"  # bool[m]; None when the query had no condition
    scanned_count: int
    truncated: bool = False
    k_requested: int = 0

    def __len__(self):
        return len(self.item_ids)


@dataclass
class ItemIndex:
    embeddings: np.ndarray        # float32 (I, d), frozen
    topic_offsets: np.ndarray     # ragged item -> topics
    topic_values: np.ndarray
    popularity: np.ndarray        # int64[I], train-split engagement counts
    topic_count: int
    graph: "AnnGraph | None" = None
    _emb64: "np.ndarray | None" = field(default=None, repr=False)
    _topic_masks: dict = field(default_factory=dict, repr=False)
    _member_table: "tuple | None" = field(default=None, repr=False)

    @property
    def num_items(self):
        return len(self.embeddings)

    @property
    def dim(self):
        return self.embeddings.shape[1]

    @property
    def item_ids(self):
        return np.arange(self.num_items, dtype=np.int64)

    def embeddings64(self):
        if self._emb64 is None:
            self._emb64 = self.embeddings.astype(np.float64)
        return self._emb64

    def topics_of(self, item_id):
        return self.topic_values[self.topic_offsets[item_id] : self.topic_offsets[item_id + 1]]

    def topic_mask(self, topic):
        """bool[I]: items whose topic set contains `topic` (cached)."""
        if topic not in self._topic_masks:
            mask = np.zeros(self.num_items, dtype=bool)
            counts = np.diff(self.topic_offsets)
            owners = np.repeat(np.arange(self.num_items), counts)
            mask[owners[self.topic_values == topic]] = True
            self._topic_masks[topic] = mask
        return self._topic_masks[topic]

    def topic_members(self):
        if self._member_table is None:
            counts = np.diff(self.topic_offsets)
            owners = np.repeat(np.arange(self.num_items, dtype=np.int64), counts)
            offsets = np.zeros(self.topic_count + 1, dtype=np.int64)
            values_per_topic = [[] for _ in range(self.topic_count)]
            for item, t in zip(owners, self.topic_values):
                values_per_topic[t].append(int(item))
            values = []
            for t in range(self.topic_count):
                values.extend(sorted(values_per_topic[t]))
                offsets[t + 1] = len(values)
            self._member_table = (offsets, np.asarray(values, dtype=np.int64))
        return self._member_table

    def match_flags(self, item_ids, condition):
        if condition is None:
            return None
        return self.topic_mask(int(condition))[item_ids]


def build_index(params: ModelParams, dataset: Dataset) -> ItemIndex:
    """Materialize item-tower outputs plus the item metadata serving needs."""
    cfg = params.config
    if cfg.num_items != dataset.num_items or cfg.num_topics != dataset.topic_count:
        raise InvalidConfigError(
            f"checkpoint vocab (items={cfg.num_items}, topics={cfg.num_topics}) does not match "
            f"dataset (items={dataset.num_items}, topics={dataset.topic_count})"
        )
    outs = []
    for start in range(0, dataset.num_items, _FORWARD_BATCH):
        ids = np.arange(start, min(start + _FORWARD_BATCH, dataset.num_items))
        out, _ = item_tower_forward(ids, params)
        outs.append(out.astype(np.float32))
    offsets, values = item_topics_table(dataset.items, dataset.topic_count)
    return ItemIndex(
        embeddings=np.vstack(outs) if outs else np.zeros((0, cfg.output_dim), np.float32),
        topic_offsets=offsets,
        topic_values=values,
        popularity=item_popularity(dataset),
        topic_count=dataset.topic_count,
    )


def build_ann(index: ItemIndex, config: AnnConfig, backend=None) -> ItemIndex:
    """Attach a layered proximity graph; returns the same index."""
    index.graph = ann.build_ann_graph(index.embeddings, config, backend=backend)
    return index


# ---------------------------------------------------------------------------
# Query operations
# ---------------------------------------------------------------------------


def _rank(ids, scores, k):
    order = np.lexsort((ids, -scores))[:k]
    return ids[order], scores[order]


def exact_topk(index: ItemIndex, query_emb, k, predicate=None, condition=None) -> RetrievalResult:
    """Brute-force top-k by dot product among items passing `predicate`.

    `predicate` may be None, a bool mask over items, or a callable on item id.
    `condition` only annotates match flags; pass the topic mask as `predicate`
    to actually filter.
    """
    if k < 1:
        raise InvalidConfigError("k must be >= 1")
    q = np.asarray(query_emb, dtype=np.float64)
    scores = index.embeddings64() @ q
    if predicate is None:
        ids = index.item_ids
    elif callable(predicate):
        mask = np.fromiter((bool(predicate(i)) for i in range(index.num_items)), dtype=bool,
                           count=index.num_items)
        ids = np.flatnonzero(mask)
    else:
        ids = np.flatnonzero(np.asarray(predicate, dtype=bool))
    top_ids, top_scores = _rank(ids, scores[ids], k)
    return RetrievalResult(
        item_ids=top_ids,
        scores=top_scores,
        match_flags=index.match_flags(top_ids, condition),
        scanned_count=index.num_items,
        truncated=False,
        k_requested=k,
    )


def exact_filtered_topk(index: ItemIndex, query_emb, condition, k) -> RetrievalResult:
    mask = index.topic_mask(int(condition))
    return exact_topk(index, query_emb, k, predicate=mask, condition=condition)


def _require_graph(index):
    if index.graph is None:
        raise MissingGraphError("index has no ANN graph; call build_ann first")
    return index.graph


def ann_search(index: ItemIndex, query_emb, k, ef_search=None) -> RetrievalResult:
    """Beam search over the layer-0 graph; scanned_count = distance evals."""
    graph = _require_graph(index)
    ef = int(ef_search) if ef_search is not None else graph.config.query_beam_width
    if ef < k:
        raise InvalidConfigError(f"query beam width {ef} must be >= k {k}")
    cursor = ann.make_cursor(index.embeddings, graph, np.asarray(query_emb, np.float64), ef)
    ids, scores = cursor.draw(k)
    return RetrievalResult(
        item_ids=ids,
        scores=scores,
        match_flags=None,
        scanned_count=cursor.scanned,
        truncated=False,
        k_requested=k,
    )


def streaming_filtered_search(index: ItemIndex, query_emb, condition, k, batch_size, budget,
                              ef_search=None) -> RetrievalResult:
    """Interleaved ANN traversal and topic filtering in mini-batches.

    Draws the next `batch_size` best unseen candidates from a resumable
    traversal, keeps those carrying `condition`, and stops at k matches or
    after `budget` candidates drawn. scanned_count counts candidates drawn.
    """
    graph = _require_graph(index)
    if batch_size < 1:
        raise InvalidConfigError("batch_size must be >= 1")
    if budget < k:
        raise InvalidConfigError(f"budget {budget} must be >= k {k}")
    ef = int(ef_search) if ef_search is not None else graph.config.query_beam_width
    mask = index.topic_mask(int(condition)) if condition is not None else None
    cursor = ann.make_cursor(index.embeddings, graph, np.asarray(query_emb, np.float64), ef)

    match_ids, match_scores = [], []
    drawn = 0
    while len(match_ids) < k and drawn < budget:
        ids, scores = cursor.draw(min(batch_size, budget - drawn))
        if len(ids) == 0:
            break
        drawn += len(ids)
        keep = mask[ids] if mask is not None else np.ones(len(ids), dtype=bool)
        match_ids.extend(ids[keep].tolist())
        match_scores.extend(scores[keep].tolist())

    ids = np.asarray(match_ids, dtype=np.int64)
    scores = np.asarray(match_scores, dtype=np.float64)
    ids, scores = _rank(ids, scores, k)
    return RetrievalResult(
        item_ids=ids,
        scores=scores,
        match_flags=(np.ones(len(ids), dtype=bool) if condition is not None else None),
        scanned_count=drawn,
        truncated=len(ids) < k,
        k_requested=k,
    )


def postfilter_oracle(index: ItemIndex, query_emb, condition, k, overfetch_factor) -> RetrievalResult:
    """Exact top (k * overfetch) unfiltered, then keep condition matches."""
    if overfetch_factor < 1:
        raise InvalidConfigError("overfetch_factor must be >= 1")
    fetch = min(int(k * overfetch_factor), index.num_items)
    unfiltered = exact_topk(index, query_emb, fetch)
    mask = index.topic_mask(int(condition))[unfiltered.item_ids]
    ids = unfiltered.item_ids[mask][:k]
    scores = unfiltered.scores[mask][:k]
    return RetrievalResult(
        item_ids=ids,
        scores=scores,
        match_flags=np.ones(len(ids), dtype=bool),
        scanned_count=index.num_items,
        truncated=False,
        k_requested=k,
    )


def popularity_index_retrieve(source, topic, k) -> RetrievalResult:
    """Non-personalized topic -> items lookup ordered by popularity.

    `source` is a Dataset or an ItemIndex. Scores are popularity counts;
    scanned_count is the topic posting-list length.
    """
    if isinstance(source, Dataset):
        offsets, values = topic_members_table(source.items, source.topic_count)
        popularity = item_popularity(source)
        topic_count = source.topic_count
    else:
        offsets, values = source.topic_members()
        popularity = source.popularity
        topic_count = source.topic_count
    if not 0 <= topic < topic_count:
        raise InvalidConfigError(f"topic {topic} out of range [0, {topic_count})")
    members = values[offsets[topic] : offsets[topic + 1]]
    counts = popularity[members].astype(np.float64)
    ids, scores = _rank(members, counts, k)
    return RetrievalResult(
        item_ids=ids,
        scores=scores,
        match_flags=np.ones(len(ids), dtype=bool),
        scanned_count=len(members),
        truncated=False,
        k_requested=k,
    )


# ---------------------------------------------------------------------------
# Index files
# ---------------------------------------------------------------------------


def save_index(path, index: ItemIndex) -> None:
    meta = {
        "kind": "index",
        "num_items": index.num_items,
        "dim": index.dim,
        "topic_count": index.topic_count,
        "has_graph": index.graph is not None,
    }
    arrays = {
        "embeddings": index.embeddings,
        "topic_offsets": index.topic_offsets,
        "topic_values": index.topic_values,
        "popularity": index.popularity,
    }
    if index.graph is not None:
        g = index.graph
        meta["ann"] = g.config.to_dict()
        meta["entry"] = int(g.entry)
        meta["num_layers"] = g.num_layers
        arrays["levels"] = g.levels
        for l, (a, d) in enumerate(zip(g.adjs, g.degs)):
            arrays[f"adj{l}"] = a
            arrays[f"deg{l}"] = d
    save_container(path, meta, arrays)


def load_index(path) -> ItemIndex:
    meta, arrays = load_container(path)
    if meta.get("kind") != "index":
        raise InvalidConfigError(f"{path} is not an index file")
    index = ItemIndex(
        embeddings=arrays["embeddings"],
        topic_offsets=arrays["topic_offsets"],
        topic_values=arrays["topic_values"],
        popularity=arrays["popularity"],
        topic_count=meta["topic_count"],
    )
    if meta.get("has_graph"):
        n_layers = meta["num_layers"]
        index.graph = AnnGraph(
            levels=arrays["levels"],
            adjs=[arrays[f"adj{l}"] for l in range(n_layers)],
            degs=[arrays[f"deg{l}"] for l in range(n_layers)],
            entry=meta["entry"],
            config=AnnConfig.from_dict(meta["ann"]),
        )
    return index
