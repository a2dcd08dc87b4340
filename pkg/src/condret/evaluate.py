"""Metrics and the experiment runner comparing INDEX, LR and CR.

Evaluation queries come from heldout events: the query user is the event's
user and the condition is a topic sampled from the event item's topic set.
Engagement is proxied by recall@k against the user's heldout items (the
paper-style online metrics have no offline analogue here); condition
relevance is the topic matching rate of the returned lists.
"""

from dataclasses import dataclass

import numpy as np

from .data import Dataset
from .errors import EmptyHeldoutError, InvalidConfigError, UndefinedMetricError
from .model import user_tower_forward
from .retrieval import (
    ItemIndex,
    RetrievalResult,
    build_index,
    exact_topk,
    popularity_index_retrieve,
    postfilter_oracle,
    streaming_filtered_search,
)

METHODS = ("INDEX", "LR", "CR")
FILTER_MODES = ("none", "streaming", "postfilter")


def topic_match_rate(results) -> float:
    """Fraction of returned items matching their query's condition."""
    returned = sum(len(r) for r in results)
    if returned == 0:
        raise UndefinedMetricError("no items returned; topic match rate undefined")
    matched = sum(int(r.match_flags.sum()) for r in results)
    return matched / returned


def recall_at_k(result: RetrievalResult, heldout_items) -> float:
    """|result ∩ heldout| / min(k, |heldout|) with k the requested depth."""
    heldout = set(int(i) for i in heldout_items)
    if not heldout:
        raise EmptyHeldoutError("user has no heldout items")
    hits = sum(1 for i in result.item_ids if int(i) in heldout)
    k = result.k_requested or len(result.item_ids)
    return hits / min(k, len(heldout))


@dataclass
class EvalQuery:
    user_id: int
    topic: int
    heldout_items: "set[int]"


def build_eval_queries(dataset: Dataset, seed: int, max_queries=None) -> "list[EvalQuery]":
    """One query per heldout event (topic drawn from the item's topics).

    Events whose item has no topics are skipped: a conditional query needs a
    non-null condition. With max_queries set, a seeded subsample is taken.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, 11]))
    h_users, h_items = dataset.heldout_events()
    per_user = {}
    for u, i in zip(h_users, h_items):
        per_user.setdefault(int(u), set()).add(int(i))
    queries = []
    for u, i in zip(h_users, h_items):
        topics = sorted(dataset.items[int(i)].topics)
        if not topics:
            continue
        t = topics[int(rng.integers(0, len(topics)))]
        queries.append(EvalQuery(user_id=int(u), topic=t, heldout_items=per_user[int(u)]))
    if max_queries is not None and len(queries) > max_queries:
        pick = rng.choice(len(queries), size=max_queries, replace=False)
        queries = [queries[j] for j in np.sort(pick)]
    return queries


@dataclass
class MethodRow:
    method: str
    filter_mode: str
    topic_match_rate: float
    recall: float
    mean_scanned: float
    mean_result_size: float
    num_queries: int


@dataclass
class EvalReport:
    rows: "list[MethodRow]"
    k: int
    notes: "dict[str, object]"

    def to_tsv(self) -> str:
        lines = [f"# engagement proxy: recall@{self.k} on heldout events (no online CTR/WAU analogue)"]
        for key in sorted(self.notes):
            lines.append(f"# {key}={self.notes[key]}")
        lines.append("method\tfilter\ttopic_match_rate\trecall_at_k\tmean_scanned\tmean_result_size\tnum_queries")
        for r in self.rows:
            lines.append(
                f"{r.method}\t{r.filter_mode}\t{r.topic_match_rate:.6f}\t{r.recall:.6f}"
                f"\t{r.mean_scanned:.2f}\t{r.mean_result_size:.2f}\t{r.num_queries}"
            )
        return "\n".join(lines) + "\n"

    def format_table(self) -> str:
        headers = ["method", "filter", "match_rate", f"recall@{self.k}", "scanned", "size", "queries"]
        rows = [
            [r.method, r.filter_mode, f"{r.topic_match_rate:.4f}", f"{r.recall:.4f}",
             f"{r.mean_scanned:.1f}", f"{r.mean_result_size:.1f}", str(r.num_queries)]
            for r in self.rows
        ]
        widths = [max(len(h), *(len(row[c]) for row in rows)) if rows else len(h)
                  for c, h in enumerate(headers)]
        def fmt(cells):
            return "  ".join(c.ljust(w) for c, w in zip(cells, widths))
        return "\n".join([fmt(headers)] + [fmt(r) for r in rows])

    def row(self, method, filter_mode=None) -> MethodRow:
        for r in self.rows:
            if r.method == method and (filter_mode is None or r.filter_mode == filter_mode):
                return r
        raise KeyError(f"no row for ({method}, {filter_mode})")


def run_experiment(dataset: Dataset, checkpoints: dict, methods, k, modes,
                   indexes: dict = None, seed: int = 0, max_queries=None,
                   streaming_batch_size: int = 64, streaming_budget: int = None,
                   overfetch_factor: int = 10) -> EvalReport:
    """Run every requested (method, filter mode) over the heldout queries.

    `checkpoints` maps LR/CR to ModelParams; `indexes` optionally supplies
    prebuilt ItemIndex objects per method (required when a streaming mode is
    requested, since that needs an ANN graph).
    """
    methods = list(methods)
    modes = list(modes)
    for m in methods:
        if m not in METHODS:
            raise InvalidConfigError(f"unknown method {m!r}")
        if m != "INDEX" and m not in checkpoints:
            raise InvalidConfigError(f"method {m} requested but no checkpoint supplied")
    for mode in modes:
        if mode not in FILTER_MODES:
            raise InvalidConfigError(f"unknown filter mode {mode!r}")

    queries = build_eval_queries(dataset, seed, max_queries)
    if not queries:
        raise InvalidConfigError("no evaluation queries (empty heldout split?)")
    budget = streaming_budget if streaming_budget is not None else max(4 * k, k)

    indexes = dict(indexes or {})
    for m in methods:
        if m != "INDEX" and m not in indexes:
            indexes[m] = build_index(checkpoints[m], dataset)

    rows = []
    for method in methods:
        if method == "INDEX":
            results = []
            by_topic = {}
            recalls = []
            for q in queries:
                if q.topic not in by_topic:
                    by_topic[q.topic] = popularity_index_retrieve(dataset, q.topic, k)
                res = by_topic[q.topic]
                results.append(res)
                recalls.append(recall_at_k(res, q.heldout_items))
            rows.append(_aggregate("INDEX", "-", results, recalls, k))
            continue
        index = indexes[method]
        params = checkpoints[method]
        q_embs = _query_embeddings(params, queries)
        for mode in modes:
            results = []
            recalls = []
            for q, emb in zip(queries, q_embs):
                if mode == "none":
                    res = exact_topk(index, emb, k, condition=q.topic)
                elif mode == "streaming":
                    res = streaming_filtered_search(index, emb, q.topic, k, streaming_batch_size, budget)
                else:
                    res = postfilter_oracle(index, emb, q.topic, k, overfetch_factor)
                results.append(res)
                recalls.append(recall_at_k(res, q.heldout_items))
            rows.append(_aggregate(method, mode, results, recalls, k))

    notes = {
        "num_queries": len(queries),
        "methods": ",".join(methods),
        "modes": ",".join(modes),
        "seed": seed,
    }
    return EvalReport(rows=rows, k=k, notes=notes)


def _query_embeddings(params, queries):
    uids = np.asarray([q.user_id for q in queries], dtype=np.int64)
    if params.config.conditional:
        conds = np.asarray([q.topic for q in queries], dtype=np.int64)
    else:
        conds = None
    out, _ = user_tower_forward(uids, conds, params)
    return out


def _aggregate(method, mode, results, recalls, k) -> MethodRow:
    return MethodRow(
        method=method,
        filter_mode=mode,
        topic_match_rate=topic_match_rate(results),
        recall=float(np.mean(recalls)),
        mean_scanned=float(np.mean([r.scanned_count for r in results])),
        mean_result_size=float(np.mean([len(r) for r in results])),
        num_queries=len(results),
    )
