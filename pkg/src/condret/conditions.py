"""Condition extraction: map an item to a single topic condition for training.

A condition is an integer in [0, T]; the value T is the reserved null token
used for items without topics (and available to serving as "no condition").
"""

import numpy as np

from .data import Dataset, Item, item_topics_table


def null_condition(topic_count: int) -> int:
    return topic_count


def extract_condition(item: Item, rng, topic_count: int) -> int:
    """Uniform draw from the item's topics; the null token if it has none."""
    if not item.topics:
        return null_condition(topic_count)
    topics = sorted(item.topics)
    return topics[int(rng.integers(0, len(topics)))]


class ConditionSampler:
    """Per-epoch condition assignment for every train event.

    With resample_per_epoch=True each epoch draws a fresh condition per event,
    so one engaged pair supervises several (user, condition) combinations over
    a run; with False, the epoch-0 assignment is reused forever.
    """

    def __init__(self, dataset: Dataset, resample_per_epoch: bool, seed: int):
        self.topic_count = dataset.topic_count
        self.resample_per_epoch = resample_per_epoch
        self.seed = seed
        self._offsets, self._values = item_topics_table(dataset.items, dataset.topic_count)
        _, self._train_items = dataset.train_events()
        self._cached = None

    def conditions(self, epoch: int) -> np.ndarray:
        """int64 conditions aligned with the train-event order."""
        if not self.resample_per_epoch:
            if self._cached is None:
                self._cached = self._draw(0)
            return self._cached
        return self._draw(epoch)

    def _draw(self, epoch: int) -> np.ndarray:
        rng = np.random.default_rng(np.random.SeedSequence([self.seed, 1, epoch]))
        items = self._train_items
        counts = self._offsets[items + 1] - self._offsets[items]
        out = np.full(len(items), null_condition(self.topic_count), dtype=np.int64)
        has = counts > 0
        if has.any():
            picks = rng.integers(0, np.where(has, counts, 1))
            out[has] = self._values[self._offsets[items[has]] + picks[has]]
        return out
