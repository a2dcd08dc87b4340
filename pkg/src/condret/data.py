"""Synthetic user-item-topic engagement data: generation, text I/O, batching.

Users carry a ground-truth topic affinity (a probability vector); each
engagement is produced by sampling a topic from that affinity (or uniformly,
with the configured noise probability) and then a uniform item among those
carrying the topic. Events are split into train/heldout by whole (user, item)
pair so no pair straddles the split.
"""

from dataclasses import dataclass, field

import numpy as np

from .arrayio import atomic_write_text
from .errors import DataFormatError, InvalidConfigError, ReferentialIntegrityError

SPLIT_TRAIN = "train"
SPLIT_HELDOUT = "heldout"

_RESAMPLE_LIMIT = 100


@dataclass(frozen=True)
class Item:
    id: int
    feature_id: int
    topics: frozenset


@dataclass
class User:
    id: int
    feature_id: int
    affinity: "np.ndarray | None" = None  # ground truth, synthetic datasets only

    def __eq__(self, other):
        if not isinstance(other, User):
            return NotImplemented
        if (self.id, self.feature_id) != (other.id, other.feature_id):
            return False
        if (self.affinity is None) != (other.affinity is None):
            return False
        return self.affinity is None or np.array_equal(self.affinity, other.affinity)


@dataclass(frozen=True)
class EngagementEvent:
    user_id: int
    item_id: int


@dataclass
class Dataset:
    users: "list[User]"
    items: "list[Item]"
    topic_count: int
    event_users: np.ndarray  # int64[N], generation order
    event_items: np.ndarray  # int64[N]
    event_train: np.ndarray  # bool[N], True = train split

    @property
    def num_users(self):
        return len(self.users)

    @property
    def num_items(self):
        return len(self.items)

    @property
    def num_events(self):
        return len(self.event_users)

    @property
    def num_train_events(self):
        return int(self.event_train.sum())

    def train_events(self):
        """(user_ids, item_ids) arrays for the train split, in event order."""
        m = self.event_train
        return self.event_users[m], self.event_items[m]

    def heldout_events(self):
        m = ~self.event_train
        return self.event_users[m], self.event_items[m]

    def engagements(self):
        """Events as value objects (small datasets / tests)."""
        return [EngagementEvent(int(u), int(i)) for u, i in zip(self.event_users, self.event_items)]

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.topic_count == other.topic_count
            and self.users == other.users
            and self.items == other.items
            and np.array_equal(self.event_users, other.event_users)
            and np.array_equal(self.event_items, other.event_items)
            and np.array_equal(self.event_train, other.event_train)
        )

    def validate(self):
        """Referential integrity + split disjointness; raises on violation."""
        for it in self.items:
            for t in it.topics:
                if not 0 <= t < self.topic_count:
                    raise ReferentialIntegrityError(f"item {it.id} references topic {t} >= {self.topic_count}")
        if self.num_events:
            if self.event_users.min() < 0 or self.event_users.max() >= self.num_users:
                bad = int(self.event_users[(self.event_users < 0) | (self.event_users >= self.num_users)][0])
                raise ReferentialIntegrityError(f"engagement references unknown user id {bad}")
            if self.event_items.min() < 0 or self.event_items.max() >= self.num_items:
                bad = int(self.event_items[(self.event_items < 0) | (self.event_items >= self.num_items)][0])
                raise ReferentialIntegrityError(f"engagement references unknown item id {bad}")
            pair = self.event_users.astype(np.int64) * max(self.num_items, 1) + self.event_items
            train_pairs = set(pair[self.event_train].tolist())
            held_pairs = set(pair[~self.event_train].tolist())
            overlap = train_pairs & held_pairs
            if overlap:
                p = overlap.pop()
                raise ReferentialIntegrityError(
                    f"(user {p // max(self.num_items, 1)}, item {p % max(self.num_items, 1)}) appears in both splits"
                )


@dataclass(frozen=True)
class GenConfig:
    num_users: int
    num_items: int
    num_topics: int
    topics_per_item_range: "tuple[int, int]" = (1, 3)
    events_per_user: int = 50
    affinity_concentration: float = 0.1
    noise_rate: float = 0.05
    heldout_fraction: float = 0.1
    seed: int = 0

    def validate(self):
        if self.num_users < 1 or self.num_items < 1:
            raise InvalidConfigError("num_users and num_items must be positive")
        if self.num_topics < 1:
            raise InvalidConfigError("num_topics must be positive")
        lo, hi = self.topics_per_item_range
        if not (0 <= lo <= hi <= self.num_topics):
            raise InvalidConfigError(f"topics_per_item_range {lo}..{hi} must satisfy 0 <= min <= max <= num_topics")
        if self.events_per_user < 0:
            raise InvalidConfigError("events_per_user must be >= 0")
        if not self.affinity_concentration > 0:
            raise InvalidConfigError("affinity_concentration must be positive")
        if not 0.0 <= self.noise_rate <= 1.0:
            raise InvalidConfigError("noise_rate must lie in [0, 1]")
        if not 0.0 <= self.heldout_fraction < 1.0:
            raise InvalidConfigError("heldout_fraction must lie in [0, 1)")


@dataclass
class GenTrace:
    """Generator internals kept out of the dataset: per-event sampled topic."""

    event_topics: np.ndarray  # int64[N]


def _draw_affinities(rng, num_users, num_topics, concentration):
    # Dirichlet via normalized gammas; tiny concentrations can underflow a
    # whole row to zero, in which case that row is redrawn.
    g = rng.gamma(concentration, 1.0, size=(num_users, num_topics))
    sums = g.sum(axis=1)
    for u in np.flatnonzero(sums == 0.0):
        for _ in range(_RESAMPLE_LIMIT):
            row = rng.gamma(concentration, 1.0, size=num_topics)
            if row.sum() > 0.0:
                g[u] = row
                break
        else:
            raise InvalidConfigError(
                f"affinity_concentration={concentration} underflows to zero rows; increase it"
            )
    return g / g.sum(axis=1, keepdims=True)


def generate_synthetic_with_trace(config: GenConfig):
    """Like generate_synthetic, but also returns the sampled per-event topics."""
    config.validate()
    rng = np.random.default_rng(config.seed)
    U, I, T = config.num_users, config.num_items, config.num_topics

    lo, hi = config.topics_per_item_range
    sizes = rng.integers(lo, hi + 1, size=I)
    items = []
    topic_members = [[] for _ in range(T)]
    for i in range(I):
        topics = np.sort(rng.choice(T, size=int(sizes[i]), replace=False))
        for t in topics:
            topic_members[t].append(i)
        items.append(Item(id=i, feature_id=i, topics=frozenset(int(t) for t in topics)))
    member_arrays = [np.asarray(m, dtype=np.int64) for m in topic_members]
    member_counts = np.array([len(m) for m in topic_members], dtype=np.int64)

    affinity = _draw_affinities(rng, U, T, config.affinity_concentration)
    users = [User(id=u, feature_id=u, affinity=affinity[u].copy()) for u in range(U)]

    n_per_user = config.events_per_user
    ev_users, ev_items, ev_topics = [], [], []
    for u in range(U):
        if n_per_user == 0:
            continue
        noisy = rng.random(n_per_user) < config.noise_rate
        t_aff = rng.choice(T, size=n_per_user, p=affinity[u])
        t_uni = rng.integers(0, T, size=n_per_user)
        topics = np.where(noisy, t_uni, t_aff)
        for e in range(n_per_user):
            t = int(topics[e])
            tries = 0
            while member_counts[t] == 0:
                tries += 1
                if tries > _RESAMPLE_LIMIT:
                    raise InvalidConfigError(
                        f"no item carries topic {t} after {_RESAMPLE_LIMIT} resamples; "
                        "topics_per_item_range is too sparse for this vocabulary"
                    )
                if rng.random() < config.noise_rate:
                    t = int(rng.integers(0, T))
                else:
                    t = int(rng.choice(T, p=affinity[u]))
            idx = int(rng.integers(0, member_counts[t]))
            ev_users.append(u)
            ev_items.append(int(member_arrays[t][idx]))
            ev_topics.append(t)

    event_users = np.asarray(ev_users, dtype=np.int64)
    event_items = np.asarray(ev_items, dtype=np.int64)
    event_topics = np.asarray(ev_topics, dtype=np.int64)

    if len(event_users):
        pair = event_users * I + event_items
        uniq, inverse = np.unique(pair, return_inverse=True)
        held_pair = rng.random(len(uniq)) < config.heldout_fraction
        event_train = ~held_pair[inverse]
    else:
        event_train = np.zeros(0, dtype=bool)

    ds = Dataset(
        users=users,
        items=items,
        topic_count=T,
        event_users=event_users,
        event_items=event_items,
        event_train=event_train,
    )
    return ds, GenTrace(event_topics=event_topics)


def generate_synthetic(config: GenConfig) -> Dataset:
    """Deterministic synthetic dataset for a fixed config (seed included)."""
    ds, _ = generate_synthetic_with_trace(config)
    return ds


# ---------------------------------------------------------------------------
# Text serialization
# ---------------------------------------------------------------------------


def _format_floats(vec) -> str:
    return ",".join(repr(float(x)) for x in vec)


def save_dataset(dataset: Dataset, path) -> None:
    lines = [f"#meta\ttopic_count={dataset.topic_count}"]
    lines.append("#users")
    for u in dataset.users:
        aff = _format_floats(u.affinity) if u.affinity is not None else ""
        lines.append(f"{u.id}\t{u.feature_id}\t{aff}")
    lines.append("#items")
    for it in dataset.items:
        topics = ",".join(str(t) for t in sorted(it.topics))
        lines.append(f"{it.id}\t{it.feature_id}\t{topics}")
    lines.append("#engagements")
    for u, i, tr in zip(dataset.event_users, dataset.event_items, dataset.event_train):
        split = SPLIT_TRAIN if tr else SPLIT_HELDOUT
        lines.append(f"{u}\t{i}\t{split}")
    atomic_write_text(path, "\n".join(lines) + "\n")


def load_dataset(path) -> Dataset:
    users, items = [], []
    ev_users, ev_items, ev_train = [], [], []
    topic_count = None
    section = None
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n")
            if not line:
                continue
            if line.startswith("#meta"):
                fields = line.split("\t")
                for f in fields[1:]:
                    key, _, value = f.partition("=")
                    if key == "topic_count":
                        try:
                            topic_count = int(value)
                        except ValueError:
                            raise DataFormatError(f"bad topic_count {value!r}", line=lineno)
                if topic_count is None:
                    raise DataFormatError("#meta line lacks topic_count", line=lineno)
                continue
            if line in ("#users", "#items", "#engagements"):
                section = line[1:]
                continue
            if line.startswith("#"):
                raise DataFormatError(f"unknown section header {line!r}", line=lineno)
            if section is None:
                raise DataFormatError("record before any section header", line=lineno)
            fields = line.split("\t")
            if section == "users":
                if len(fields) != 3:
                    raise DataFormatError(f"user record needs 3 fields, got {len(fields)}", line=lineno)
                try:
                    uid, fid = int(fields[0]), int(fields[1])
                    aff = None
                    if fields[2]:
                        aff = np.array([float(x) for x in fields[2].split(",")], dtype=np.float64)
                except ValueError as exc:
                    raise DataFormatError(str(exc), line=lineno)
                if uid != len(users):
                    raise DataFormatError(f"user ids must be dense and ordered; expected {len(users)}, got {uid}", line=lineno)
                users.append(User(id=uid, feature_id=fid, affinity=aff))
            elif section == "items":
                if len(fields) != 3:
                    raise DataFormatError(f"item record needs 3 fields, got {len(fields)}", line=lineno)
                try:
                    iid, fid = int(fields[0]), int(fields[1])
                    topics = frozenset(int(t) for t in fields[2].split(",")) if fields[2] else frozenset()
                except ValueError as exc:
                    raise DataFormatError(str(exc), line=lineno)
                if iid != len(items):
                    raise DataFormatError(f"item ids must be dense and ordered; expected {len(items)}, got {iid}", line=lineno)
                items.append(Item(id=iid, feature_id=fid, topics=topics))
            elif section == "engagements":
                if len(fields) != 3:
                    raise DataFormatError(f"engagement record needs 3 fields, got {len(fields)}", line=lineno)
                try:
                    uid, iid = int(fields[0]), int(fields[1])
                except ValueError as exc:
                    raise DataFormatError(str(exc), line=lineno)
                if fields[2] not in (SPLIT_TRAIN, SPLIT_HELDOUT):
                    raise DataFormatError(f"unknown split {fields[2]!r}", line=lineno)
                if uid < 0 or uid >= len(users):
                    raise ReferentialIntegrityError(f"engagement references unknown user id {uid}", line=lineno)
                if iid < 0 or iid >= len(items):
                    raise ReferentialIntegrityError(f"engagement references unknown item id {iid}", line=lineno)
                ev_users.append(uid)
                ev_items.append(iid)
                ev_train.append(fields[2] == SPLIT_TRAIN)
    if topic_count is None:
        raise DataFormatError("missing #meta header with topic_count")
    ds = Dataset(
        users=users,
        items=items,
        topic_count=topic_count,
        event_users=np.asarray(ev_users, dtype=np.int64),
        event_items=np.asarray(ev_items, dtype=np.int64),
        event_train=np.asarray(ev_train, dtype=bool),
    )
    ds.validate()
    return ds


# ---------------------------------------------------------------------------
# Training substrate helpers
# ---------------------------------------------------------------------------


def item_popularity(dataset: Dataset) -> np.ndarray:
    """Engagement count per item over the train split; zero for cold items."""
    _, iids = dataset.train_events()
    return np.bincount(iids, minlength=dataset.num_items).astype(np.int64)


def batch_index_chunks(num_events: int, batch_size: int, rng) -> "list[np.ndarray]":
    """Seeded permutation of [0, num_events) chunked; short final chunk dropped."""
    perm = rng.permutation(num_events)
    n_batches = num_events // batch_size
    return [perm[b * batch_size : (b + 1) * batch_size] for b in range(n_batches)]


def make_batches(dataset: Dataset, batch_size: int, seed: int):
    """One epoch of (user_ids, item_ids) batches over the train split."""
    if batch_size < 1:
        raise InvalidConfigError("batch_size must be >= 1")
    uids, iids = dataset.train_events()
    if batch_size > len(uids):
        raise InvalidConfigError(f"batch_size {batch_size} exceeds {len(uids)} train events")
    rng = np.random.default_rng(seed)
    return [(uids[idx], iids[idx]) for idx in batch_index_chunks(len(uids), batch_size, rng)]


def topic_members_table(items, topic_count):
    """Ragged topic -> sorted item ids: (offsets int64[T+1], values int64[...])."""
    members = [[] for _ in range(topic_count)]
    for it in items:
        for t in it.topics:
            members[t].append(it.id)
    offsets = np.zeros(topic_count + 1, dtype=np.int64)
    values = []
    for t in range(topic_count):
        members[t].sort()
        values.extend(members[t])
        offsets[t + 1] = len(values)
    return offsets, np.asarray(values, dtype=np.int64)


def item_topics_table(items, topic_count):
    """Ragged item -> sorted topic ids: (offsets int64[I+1], values int64[...])."""
    offsets = np.zeros(len(items) + 1, dtype=np.int64)
    values = []
    for it in items:
        values.extend(sorted(it.topics))
        offsets[it.id + 1] = len(values)
    return offsets, np.asarray(values, dtype=np.int64)
