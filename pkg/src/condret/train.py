"""Contrastive training: in-batch sampled softmax plus optional extensions.

Each positive (user, item) row treats the other items in its batch as
negatives; duplicates are kept as-is. Optional pieces, all off by default:
a popularity logQ correction on the logits, same-condition hard negatives
appended per row, and a squared-distance alignment term pulling the
conditional user embedding toward its condition embedding row.
"""

import time
from dataclasses import dataclass

import numpy as np

from .conditions import ConditionSampler, null_condition
from .data import Dataset, batch_index_chunks, item_popularity, topic_members_table
from .errors import InvalidConfigError, NumericsError, TrainingDivergedError
from .model import (
    ModelParams,
    TowerConfig,
    init_params,
    item_tower_forward,
    tower_backward,
    user_tower_forward,
)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 256
    epochs: int = 6
    learning_rate: float = 0.01
    optimizer: str = "adam"
    logq_correction: bool = True
    hard_negatives_per_positive: int = 0
    alignment_weight: float = 0.0
    resample_per_epoch: bool = True
    seed: int = 0

    def validate(self, tower_config: TowerConfig = None):
        if self.batch_size < 2:
            raise InvalidConfigError("batch_size must be >= 2 (a batch of 1 has no negatives)")
        if self.epochs < 1:
            raise InvalidConfigError("epochs must be >= 1")
        if self.learning_rate < 0 or not np.isfinite(self.learning_rate):
            raise InvalidConfigError("learning_rate must be finite and >= 0")
        if self.optimizer not in ("sgd", "adam"):
            raise InvalidConfigError("optimizer must be 'sgd' or 'adam'")
        if self.hard_negatives_per_positive < 0:
            raise InvalidConfigError("hard_negatives_per_positive must be >= 0")
        if self.alignment_weight < 0 or not np.isfinite(self.alignment_weight):
            raise InvalidConfigError("alignment_weight must be finite and >= 0")
        if tower_config is not None and self.alignment_weight > 0:
            if not tower_config.conditional:
                raise InvalidConfigError("alignment loss requires a conditional user tower")
            if tower_config.embed_dim_condition != tower_config.output_dim:
                raise InvalidConfigError(
                    "alignment loss requires embed_dim_condition == output_dim "
                    f"({tower_config.embed_dim_condition} != {tower_config.output_dim})"
                )


@dataclass
class TrainReport:
    epoch_losses: "list[float]"
    batch_losses: "list[float]"
    params: ModelParams
    wall_clock_s: float


# ---------------------------------------------------------------------------
# Loss pieces
# ---------------------------------------------------------------------------


def softmax_loss_with_negatives(user_embs, item_embs, corrections=None,
                                hard_embs=None, hard_corrections=None):
    """Sampled-softmax loss over in-batch plus optional per-row hard columns.

    Row i scores all batch items (its own column i is the positive) and, when
    given, its H private hard-negative columns. Returns the scalar loss and
    exact gradients w.r.t. the three embedding blocks (float64).
    """
    U = np.asarray(user_embs, dtype=np.float64)
    V = np.asarray(item_embs, dtype=np.float64)
    if U.shape != V.shape or U.ndim != 2:
        raise InvalidConfigError(f"user/item embedding blocks must both be (B, d); got {U.shape}, {V.shape}")
    B = U.shape[0]
    logits = U @ V.T
    if corrections is not None:
        logits = logits - np.asarray(corrections, dtype=np.float64)[None, :]
    H = 0
    if hard_embs is not None and hard_embs.size:
        Hm = np.asarray(hard_embs, dtype=np.float64)  # (B, H, d)
        H = Hm.shape[1]
        hard_logits = np.einsum("bd,bhd->bh", U, Hm)
        if hard_corrections is not None:
            hard_logits = hard_logits - np.asarray(hard_corrections, dtype=np.float64)
        logits = np.concatenate([logits, hard_logits], axis=1)
    if not np.isfinite(logits).all():
        bad = np.argwhere(~np.isfinite(logits))[0]
        raise NumericsError(f"non-finite logit at row {bad[0]}, column {bad[1]}")

    maxes = logits.max(axis=1, keepdims=True)
    shifted = logits - maxes
    exp = np.exp(shifted)
    denom = exp.sum(axis=1, keepdims=True)
    log_probs_pos = shifted[np.arange(B), np.arange(B)] - np.log(denom[:, 0])
    loss = -log_probs_pos.mean()

    probs = exp / denom
    dlogits = probs
    dlogits[np.arange(B), np.arange(B)] -= 1.0
    dlogits /= B

    grad_user = dlogits[:, :B] @ V
    grad_item = dlogits[:, :B].T @ U
    grad_hard = None
    if H:
        grad_user += np.einsum("bh,bhd->bd", dlogits[:, B:], Hm)
        grad_hard = dlogits[:, B:, None] * U[:, None, :]
    return float(loss), grad_user, grad_item, grad_hard


def inbatch_softmax_loss(user_embs, item_embs, corrections=None):
    """In-batch softmax loss and gradients (no hard-negative columns)."""
    loss, gu, gv, _ = softmax_loss_with_negatives(user_embs, item_embs, corrections)
    return loss, gu, gv


def logq_corrections(popularity, batch_items):
    """Add-one-smoothed log sampling probability for the given items.

    correction[j] = log((count_j + 1) / (total_train_events + num_items)).
    """
    popularity = np.asarray(popularity, dtype=np.float64)
    total = popularity.sum()
    denom = total + len(popularity)
    return np.log((popularity[np.asarray(batch_items, dtype=np.int64)] + 1.0) / denom)


def sample_hard_negatives(item_ids, conditions, topic_members, num_items, H, rng):
    """Per row: H items sharing the row's condition topic, excluding the positive.

    topic_members is the ragged (offsets, values) topic->items table. Rows with
    the null condition, or whose topic has no other member, fall back to
    corpus-uniform draws (excluding the positive when possible). Draws are
    independent (with replacement).
    """
    offsets, values = topic_members
    item_ids = np.asarray(item_ids, dtype=np.int64)
    conditions = np.asarray(conditions, dtype=np.int64)
    topic_count = len(offsets) - 1
    out = np.empty((len(item_ids), H), dtype=np.int64)
    for r, (pos, cond) in enumerate(zip(item_ids, conditions)):
        if cond < topic_count:
            members = values[offsets[cond] : offsets[cond + 1]]
            pos_idx = np.searchsorted(members, pos)
            has_pos = pos_idx < len(members) and members[pos_idx] == pos
            n_eligible = len(members) - int(has_pos)
            if n_eligible > 0:
                draws = rng.integers(0, n_eligible, size=H)
                if has_pos:
                    draws += draws >= pos_idx
                out[r] = members[draws]
                continue
        # null condition or no other member with this topic: corpus-uniform
        if num_items > 1:
            draws = rng.integers(0, num_items - 1, size=H)
            draws += draws >= pos
            out[r] = draws
        else:
            out[r] = pos
    return out


def alignment_loss(user_embs, condition_rows, weight):
    """weight * mean squared distance between user outputs and condition rows."""
    U = np.asarray(user_embs, dtype=np.float64)
    C = np.asarray(condition_rows, dtype=np.float64)
    if weight == 0.0:
        return 0.0, np.zeros_like(U), np.zeros_like(C)
    if U.shape != C.shape:
        raise InvalidConfigError(
            f"alignment loss needs matching shapes, got {U.shape} and {C.shape}"
        )
    diff = U - C
    B = U.shape[0]
    loss = weight * float((diff * diff).sum()) / B
    grad_u = (2.0 * weight / B) * diff
    return loss, grad_u, -grad_u


# ---------------------------------------------------------------------------
# Optimizers
# ---------------------------------------------------------------------------


class _Sgd:
    def __init__(self, params, lr):
        self.lr = lr

    def step(self, params: ModelParams, grads: ModelParams):
        lr = self.lr
        for p, g in zip(params.arrays().values(), grads.arrays().values()):
            p -= (lr * g).astype(p.dtype, copy=False)


class _Adam:
    def __init__(self, params, lr):
        self.lr = lr
        self.t = 0
        self.m = params.zeros_like()
        self.v = params.zeros_like()

    def step(self, params: ModelParams, grads: ModelParams):
        self.t += 1
        b1c = 1.0 - ADAM_BETA1 ** self.t
        b2c = 1.0 - ADAM_BETA2 ** self.t
        for p, g, m, v in zip(
            params.arrays().values(),
            grads.arrays().values(),
            self.m.arrays().values(),
            self.v.arrays().values(),
        ):
            m *= ADAM_BETA1
            m += (1.0 - ADAM_BETA1) * g
            v *= ADAM_BETA2
            v += (1.0 - ADAM_BETA2) * (g * g)
            update = (self.lr / b1c) * m / (np.sqrt(v / b2c) + ADAM_EPS)
            p -= update.astype(p.dtype, copy=False)


def _make_optimizer(name, params, lr):
    return _Adam(params, lr) if name == "adam" else _Sgd(params, lr)


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


def _batch_loss_and_grads(params, uids, iids, conds, cfg, popularity, topic_members, rng_hard, grads):
    """One batch: forward both towers, assemble loss, accumulate grads. Returns loss."""
    tower_cfg = params.config
    u_out, u_cache = user_tower_forward(uids, conds, params, want_cache=True)
    v_out, v_cache = item_tower_forward(iids, params, want_cache=True)

    H = cfg.hard_negatives_per_positive
    hard_ids = None
    hard_out = None
    hard_cache = None
    if H > 0:
        hard_ids = sample_hard_negatives(iids, conds, topic_members, tower_cfg.num_items, H, rng_hard)
        hard_out, hard_cache = item_tower_forward(hard_ids.ravel(), params, want_cache=True)
        hard_out = hard_out.reshape(len(uids), H, -1)

    corr = corr_hard = None
    if cfg.logq_correction:
        corr = logq_corrections(popularity, iids)
        if H > 0:
            corr_hard = logq_corrections(popularity, hard_ids.ravel()).reshape(len(uids), H)

    loss, g_user, g_item, g_hard = softmax_loss_with_negatives(u_out, v_out, corr, hard_out, corr_hard)

    if cfg.alignment_weight > 0:
        cond_rows = params.condition_embedding[conds]
        a_loss, a_gu, a_gc = alignment_loss(u_out, cond_rows, cfg.alignment_weight)
        loss += a_loss
        g_user = g_user + a_gu
        np.add.at(grads.condition_embedding, conds, a_gc.astype(grads.condition_embedding.dtype))

    tower_backward(u_cache, g_user, params, grads)
    tower_backward(v_cache, g_item, params, grads)
    if H > 0:
        tower_backward(hard_cache, g_hard.reshape(-1, tower_cfg.output_dim), params, grads)
    return loss


def train(dataset: Dataset, tower_config: TowerConfig, train_config: TrainConfig) -> TrainReport:
    """Full training run; deterministic for a fixed (dataset, configs)."""
    tower_config.validate()
    train_config.validate(tower_config)
    t0 = time.perf_counter()

    uids_all, iids_all = dataset.train_events()
    n_train = len(uids_all)
    if train_config.batch_size > n_train:
        raise InvalidConfigError(f"batch_size {train_config.batch_size} exceeds {n_train} train events")

    params = init_params(tower_config, train_config.seed)
    opt = _make_optimizer(train_config.optimizer, params, train_config.learning_rate)
    grads = params.zeros_like()

    popularity = item_popularity(dataset) if train_config.logq_correction else None
    topic_members = None
    if train_config.hard_negatives_per_positive > 0:
        topic_members = topic_members_table(dataset.items, dataset.topic_count)
    sampler = ConditionSampler(dataset, train_config.resample_per_epoch, train_config.seed)

    epoch_losses = []
    batch_losses = []
    for epoch in range(train_config.epochs):
        conds_epoch = sampler.conditions(epoch)
        perm_rng = np.random.default_rng(np.random.SeedSequence([train_config.seed, 2, epoch]))
        hard_rng = np.random.default_rng(np.random.SeedSequence([train_config.seed, 3, epoch]))
        chunks = batch_index_chunks(n_train, train_config.batch_size, perm_rng)
        epoch_sum = 0.0
        for b, idx in enumerate(chunks):
            for arr in grads.arrays().values():
                arr.fill(0)
            loss = _batch_loss_and_grads(
                params,
                uids_all[idx],
                iids_all[idx],
                conds_epoch[idx],
                train_config,
                popularity,
                topic_members,
                hard_rng,
                grads,
            )
            if not np.isfinite(loss):
                raise TrainingDivergedError(epoch, b)
            opt.step(params, grads)
            batch_losses.append(loss)
            epoch_sum += loss
        epoch_losses.append(epoch_sum / max(len(chunks), 1))
    return TrainReport(
        epoch_losses=epoch_losses,
        batch_losses=batch_losses,
        params=params,
        wall_clock_s=time.perf_counter() - t0,
    )


def save_loss_curve(path, epoch_losses) -> None:
    from .arrayio import atomic_write_text

    lines = [f"{e}\t{loss!r}" for e, loss in enumerate(epoch_losses)]
    atomic_write_text(path, "\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# Finite-difference gradient check
# ---------------------------------------------------------------------------


def _total_loss(params, uids, iids, conds, cfg, popularity, topic_members, hard_ids):
    """Loss of one fixed batch (hard negatives pinned) for probing."""
    u_out, _ = user_tower_forward(uids, conds, params)
    v_out, _ = item_tower_forward(iids, params)
    hard_out = None
    corr = corr_hard = None
    if hard_ids is not None:
        h, _ = item_tower_forward(hard_ids.ravel(), params)
        hard_out = h.reshape(len(uids), hard_ids.shape[1], -1)
    if cfg.logq_correction:
        corr = logq_corrections(popularity, iids)
        if hard_ids is not None:
            corr_hard = logq_corrections(popularity, hard_ids.ravel()).reshape(hard_ids.shape)
    loss, _, _, _ = softmax_loss_with_negatives(u_out, v_out, corr, hard_out, corr_hard)
    if cfg.alignment_weight > 0:
        a_loss, _, _ = alignment_loss(u_out, params.condition_embedding[conds], cfg.alignment_weight)
        loss += a_loss
    return loss


def _analytic_grads(params, uids, iids, conds, cfg, popularity, topic_members, hard_ids):
    grads = params.zeros_like()

    class _Fixed:
        def integers(self, *a, **k):
            raise AssertionError("hard negatives must be pinned during grad check")

    if hard_ids is None:
        loss = _batch_loss_and_grads(params, uids, iids, conds, cfg, popularity, topic_members, _Fixed(), grads)
    else:
        # replicate _batch_loss_and_grads with pinned hard ids
        u_out, u_cache = user_tower_forward(uids, conds, params, want_cache=True)
        v_out, v_cache = item_tower_forward(iids, params, want_cache=True)
        hard_out, hard_cache = item_tower_forward(hard_ids.ravel(), params, want_cache=True)
        hard_out = hard_out.reshape(len(uids), hard_ids.shape[1], -1)
        corr = corr_hard = None
        if cfg.logq_correction:
            corr = logq_corrections(popularity, iids)
            corr_hard = logq_corrections(popularity, hard_ids.ravel()).reshape(hard_ids.shape)
        loss, g_user, g_item, g_hard = softmax_loss_with_negatives(u_out, v_out, corr, hard_out, corr_hard)
        if cfg.alignment_weight > 0:
            a_loss, a_gu, a_gc = alignment_loss(u_out, params.condition_embedding[conds], cfg.alignment_weight)
            loss += a_loss
            g_user = g_user + a_gu
            np.add.at(grads.condition_embedding, conds, a_gc)
        tower_backward(u_cache, g_user, params, grads)
        tower_backward(v_cache, g_item, params, grads)
        tower_backward(hard_cache, g_hard.reshape(-1, params.config.output_dim), params, grads)
    return loss, grads


def _relu_masks(params, uids, iids, conds, hard_ids):
    _, uc = user_tower_forward(uids, conds, params, want_cache=True)
    _, ic = item_tower_forward(iids, params, want_cache=True)
    masks = [z > 0 for z in uc.pre_activations] + [z > 0 for z in ic.pre_activations]
    if hard_ids is not None:
        _, hc = item_tower_forward(hard_ids.ravel(), params, want_cache=True)
        masks += [z > 0 for z in hc.pre_activations]
    return masks


def grad_check(tower_config: TowerConfig, train_config: TrainConfig, probe_count: int,
               seed: int = 0, eps: float = 1e-3) -> float:
    """Max relative error of analytic vs central-finite-difference gradients.

    Runs on float64 copies of the parameters; probes are drawn over MLP
    parameters and the embedding rows the batch actually touches. For relu
    towers, probes whose perturbation flips any activation sign are skipped.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, 99]))
    cfg = tower_config
    B = train_config.batch_size
    params = init_params(cfg, seed).astype(np.float64)
    # perturb initial params a little so preactivations are generic
    for a in params.arrays().values():
        a += rng.normal(0, 0.05, size=a.shape)

    uids = rng.integers(0, cfg.num_users, size=B)
    iids = rng.integers(0, cfg.num_items, size=B)
    conds = rng.integers(0, cfg.num_topics + 1, size=B) if cfg.conditional else np.zeros(B, dtype=np.int64)

    popularity = None
    if train_config.logq_correction:
        popularity = rng.integers(0, 50, size=cfg.num_items).astype(np.int64)
    hard_ids = None
    topic_members = None
    if train_config.hard_negatives_per_positive > 0:
        # synthetic topic table: every topic owns a few items
        members = [np.sort(rng.choice(cfg.num_items, size=min(4, cfg.num_items), replace=False)) for _ in range(cfg.num_topics)]
        offsets = np.zeros(cfg.num_topics + 1, dtype=np.int64)
        values = []
        for t, m in enumerate(members):
            values.extend(m.tolist())
            offsets[t + 1] = len(values)
        topic_members = (offsets, np.asarray(values, dtype=np.int64))
        hard_ids = sample_hard_negatives(
            iids, conds, topic_members, cfg.num_items, train_config.hard_negatives_per_positive, rng
        )

    args = (uids, iids, conds, train_config, popularity, topic_members, hard_ids)
    _, grads = _analytic_grads(params, *args)

    arrays = params.arrays()
    grad_arrays = grads.arrays()
    touched_rows = {
        "user_embedding": np.unique(uids),
        "item_embedding": np.unique(np.concatenate([iids, hard_ids.ravel()]) if hard_ids is not None else iids),
        "condition_embedding": np.unique(conds) if cfg.conditional else np.array([], dtype=np.int64),
    }
    candidates = []
    for name, arr in arrays.items():
        if name in touched_rows:
            for row in touched_rows[name]:
                for col in range(arr.shape[1]):
                    candidates.append((name, row * arr.shape[1] + col))
        else:
            for flat in range(arr.size):
                candidates.append((name, flat))
    order = rng.permutation(len(candidates))

    max_rel = 0.0
    probed = 0
    base_masks = _relu_masks(params, uids, iids, conds, hard_ids) if cfg.activation == "relu" else None
    for pos in order:
        if probed >= probe_count:
            break
        name, flat = candidates[pos]
        arr = arrays[name]
        orig = arr.flat[flat]
        arr.flat[flat] = orig + eps
        if cfg.activation == "relu":
            masks_hi = _relu_masks(params, uids, iids, conds, hard_ids)
        loss_hi = _total_loss(params, *args)
        arr.flat[flat] = orig - eps
        if cfg.activation == "relu":
            masks_lo = _relu_masks(params, uids, iids, conds, hard_ids)
        loss_lo = _total_loss(params, *args)
        arr.flat[flat] = orig
        if cfg.activation == "relu":
            stable = all(
                np.array_equal(a, b) and np.array_equal(a, c)
                for a, b, c in zip(base_masks, masks_hi, masks_lo)
            )
            if not stable:
                continue  # kink-adjacent probe
        numeric = (loss_hi - loss_lo) / (2 * eps)
        analytic = grad_arrays[name].flat[flat]
        rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)
        max_rel = max(max_rel, rel)
        probed += 1
    return max_rel
