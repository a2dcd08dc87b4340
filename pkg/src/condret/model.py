"""Two-tower network: embedding layers plus MLP crossing layers per tower.

The user tower optionally concatenates a condition embedding to the user
embedding before the crossing layers (the conditional variant); the item
tower is a plain embed-then-MLP stack. Similarity is the raw dot product,
unnormalized and untempered. Forward passes cache activations so gradients
can be computed analytically without a framework.
"""

from dataclasses import dataclass

import numpy as np

from .arrayio import load_container, save_container
from .errors import CacheMismatchError, DimensionError, InvalidConfigError

ACTIVATIONS = ("relu", "tanh")


@dataclass(frozen=True)
class TowerConfig:
    num_users: int
    num_items: int
    num_topics: int
    embed_dim_user: int = 32
    embed_dim_item: int = 32
    embed_dim_condition: int = 16
    hidden_sizes: "tuple[int, ...]" = (64,)
    output_dim: int = 32
    activation: str = "relu"
    conditional: bool = True

    def validate(self):
        if min(self.num_users, self.num_items, self.num_topics) < 1:
            raise InvalidConfigError("vocabulary sizes must be positive")
        dims = (self.embed_dim_user, self.embed_dim_item, self.embed_dim_condition, self.output_dim)
        if min(dims) < 1 or any(h < 1 for h in self.hidden_sizes):
            raise InvalidConfigError("all layer dimensions must be positive")
        if self.activation not in ACTIVATIONS:
            raise InvalidConfigError(f"activation must be one of {ACTIVATIONS}")

    @property
    def user_input_dim(self):
        return self.embed_dim_user + (self.embed_dim_condition if self.conditional else 0)

    def layer_dims(self, tower: str):
        """(in, out) per MLP layer, hidden layers then the linear output layer."""
        start = self.user_input_dim if tower == "user" else self.embed_dim_item
        dims = [start, *self.hidden_sizes, self.output_dim]
        return list(zip(dims[:-1], dims[1:]))

    def to_dict(self):
        d = self.__dict__.copy()
        d["hidden_sizes"] = list(self.hidden_sizes)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["hidden_sizes"] = tuple(d.get("hidden_sizes", ()))
        return cls(**d)


@dataclass
class ModelParams:
    config: TowerConfig
    user_embedding: np.ndarray      # U x embed_dim_user
    item_embedding: np.ndarray      # I x embed_dim_item
    condition_embedding: np.ndarray  # (T+1) x embed_dim_condition; 0 rows when not conditional
    user_weights: "list[np.ndarray]"
    user_biases: "list[np.ndarray]"
    item_weights: "list[np.ndarray]"
    item_biases: "list[np.ndarray]"

    def arrays(self):
        """Named arrays in a fixed, serialization-stable order."""
        out = {
            "user_embedding": self.user_embedding,
            "item_embedding": self.item_embedding,
            "condition_embedding": self.condition_embedding,
        }
        for i, (w, b) in enumerate(zip(self.user_weights, self.user_biases)):
            out[f"user_w{i}"] = w
            out[f"user_b{i}"] = b
        for i, (w, b) in enumerate(zip(self.item_weights, self.item_biases)):
            out[f"item_w{i}"] = w
            out[f"item_b{i}"] = b
        return out

    def param_count(self) -> int:
        return sum(a.size for a in self.arrays().values())

    def astype(self, dtype) -> "ModelParams":
        return ModelParams(
            config=self.config,
            user_embedding=self.user_embedding.astype(dtype),
            item_embedding=self.item_embedding.astype(dtype),
            condition_embedding=self.condition_embedding.astype(dtype),
            user_weights=[w.astype(dtype) for w in self.user_weights],
            user_biases=[b.astype(dtype) for b in self.user_biases],
            item_weights=[w.astype(dtype) for w in self.item_weights],
            item_biases=[b.astype(dtype) for b in self.item_biases],
        )

    def copy(self) -> "ModelParams":
        return self.astype(self.user_embedding.dtype)

    def zeros_like(self) -> "ModelParams":
        out = self.copy()
        for a in out.arrays().values():
            a.fill(0)
        return out

    def allclose(self, other, rtol=0.0, atol=0.0) -> bool:
        mine, theirs = self.arrays(), other.arrays()
        return mine.keys() == theirs.keys() and all(
            np.allclose(mine[k], theirs[k], rtol=rtol, atol=atol) for k in mine
        )


def init_params(config: TowerConfig, seed: int, dtype=np.float32) -> ModelParams:
    """Embeddings uniform in [-0.05, 0.05]; MLP weights uniform +-1/sqrt(fan_in)."""
    config.validate()
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0]))

    def table(rows, cols):
        return rng.uniform(-0.05, 0.05, size=(rows, cols)).astype(dtype)

    cond_rows = config.num_topics + 1 if config.conditional else 0
    user_embedding = table(config.num_users, config.embed_dim_user)
    item_embedding = table(config.num_items, config.embed_dim_item)
    condition_embedding = table(cond_rows, config.embed_dim_condition)

    def mlp(tower):
        ws, bs = [], []
        for fan_in, fan_out in config.layer_dims(tower):
            bound = 1.0 / np.sqrt(fan_in)
            ws.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(dtype))
            bs.append(np.zeros(fan_out, dtype=dtype))
        return ws, bs

    uw, ub = mlp("user")
    iw, ib = mlp("item")
    return ModelParams(
        config=config,
        user_embedding=user_embedding,
        item_embedding=item_embedding,
        condition_embedding=condition_embedding,
        user_weights=uw,
        user_biases=ub,
        item_weights=iw,
        item_biases=ib,
    )


@dataclass
class ForwardCache:
    tower: str
    ids: np.ndarray
    conditions: "np.ndarray | None"
    layer_inputs: "list[np.ndarray]"   # input to each MLP layer (layer_inputs[0] = embed concat)
    pre_activations: "list[np.ndarray]"  # hidden-layer pre-activations
    output_dim: int


def _activate(z, activation):
    if activation == "relu":
        return np.maximum(z, 0)
    return np.tanh(z)


def _activation_grad(z, post, activation):
    if activation == "relu":
        return (z > 0).astype(z.dtype)
    return 1.0 - post * post


def _mlp_forward(x, weights, biases, n_hidden, activation):
    layer_inputs = [x]
    pre_acts = []
    h = x
    for li, (w, b) in enumerate(zip(weights, biases)):
        z = h @ w + b
        if li < n_hidden:
            pre_acts.append(z)
            h = _activate(z, activation)
            layer_inputs.append(h)
        else:
            h = z
    return h, layer_inputs, pre_acts


def user_tower_forward(user_ids, conditions, params: ModelParams, want_cache=False):
    """Batch user-tower forward; conditions are ignored when not conditional.

    Accepts a scalar id or an int array; returns (B, d) outputs (or (d,) for
    a scalar id) plus a cache for the backward pass when requested.
    """
    cfg = params.config
    scalar = np.isscalar(user_ids)
    ids = np.atleast_1d(np.asarray(user_ids, dtype=np.int64))
    if ids.size and (ids.min() < 0 or ids.max() >= cfg.num_users):
        raise IndexError(f"user id out of range [0, {cfg.num_users})")
    if cfg.conditional:
        conds = np.atleast_1d(np.asarray(conditions, dtype=np.int64))
        if len(conds) != len(ids):
            raise DimensionError("conditions must align with user ids")
        if conds.size and (conds.min() < 0 or conds.max() > cfg.num_topics):
            raise IndexError(f"condition out of range [0, {cfg.num_topics}]")
        x = np.concatenate([params.user_embedding[ids], params.condition_embedding[conds]], axis=1)
    else:
        conds = None
        x = params.user_embedding[ids]
    out, layer_inputs, pre_acts = _mlp_forward(
        x, params.user_weights, params.user_biases, len(cfg.hidden_sizes), cfg.activation
    )
    cache = None
    if want_cache:
        cache = ForwardCache("user", ids, conds, layer_inputs, pre_acts, cfg.output_dim)
    return (out[0] if scalar else out), cache


def item_tower_forward(item_ids, params: ModelParams, want_cache=False):
    cfg = params.config
    scalar = np.isscalar(item_ids)
    ids = np.atleast_1d(np.asarray(item_ids, dtype=np.int64))
    if ids.size and (ids.min() < 0 or ids.max() >= cfg.num_items):
        raise IndexError(f"item id out of range [0, {cfg.num_items})")
    x = params.item_embedding[ids]
    out, layer_inputs, pre_acts = _mlp_forward(
        x, params.item_weights, params.item_biases, len(cfg.hidden_sizes), cfg.activation
    )
    cache = None
    if want_cache:
        cache = ForwardCache("item", ids, None, layer_inputs, pre_acts, cfg.output_dim)
    return (out[0] if scalar else out), cache


def tower_backward(cache: ForwardCache, upstream_grad, params: ModelParams, grads: ModelParams = None) -> ModelParams:
    """Analytic gradients of (upstream_grad . tower_output) w.r.t. parameters.

    Returns a ModelParams-shaped structure; rows of embedding tables not
    referenced by the cached batch stay exactly zero. Pass `grads` to
    accumulate into an existing structure.
    """
    cfg = params.config
    upstream = np.atleast_2d(np.asarray(upstream_grad))
    if cache.tower == "user":
        weights, biases = params.user_weights, params.user_biases
    else:
        weights, biases = params.item_weights, params.item_biases
    if len(cache.layer_inputs) != len(weights):
        raise CacheMismatchError(
            f"cache has {len(cache.layer_inputs)} layer inputs but params have {len(weights)} layers"
        )
    if upstream.shape != (len(cache.ids), cache.output_dim):
        raise CacheMismatchError(
            f"upstream grad shape {upstream.shape} does not match cached batch "
            f"({len(cache.ids)}, {cache.output_dim})"
        )
    if grads is None:
        grads = params.zeros_like()
    gw = grads.user_weights if cache.tower == "user" else grads.item_weights
    gb = grads.user_biases if cache.tower == "user" else grads.item_biases

    delta = upstream.astype(weights[-1].dtype, copy=False)
    n_hidden = len(cfg.hidden_sizes)
    for li in range(len(weights) - 1, -1, -1):
        h_in = cache.layer_inputs[li]
        gw[li] += h_in.T @ delta
        gb[li] += delta.sum(axis=0)
        delta = delta @ weights[li].T
        if li > 0:
            z = cache.pre_activations[li - 1]
            post = cache.layer_inputs[li]
            delta = delta * _activation_grad(z, post, cfg.activation)

    if cache.tower == "user":
        if cfg.conditional:
            du = delta[:, : cfg.embed_dim_user]
            dc = delta[:, cfg.embed_dim_user :]
            np.add.at(grads.user_embedding, cache.ids, du)
            np.add.at(grads.condition_embedding, cache.conditions, dc)
        else:
            np.add.at(grads.user_embedding, cache.ids, delta)
    else:
        np.add.at(grads.item_embedding, cache.ids, delta)
    return grads


def score(u, v) -> np.float32:
    """Dot-product similarity of two embedding vectors (float32 result)."""
    u = np.asarray(u)
    v = np.asarray(v)
    if u.shape != v.shape or u.ndim != 1:
        raise DimensionError(f"score needs equal-length vectors, got {u.shape} and {v.shape}")
    return np.float32(np.dot(u.astype(np.float64), v.astype(np.float64)))


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(path, params: ModelParams, seed: int) -> None:
    meta = {
        "kind": "checkpoint",
        "config": params.config.to_dict(),
        "seed": int(seed),
        "mlp_layers": len(params.user_weights),
    }
    save_container(path, meta, params.arrays())


def load_checkpoint(path):
    """Returns (params, seed); file contents are trusted to be self-consistent."""
    meta, arrays = load_container(path)
    if meta.get("kind") != "checkpoint":
        raise InvalidConfigError(f"{path} is not a checkpoint file")
    cfg = TowerConfig.from_dict(meta["config"])
    n = meta["mlp_layers"]
    params = ModelParams(
        config=cfg,
        user_embedding=arrays["user_embedding"],
        item_embedding=arrays["item_embedding"],
        condition_embedding=arrays["condition_embedding"],
        user_weights=[arrays[f"user_w{i}"] for i in range(n)],
        user_biases=[arrays[f"user_b{i}"] for i in range(n)],
        item_weights=[arrays[f"item_w{i}"] for i in range(n)],
        item_biases=[arrays[f"item_b{i}"] for i in range(n)],
    )
    return params, meta["seed"]
