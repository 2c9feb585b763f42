"""HierCas network: time/size/user embeddings, stacked temporal graph
attention layers, multi-level attention pooling, and the regression head.

All evaluation is organised around (node, time) slots. A slot's embedding at
layer l attends over the embeddings of its sampled earlier neighbors at
layer l-1, each taken at the neighbor's interaction time, so the whole
computation is causal by construction. One forward pass batches every slot
of a layer into a few matrix ops to keep the tape short.

Predictions live in log2 space: the head output estimates
log2(future_growth + 1).
"""

from __future__ import annotations

import math
import random
import zlib
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .cascade_data import size_change
from .sampler import neighbors_before, sample_uniform

__all__ = [
    "HierCasConfig",
    "ModelParams",
    "TimeEncoder",
    "SizeEncoder",
    "UserEncoder",
    "ForwardResult",
    "init_params",
    "derive_seed",
    "time_embed",
    "size_embed",
    "node_embed",
    "att_pool",
    "aggregate_levels",
    "forward_cascade",
    "predict",
    "msle_loss",
    "popularity_from_log",
]

_DIRECTIONS = ("undirected", "in", "out")


@dataclass
class HierCasConfig:
    """architecture hyperparameters plus ablation switches."""

    d_u: int = 64
    d_t: int = 64
    d_s: int = 64
    d_h: int = 64
    layers: int = 2
    heads: int = 4
    n_sample: int = 20
    size_vocab: int = 101
    user_buckets: int = 1 << 17
    no_time: bool = False
    no_size: bool = False
    mean_agg: bool = False
    no_multi: bool = False
    time_unit: float = 1.0
    neighbor_direction: str = "undirected"
    self_in_kv: bool = False
    fixed_sampling: bool = False
    # optional exact user table (user id -> row); unseen users hash into
    # user_buckets extra rows appended after the vocabulary
    user_vocab: dict | None = None

    def __post_init__(self):
        if self.layers < 0:
            raise ValueError("layers must be >= 0")
        if self.heads < 1 or self.d_h % self.heads != 0:
            raise ValueError(f"d_h ({self.d_h}) must be divisible by heads ({self.heads})")
        if self.size_vocab < 1:
            raise ValueError("size_vocab must be >= 1")
        if self.n_sample < 1:
            raise ValueError("n_sample must be >= 1")
        if self.user_buckets < 1:
            raise ValueError("user_buckets must be >= 1")
        if self.time_unit <= 0:
            raise ValueError("time_unit must be positive")
        if self.neighbor_direction not in _DIRECTIONS:
            raise ValueError(f"neighbor_direction must be one of {_DIRECTIONS}")

    def user_rows(self):
        base = len(self.user_vocab) if self.user_vocab else 0
        return base + self.user_buckets

    def head_input_dim(self):
        return self.d_h if self.layers >= 1 else self.d_u

    def to_json_dict(self):
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        return d

    @classmethod
    def from_json_dict(cls, d):
        return cls(**d)


class UserEncoder:
    """Stable user-id -> table-row mapping (vocabulary plus hash buckets)."""

    def __init__(self, buckets, vocab=None):
        self.buckets = buckets
        self.vocab = vocab or None
        self._offset = len(vocab) if vocab else 0

    def bucket_of(self, user):
        if self.vocab is not None:
            row = self.vocab.get(user)
            if row is not None:
                return row
        return self._offset + zlib.crc32(user.encode("utf-8")) % self.buckets


@dataclass
class TimeEncoder:
    """Cosine interval features with trainable frequencies and amplitudes."""

    omega: T.Tensor  # [1, d_t]
    alpha: T.Tensor  # [1, d_t]


@dataclass
class SizeEncoder:
    """Lookup table over clamped edge-count changes."""

    table: T.Tensor  # [size_vocab, d_s]


class ModelParams:
    """Named parameter registry. Insertion order is the canonical order for
    optimizer updates and checkpoints."""

    def __init__(self, cfg, tensors, no_decay):
        self.cfg = cfg
        self.tensors = tensors
        self.no_decay = frozenset(no_decay)

    def names(self):
        return list(self.tensors)

    def __getitem__(self, name):
        return self.tensors[name]

    def zero_grads(self):
        for t in self.tensors.values():
            t.grad = None

    def copy_arrays(self):
        return {name: t.data.copy() for name, t in self.tensors.items()}

    def load_arrays(self, arrays):
        missing = set(self.tensors) - set(arrays)
        extra = set(arrays) - set(self.tensors)
        if missing or extra:
            raise ValueError(
                f"parameter name mismatch: missing={sorted(missing)} extra={sorted(extra)}"
            )
        for name, t in self.tensors.items():
            arr = np.asarray(arrays[name], dtype=np.float64)
            if arr.shape != t.data.shape:
                raise ValueError(
                    f"parameter {name!r}: shape {arr.shape} != expected {t.data.shape}"
                )
            t.data = arr.copy()

    def user_encoder(self):
        return UserEncoder(self.cfg.user_buckets, self.cfg.user_vocab)

    def time_encoder(self):
        return TimeEncoder(self.tensors["time.omega"], self.tensors["time.alpha"])

    def size_encoder(self):
        return SizeEncoder(self.tensors["size.table"])


def init_params(cfg, seed=0):
    """Fresh parameter registry.

    Projections, feed-forward weights and tables start uniform in
    +-1/sqrt(fan_in); biases start at zero; time frequencies are log-spaced
    over [1e-5, 1] per time unit and amplitudes start at one.
    """
    rng = np.random.default_rng(seed)

    def uniform(shape, fan_in):
        bound = 1.0 / math.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=shape)

    def p(arr):
        return T.Tensor(arr, requires_grad=True)

    tensors = {}
    tensors["user.table"] = p(uniform((cfg.user_rows(), cfg.d_u), cfg.d_u))
    tensors["time.omega"] = p(np.logspace(-5.0, 0.0, cfg.d_t).reshape(1, cfg.d_t))
    tensors["time.alpha"] = p(np.ones((1, cfg.d_t)))
    tensors["size.table"] = p(uniform((cfg.size_vocab, cfg.d_s), cfg.d_s))

    for l in range(1, cfg.layers + 1):
        d_in = (cfg.d_u if l == 1 else cfg.d_h) + cfg.d_t + cfg.d_s
        d_head = cfg.d_h // cfg.heads
        for h in range(cfg.heads):
            pre = f"layer{l}.head{h}."
            tensors[pre + "Wq"] = p(uniform((d_in, d_head), d_in))
            tensors[pre + "Wk"] = p(uniform((d_in, d_head), d_in))
            tensors[pre + "Wv"] = p(uniform((d_in, d_head), d_in))
        pre = f"layer{l}.ffn."
        tensors[pre + "W0"] = p(uniform((cfg.d_h + cfg.d_u, cfg.d_h), cfg.d_h + cfg.d_u))
        tensors[pre + "b0"] = p(np.zeros((1, cfg.d_h)))
        tensors[pre + "W1"] = p(uniform((cfg.d_h, cfg.d_h), cfg.d_h))
        tensors[pre + "b1"] = p(np.zeros((1, cfg.d_h)))

    pool_levels = range(1, cfg.layers + 1) if cfg.layers >= 1 else [0]
    for l in pool_levels:
        d_in = cfg.d_h if l >= 1 else cfg.d_u
        pre = f"pool{l}."
        tensors[pre + "W0"] = p(uniform((d_in, cfg.d_h), d_in))
        tensors[pre + "b0"] = p(np.zeros((1, cfg.d_h)))
        tensors[pre + "W1"] = p(uniform((cfg.d_h, 1), cfg.d_h))
        tensors[pre + "b1"] = p(np.zeros((1, 1)))

    if cfg.layers >= 1:
        tensors["levels.omega"] = p(np.full((cfg.layers, 1), 1.0 / cfg.layers))

    d_head_in = cfg.head_input_dim()
    tensors["head.W"] = p(uniform((d_head_in, 1), d_head_in))
    tensors["head.b"] = p(np.zeros((1, 1)))

    no_decay = {"user.table", "size.table", "time.omega", "time.alpha"}
    return ModelParams(cfg, tensors, no_decay)


# ---------------------------------------------------------------------------
# embeddings


def time_embed(dt, encoder, no_time=False):
    """sqrt(1/d_t) * [alpha_k * cos(omega_k * dt)] for a scalar interval."""
    if dt < 0:
        raise ValueError(f"time_embed: negative interval {dt}")
    d_t = encoder.omega.shape[1]
    if no_time:
        return T.constant(np.zeros((1, d_t)))
    ang = T.scale(encoder.omega, float(dt))
    return T.scale(T.mul_rowvec(T.cos(ang), encoder.alpha), math.sqrt(1.0 / d_t))


def size_embed(delta_edges, encoder, no_size=False):
    """Row of the size table for a clamped edge-count change."""
    if delta_edges < 0:
        raise ValueError(f"size_embed: negative size change {delta_edges}")
    d_s = encoder.table.shape[1]
    if no_size:
        return T.constant(np.zeros((1, d_s)))
    row = min(int(delta_edges), encoder.table.shape[0] - 1)
    return T.gather_rows(encoder.table, [row])


# ---------------------------------------------------------------------------
# slot bookkeeping


def derive_seed(*vals):
    """Mix integers into a stable 64-bit seed (splitmix-style)."""
    h = 0x9E3779B97F4A7C15
    mask = (1 << 64) - 1
    for v in vals:
        h ^= int(v) & mask
        h = (h * 0xBF58476D1CE4E5B9) & mask
        h ^= h >> 27
        h = (h * 0x94D049BB133111EB) & mask
        h ^= h >> 31
    return h


class _SlotIndex:
    """Rows for the (node, time) evaluation slots of one layer."""

    __slots__ = ("rows", "slots")

    def __init__(self):
        self.rows = {}
        self.slots = []

    def add(self, slot):
        row = self.rows.get(slot)
        if row is None:
            row = len(self.slots)
            self.rows[slot] = row
            self.slots.append(slot)
        return row


def _sample_slot(graph, cfg, seed, tag, layer, v, t):
    """Kept (node, time) pairs for one query slot, time-ordered.

    Empty neighborhoods fall back to a self slot with zero interval so the
    key/value set is never empty; with self_in_kv the slot's own row always
    leads the list.
    """
    nb = neighbors_before(graph, v, t, cfg.neighbor_direction)
    if len(nb) > cfg.n_sample:
        rng = random.Random(derive_seed(seed, tag, layer, v, t))
        kept = sample_uniform(v, t, nb, cfg.n_sample, rng).neighbors
    else:
        kept = nb
    if cfg.self_in_kv:
        return [(v, t)] + kept
    if not kept:
        return [(v, t)]
    return kept


def _forward_layers(graph, params, cfg, seed, tag, required, trace=None):
    """Compute slot embedding matrices for every layer up to max(required).

    `required` maps layer -> (node, time) slots whose embeddings someone
    needs; lower layers automatically pick up whatever the attention of the
    layer above consumes.
    """
    top = max(required)
    idx = {l: _SlotIndex() for l in range(top + 1)}
    kept = {}
    for l in range(top, 0, -1):
        for s in required.get(l, ()):
            idx[l].add(s)
        kept_l = []
        for (v, t) in idx[l].slots:
            ks = _sample_slot(graph, cfg, seed, tag, l, v, t)
            kept_l.append(ks)
            idx[l - 1].add((v, t))
            for slot in ks:
                idx[l - 1].add(slot)
        kept[l] = kept_l
    for s in required.get(0, ()):
        idx[0].add(s)

    enc = params.user_encoder()
    users = graph.users
    H = {
        0: T.gather_rows(
            params.tensors["user.table"],
            [enc.bucket_of(users[v]) for (v, _) in idx[0].slots],
        )
    }
    for l in range(1, top + 1):
        H[l] = _attention_layer(
            graph, params, cfg, l, idx[l], kept[l], idx[l - 1], H[l - 1], trace
        )
    return idx, H


def _attention_layer(graph, params, cfg, l, idx_q, kept_lists, idx_prev, h_prev, trace):
    slots = idx_q.slots
    S = len(slots)
    npad = max(len(k) for k in kept_lists)
    prev_rows = idx_prev.rows

    self_rows = np.empty(S, dtype=np.int64)
    nbr_rows = np.zeros((S, npad), dtype=np.int64)
    dts = np.zeros((S, npad))
    dsz = np.zeros((S, npad), dtype=np.int64)
    mask = np.ones((S, npad), dtype=bool)
    for r, (slot, ks) in enumerate(zip(slots, kept_lists)):
        v, t = slot
        self_rows[r] = prev_rows[slot]
        for j, (u, tu) in enumerate(ks):
            nbr_rows[r, j] = prev_rows[(u, tu)]
            dts[r, j] = (t - tu) / cfg.time_unit
            dsz[r, j] = min(size_change(graph, t, tu), cfg.size_vocab - 1)
            mask[r, j] = False
    F = S * npad
    tensors = params.tensors

    # neighbor rows: [prev-layer feature || time embedding || size embedding]
    h_n = T.gather_rows(h_prev, nbr_rows.reshape(-1))
    if cfg.no_time:
        phi = T.constant(np.zeros((F, cfg.d_t)))
        phi0 = T.constant(np.zeros((S, cfg.d_t)))
    else:
        ang = T.matmul(T.constant(dts.reshape(F, 1)), tensors["time.omega"])
        phi = T.scale(
            T.mul_rowvec(T.cos(ang), tensors["time.alpha"]), math.sqrt(1.0 / cfg.d_t)
        )
        # zero interval: cos term is 1, so the row is sqrt(1/d_t) * alpha
        phi0_row = T.scale(tensors["time.alpha"], math.sqrt(1.0 / cfg.d_t))
        phi0 = T.gather_rows(phi0_row, [0] * S)
    if cfg.no_size:
        sz = T.constant(np.zeros((F, cfg.d_s)))
        sz0 = T.constant(np.zeros((S, cfg.d_s)))
    else:
        sz = T.gather_rows(tensors["size.table"], dsz.reshape(-1))
        sz0 = T.gather_rows(tensors["size.table"], [0] * S)
    z_n = T.concat_lastdim([h_n, phi, sz])
    z_0 = T.concat_lastdim([T.gather_rows(h_prev, self_rows), phi0, sz0])

    d_head = cfg.d_h // cfg.heads
    rep = np.repeat(np.arange(S), npad)
    if cfg.mean_agg:
        counts = (~mask).sum(axis=1, keepdims=True)
        w_uniform = np.where(mask, 0.0, 1.0) / counts
        flat_uniform = T.constant(w_uniform.reshape(F, 1))
    head_outs = []
    for h in range(cfg.heads):
        pre = f"layer{l}.head{h}."
        v_rows = T.matmul(z_n, tensors[pre + "Wv"])
        if cfg.mean_agg:
            w_arr = w_uniform
            out_h = T.sum_row_blocks(T.mul_colvec(v_rows, flat_uniform), npad)
        else:
            q = T.matmul(z_0, tensors[pre + "Wq"])
            k_rows = T.matmul(z_n, tensors[pre + "Wk"])
            scores = T.scale(
                T.sum_lastdim(T.mul(T.gather_rows(q, rep), k_rows)),
                1.0 / math.sqrt(d_head),
            )
            w = T.softmax_row(T.reshape(scores, (S, npad)), mask)
            w_arr = w.data
            out_h = T.sum_row_blocks(T.mul_colvec(v_rows, T.reshape(w, (F, 1))), npad)
        head_outs.append(out_h)
        if trace is not None:
            trace.setdefault("attn", {}).setdefault(l, []).append(
                {
                    "slots": list(slots),
                    "kept": [list(k) for k in kept_lists],
                    "weights": np.array(w_arr, copy=True),
                    "mask": mask.copy(),
                    "values": v_rows.data.reshape(S, npad, d_head).copy(),
                    "out": out_h.data.copy(),
                }
            )

    h_cat = head_outs[0] if cfg.heads == 1 else T.concat_lastdim(head_outs)
    enc = params.user_encoder()
    x_u = T.gather_rows(
        tensors["user.table"], [enc.bucket_of(graph.users[v]) for (v, _) in slots]
    )
    pre = f"layer{l}.ffn."
    hidden = T.relu(
        T.add_rowvec(
            T.matmul(T.concat_lastdim([h_cat, x_u]), tensors[pre + "W0"]),
            tensors[pre + "b0"],
        )
    )
    return T.add_rowvec(T.matmul(hidden, tensors[pre + "W1"]), tensors[pre + "b1"])


# ---------------------------------------------------------------------------
# public model surface


def node_embed(graph, v, t, layer, params, cfg, seed=0, tag=-1):
    """Embedding of node v evaluated at time t from the given layer.

    Layer 0 is the raw user embedding; higher layers run the recursive
    attention stack over sampled temporal neighborhoods.
    """
    if not 0 <= layer <= cfg.layers:
        raise ValueError(f"layer {layer} outside [0, {cfg.layers}]")
    if not 0 <= v < graph.n_nodes:
        raise ValueError(f"node {v} not in graph")
    if graph.observation_time is not None and t > graph.observation_time:
        raise ValueError(
            f"evaluation time {t} exceeds observation time {graph.observation_time}"
        )
    if layer == 0:
        enc = params.user_encoder()
        return T.gather_rows(
            params.tensors["user.table"], [enc.bucket_of(graph.users[v])]
        )
    idx, H = _forward_layers(graph, params, cfg, seed, tag, {layer: [(v, t)]})
    return T.gather_rows(H[layer], [idx[layer].rows[(v, t)]])


def att_pool(node_feats, level, params, return_weights=False):
    """Attention-weighted sum of node features for one pooling level.

    Scores come from a two-layer MLP; weights are the softmax over nodes.
    """
    if isinstance(node_feats, (list, tuple)):
        if not node_feats:
            raise ValueError("att_pool: empty node set")
        feats = node_feats[0] if len(node_feats) == 1 else T.concat_rows(list(node_feats))
    else:
        feats = node_feats
        if feats.shape[0] == 0:
            raise ValueError("att_pool: empty node set")
    tensors = params.tensors
    pre = f"pool{level}."
    hidden = T.relu(T.add_rowvec(T.matmul(feats, tensors[pre + "W0"]), tensors[pre + "b0"]))
    scores = T.add_rowvec(T.matmul(hidden, tensors[pre + "W1"]), tensors[pre + "b1"])
    weights = T.softmax_row(T.transpose(scores))  # [1, N]
    pooled = T.matmul(weights, feats)
    if return_weights:
        return pooled, weights.data.reshape(-1).copy()
    return pooled


def aggregate_levels(level_feats, params, no_multi=False):
    """Trainable weighted sum of per-level graph features (or just the last
    level when multi-level aggregation is disabled)."""
    if not level_feats:
        raise ValueError("aggregate_levels: empty level list")
    if no_multi:
        return level_feats[-1]
    omega = params.tensors["levels.omega"]
    if omega.shape[0] != len(level_feats):
        raise ValueError(
            f"aggregate_levels: {len(level_feats)} levels but {omega.shape[0]} weights"
        )
    acc = None
    for i, feat in enumerate(level_feats):
        term = T.mul(feat, T.gather_rows(omega, [i]))
        acc = term if acc is None else T.add(acc, term)
    return acc


@dataclass
class ForwardResult:
    y: T.Tensor            # [1,1] log2-scale growth prediction
    pool_weights: list     # per pooling level, ndarray over nodes
    trace: dict | None = None


def forward_cascade(graph, params, cfg, seed=0, tag=-1, trace=False):
    """Full differentiable forward pass over one observed cascade."""
    tr = {} if trace else None
    pool_slots = [(i, graph.join_times[i]) for i in range(graph.n_nodes)]
    if cfg.layers == 0:
        idx, H = _forward_layers(graph, params, cfg, seed, tag, {0: pool_slots}, tr)
        rows = [idx[0].rows[s] for s in pool_slots]
        feats = T.gather_rows(H[0], rows)
        pooled, w = att_pool(feats, 0, params, return_weights=True)
        weights = [w]
        level_values = [feats.data.copy()]
        h_g = pooled
    else:
        required = {l: list(pool_slots) for l in range(1, cfg.layers + 1)}
        idx, H = _forward_layers(graph, params, cfg, seed, tag, required, tr)
        levels = []
        weights = []
        level_values = []
        for l in range(1, cfg.layers + 1):
            rows = [idx[l].rows[s] for s in pool_slots]
            feats = T.gather_rows(H[l], rows)
            pooled, w = att_pool(feats, l, params, return_weights=True)
            levels.append(pooled)
            weights.append(w)
            level_values.append(feats.data.copy())
        h_g = aggregate_levels(levels, params, cfg.no_multi)
    y = T.add(T.matmul(h_g, params.tensors["head.W"]), params.tensors["head.b"])
    if tr is not None:
        tr["pool_feats"] = level_values
        tr["pool_weights"] = [w.copy() for w in weights]
    return ForwardResult(y=y, pool_weights=weights, trace=tr)


def predict(graph, params, cfg, seed=0, tag=-1):
    """Log2-scale growth prediction for one cascade (no gradient tracking)."""
    with T.no_grad():
        return forward_cascade(graph, params, cfg, seed=seed, tag=tag).y.item()


def popularity_from_log(y_log):
    """Convert a log2-scale prediction back to a count, floored at zero."""
    return max(0.0, 2.0 ** y_log - 1.0)


def msle_loss(pred_log, true_deltap):
    """Mean squared error between predictions and log2(growth + 1) targets."""
    if isinstance(pred_log, (list, tuple)):
        if not pred_log:
            raise ValueError("msle_loss: empty batch")
        preds = pred_log[0] if len(pred_log) == 1 else T.concat_rows(list(pred_log))
    else:
        preds = pred_log
    deltas = list(true_deltap)
    if any(d < 0 for d in deltas):
        raise ValueError("msle_loss: growth labels must be >= 0")
    targets = np.array([[math.log2(d + 1.0)] for d in deltas])
    if targets.shape != preds.data.shape:
        raise ValueError(
            f"msle_loss: {preds.data.shape} predictions vs {targets.shape} labels"
        )
    return T.mean(T.square(T.sub(preds, T.constant(targets))))
