"""Pre-ranking scorer: field embeddings + dense features -> ReLU MLP -> raw score.

The network emits an unbounded score ``s`` and ``p = sigmoid(s)``. The
forgetting penalty consumes ``p``; the pairwise loss is a plain function of
whatever scores it is handed (the trainer passes ``p`` by default, see
``TrainConfig.ltr_input``).

Flattened gradient / parameter order (stable, used by checkpoints and the
Pareto solver): embedding tables by field index (row-major), then each
hidden layer's weight then bias, then the head weight and bias.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

CHECKPOINT_FORMAT = "pmors-ranker"
CHECKPOINT_VERSION = 1


class RankerInputError(ValueError):
    pass


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


@dataclass(frozen=True)
class FeatureRecord:
    """One (user, candidate) row: categorical ids per field plus dense values."""

    user_id: int
    item_id: int
    categorical: Tuple[int, ...]
    dense: Tuple[float, ...] = ()


@dataclass(frozen=True)
class ScoredPair:
    s: float
    p: float


@dataclass
class RankerConfig:
    field_names: Tuple[str, ...]
    vocab_sizes: Tuple[int, ...]
    dense_dim: int = 0
    embedding_dim: int = 8
    hidden: Tuple[int, ...] = (32, 16, 8)

    def __post_init__(self):
        self.field_names = tuple(self.field_names)
        self.vocab_sizes = tuple(int(v) for v in self.vocab_sizes)
        self.hidden = tuple(int(h) for h in self.hidden)
        if len(self.field_names) != len(self.vocab_sizes):
            raise RankerInputError("one vocabulary size per categorical field")
        if any(v < 1 for v in self.vocab_sizes) or self.embedding_dim < 0 or self.dense_dim < 0:
            raise RankerInputError("invalid ranker sizes")

    @property
    def input_dim(self) -> int:
        return len(self.field_names) * self.embedding_dim + self.dense_dim

    def to_dict(self) -> dict:
        return {
            "field_names": list(self.field_names), "vocab_sizes": list(self.vocab_sizes),
            "dense_dim": self.dense_dim, "embedding_dim": self.embedding_dim,
            "hidden": list(self.hidden),
        }


def param_shapes(cfg: RankerConfig) -> List[Tuple[str, Tuple[int, ...]]]:
    shapes = [(f"emb.{name}", (v, cfg.embedding_dim))
              for name, v in zip(cfg.field_names, cfg.vocab_sizes)]
    fan_in = cfg.input_dim
    for k, h in enumerate(cfg.hidden, start=1):
        shapes += [(f"layer{k}.weight", (fan_in, h)), (f"layer{k}.bias", (h,))]
        fan_in = h
    shapes += [("head.weight", (fan_in, 1)), ("head.bias", (1,))]
    return shapes


class RankerParams:
    """Named parameter arrays backed by one flat float64 vector."""

    def __init__(self, cfg: RankerConfig, flat: Optional[np.ndarray] = None):
        self.cfg = cfg
        self.shapes = param_shapes(cfg)
        self.size = sum(int(np.prod(s)) for _, s in self.shapes)
        if flat is None:
            flat = np.zeros(self.size)
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (self.size,):
            raise RankerInputError(f"flat parameter vector has shape {flat.shape}, expected ({self.size},)")
        self.flat = flat
        self.arrays: Dict[str, np.ndarray] = {}
        off = 0
        for name, shape in self.shapes:
            n = int(np.prod(shape))
            self.arrays[name] = self.flat[off:off + n].reshape(shape)
            off += n

    def __getitem__(self, name: str) -> np.ndarray:
        return self.arrays[name]

    def copy(self) -> "RankerParams":
        return RankerParams(self.cfg, self.flat.copy())

    @classmethod
    def init(cls, cfg: RankerConfig, seed: int = 0) -> "RankerParams":
        """Seeded uniform(-r, r) with r = 1/sqrt(fan_in); embeddings use fan_in = embedding_dim."""
        rng = np.random.default_rng(seed)
        params = cls(cfg)
        fan_in = cfg.input_dim
        for name, shape in params.shapes:
            if name.startswith("emb."):
                r = 1.0 / np.sqrt(max(cfg.embedding_dim, 1))
            elif name.endswith(".weight"):
                fan_in = shape[0]
                r = 1.0 / np.sqrt(fan_in)
            else:
                r = 1.0 / np.sqrt(fan_in)
            params.arrays[name][...] = rng.uniform(-r, r, size=shape)
        return params


@dataclass
class ForwardCache:
    cat: np.ndarray
    x0: np.ndarray
    activations: List[np.ndarray]
    s: np.ndarray
    p: np.ndarray


def _check_batch(cfg: RankerConfig, cat, dense):
    cat = np.asarray(cat, dtype=np.int64)
    if cat.ndim != 2 or cat.shape[1] != len(cfg.field_names):
        raise RankerInputError(f"categorical ids have shape {cat.shape}, expected (B, {len(cfg.field_names)})")
    if cat.size:
        vocab = np.asarray(cfg.vocab_sizes)
        if np.any(cat < 0) or np.any(cat >= vocab):
            bad = [cfg.field_names[j] for j in range(cat.shape[1])
                   if cat[:, j].min() < 0 or cat[:, j].max() >= vocab[j]]
            raise RankerInputError(f"ids out of vocabulary for fields {bad}")
    if dense is None:
        dense = np.zeros((cat.shape[0], 0))
    dense = np.asarray(dense, dtype=np.float64).reshape(cat.shape[0], -1)
    if dense.shape[1] != cfg.dense_dim:
        raise RankerInputError(f"dense features have width {dense.shape[1]}, expected {cfg.dense_dim}")
    return cat, dense


def forward(params: RankerParams, cat, dense=None) -> ForwardCache:
    cfg = params.cfg
    cat, dense = _check_batch(cfg, cat, dense)
    parts = [params[f"emb.{name}"][cat[:, j]] for j, name in enumerate(cfg.field_names)]
    x = np.concatenate(parts + [dense], axis=1)
    acts = [x]
    h = x
    for k in range(1, len(cfg.hidden) + 1):
        h = np.maximum(h @ params[f"layer{k}.weight"] + params[f"layer{k}.bias"], 0.0)
        acts.append(h)
    s = (h @ params["head.weight"])[:, 0] + params["head.bias"][0]
    return ForwardCache(cat, x, acts, s, sigmoid(s))


def score(params: RankerParams, record: FeatureRecord) -> ScoredPair:
    cache = forward(params, [record.categorical], [list(record.dense)])
    return ScoredPair(float(cache.s[0]), float(cache.p[0]))


def backward(params: RankerParams, cache: ForwardCache, ds=None, dp=None) -> np.ndarray:
    """Flat gradient of a loss whose derivatives w.r.t. s and/or p are given."""
    cfg = params.cfg
    n = cache.s.shape[0]
    g_s = np.zeros(n)
    if ds is not None:
        ds = np.asarray(ds, dtype=np.float64)
        if ds.shape != (n,):
            raise RankerInputError(f"score gradient has shape {ds.shape}, expected ({n},)")
        g_s = g_s + ds
    if dp is not None:
        dp = np.asarray(dp, dtype=np.float64)
        if dp.shape != (n,):
            raise RankerInputError(f"probability gradient has shape {dp.shape}, expected ({n},)")
        g_s = g_s + dp * cache.p * (1.0 - cache.p)

    grad = RankerParams(cfg)
    h = cache.activations[-1]
    grad["head.weight"][:, 0] = h.T @ g_s
    grad["head.bias"][0] = g_s.sum()
    g_h = np.outer(g_s, params["head.weight"][:, 0])
    for k in range(len(cfg.hidden), 0, -1):
        g_h = g_h * (cache.activations[k] > 0)
        grad[f"layer{k}.weight"][...] = cache.activations[k - 1].T @ g_h
        grad[f"layer{k}.bias"][...] = g_h.sum(axis=0)
        g_h = g_h @ params[f"layer{k}.weight"].T
    e = cfg.embedding_dim
    for j, name in enumerate(cfg.field_names):
        np.add.at(grad[f"emb.{name}"], cache.cat[:, j], g_h[:, j * e:(j + 1) * e])
    return grad.flat


def pairwise_logistic(s: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """``log(1 + exp(-x))`` and its derivative ``-sigmoid(-x)``."""
    return np.logaddexp(0.0, -s), -sigmoid(-s)


def ltr_loss(pre_scores, teacher_scores) -> Tuple[float, np.ndarray]:
    """Pairwise logistic loss over ordered pairs the teacher strictly prefers."""
    s = np.asarray(pre_scores, dtype=np.float64)
    q = np.asarray(teacher_scores, dtype=np.float64)
    if s.shape != q.shape or s.ndim != 1 or s.size == 0:
        raise RankerInputError("pre-rank and teacher scores must be equal-length nonempty lists")
    loss, grad = ltr_loss_batched(s[None, :], q[None, :])
    return loss, grad[0]


def ltr_loss_batched(s: np.ndarray, q: np.ndarray) -> Tuple[float, np.ndarray]:
    """Sum of per-impression pairwise losses; rows are impressions, pairs never cross rows."""
    s = np.asarray(s, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if s.shape != q.shape or s.ndim != 2:
        raise RankerInputError("expected matching (impressions, candidates) arrays")
    active = q[:, :, None] > q[:, None, :]
    diff = s[:, :, None] - s[:, None, :]
    val, dval = pairwise_logistic(diff)
    loss = float(np.sum(val, where=active))
    dval = np.where(active, dval, 0.0)
    grad = dval.sum(axis=2) - dval.sum(axis=1)
    return loss, grad


def save_checkpoint(params: RankerParams, path, meta: Optional[dict] = None) -> None:
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": params.cfg.to_dict(),
        "meta": meta or {},
        "tensors": [
            {"name": name, "shape": list(shape), "data": params[name].reshape(-1).tolist()}
            for name, shape in params.shapes
        ],
    }
    with open(path, "w") as fh:
        json.dump(doc, fh)


def load_checkpoint(path) -> Tuple[RankerParams, dict]:
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise RankerInputError(f"{path} is not a ranker checkpoint")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise RankerInputError(f"unsupported checkpoint version {doc.get('version')}")
    c = doc["config"]
    cfg = RankerConfig(tuple(c["field_names"]), tuple(c["vocab_sizes"]), c["dense_dim"],
                       c["embedding_dim"], tuple(c["hidden"]))
    params = RankerParams(cfg)
    by_name = {t["name"]: t for t in doc["tensors"]}
    for name, shape in params.shapes:
        t = by_name.get(name)
        if t is None or tuple(t["shape"]) != shape:
            raise RankerInputError(f"checkpoint tensor {name} missing or misshapen")
        params[name][...] = np.asarray(t["data"], dtype=np.float64).reshape(shape)
    return params, doc.get("meta", {})
