"""Synthetic feedback world, interaction logs, and dataset assembly.

A minority of material clusters are "bait": users slip off their items far
more often than elsewhere. The frozen teacher never sees slips, so a
pre-ranker that only copies the teacher keeps passing bait items through
to exposure.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .forgetting import DIMENSIONS, NEGATIVE, NEUTRAL, POSITIVE, HistoryIndex, TimeWindows
from .metrics import EvalProtocol
from .ranker import RankerConfig

WORLD_FORMAT = "pmors-world"
WORLD_VERSION = 1
LOG_COLUMNS = ("user_id", "item_id", "timestamp", "watch_ratio")
START_TIMESTAMP = 1_700_000_000
FIELDS = ("user_id", "item_id") + DIMENSIONS


class DataInputError(ValueError):
    pass


@dataclass
class WorldConfig:
    num_users: int = 2000
    num_items: int = 5000
    num_clusters: Dict[str, int] = field(
        default_factory=lambda: {"material_fp": 100, "item_fp": 400, "industry": 20})
    latent_dim: int = 8
    num_segments: int = 4
    seed: int = 0
    bias_scale: float = 0.3
    bait_fraction: float = 0.1
    slip_base: float = 0.05
    slip_bait: float = 0.8
    bias_bait: float = 0.0
    slip_segment_noise: float = 0.3
    drift_rate: float = 0.05
    drift_amplitude: float = 0.5
    click_base: float = -3.0
    click_scale: float = 0.8
    impressions_per_day: float = 2000.0

    def __post_init__(self):
        if self.num_users < 1 or self.num_items < 1:
            raise DataInputError("world needs at least one user and one item")
        if self.latent_dim < 1:
            raise DataInputError("latent_dim must be >= 1")
        if self.num_segments < 1:
            raise DataInputError("num_segments must be >= 1")
        missing = set(DIMENSIONS) - set(self.num_clusters)
        if missing:
            raise DataInputError(f"cluster counts missing for {sorted(missing)}")
        if any(int(v) < 1 for v in self.num_clusters.values()):
            raise DataInputError("cluster counts must be >= 1")
        if not 0.0 <= self.bait_fraction <= 1.0:
            raise DataInputError("bait_fraction must lie in [0, 1]")
        if not (0.0 < self.slip_base < 1.0 and 0.0 < self.slip_bait < 1.0):
            raise DataInputError("slip_base and slip_bait are probabilities in (0, 1)")
        if self.impressions_per_day <= 0:
            raise DataInputError("impressions_per_day must be positive")
        self.num_clusters = {k: int(self.num_clusters[k]) for k in DIMENSIONS}


@dataclass
class World:
    config: WorldConfig
    user_latent: np.ndarray
    item_latent: np.ndarray
    item_bias: np.ndarray
    user_segment: np.ndarray
    item_clusters: Dict[str, np.ndarray]
    slip_propensity: np.ndarray  # (segments, material clusters), before drift
    drift_phase: np.ndarray  # per material cluster

    @property
    def num_items(self) -> int:
        return self.config.num_items

    def slip_probability(self, users, items, timestamps) -> np.ndarray:
        """Propensity of a fast-slip for (user, item) at a time, drift included."""
        users = np.asarray(users)
        items = np.asarray(items)
        base = self.slip_propensity[self.user_segment[users], self.item_clusters["material_fp"][items]]
        days = (np.asarray(timestamps, dtype=np.float64) - START_TIMESTAMP) / 86400.0
        phase = self.drift_phase[self.item_clusters["material_fp"][items]]
        shift = self.config.drift_amplitude * np.sin(2 * np.pi * self.config.drift_rate * days + phase)
        with np.errstate(divide="ignore"):
            logit = np.log(base) - np.log1p(-base)
        return 1.0 / (1.0 + np.exp(-(logit + shift)))

    def click_probability(self, teacher_scores) -> np.ndarray:
        z = self.config.click_base + self.config.click_scale * np.asarray(teacher_scores)
        return 1.0 / (1.0 + np.exp(-z))

    def categorical(self, users, items) -> np.ndarray:
        users = np.asarray(users, dtype=np.int64).reshape(-1)
        items = np.asarray(items, dtype=np.int64).reshape(-1)
        cols = [users, items] + [self.item_clusters[d][items] for d in DIMENSIONS]
        return np.stack(cols, axis=1)

    def dense(self, users, items) -> np.ndarray:
        users = np.asarray(users, dtype=np.int64).reshape(-1)
        items = np.asarray(items, dtype=np.int64).reshape(-1)
        return np.concatenate([self.user_latent[users], self.item_latent[items]], axis=1)

    def ranker_config(self, embedding_dim: int = 8, hidden=(32, 16, 8)) -> RankerConfig:
        c = self.config
        vocab = (c.num_users, c.num_items) + tuple(c.num_clusters[d] for d in DIMENSIONS)
        return RankerConfig(FIELDS, vocab, 2 * c.latent_dim, embedding_dim, tuple(hidden))

    def to_dict(self) -> dict:
        return {
            "format": WORLD_FORMAT, "version": WORLD_VERSION,
            "config": asdict(self.config),
            "user_latent": self.user_latent.tolist(), "item_latent": self.item_latent.tolist(),
            "item_bias": self.item_bias.tolist(), "user_segment": self.user_segment.tolist(),
            "item_clusters": {k: v.tolist() for k, v in self.item_clusters.items()},
            "slip_propensity": self.slip_propensity.tolist(),
            "drift_phase": self.drift_phase.tolist(),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "World":
        if doc.get("format") != WORLD_FORMAT or doc.get("version") != WORLD_VERSION:
            raise DataInputError("not a supported world file")
        return cls(
            WorldConfig(**doc["config"]),
            np.asarray(doc["user_latent"], dtype=np.float64),
            np.asarray(doc["item_latent"], dtype=np.float64),
            np.asarray(doc["item_bias"], dtype=np.float64),
            np.asarray(doc["user_segment"], dtype=np.int64),
            {k: np.asarray(v, dtype=np.int64) for k, v in doc["item_clusters"].items()},
            np.asarray(doc["slip_propensity"], dtype=np.float64),
            np.asarray(doc["drift_phase"], dtype=np.float64),
        )

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def load(cls, path) -> "World":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


class TeacherModel:
    """Frozen ranking model: ``q(u, i) = <user latent, item latent> + item bias``."""

    def __init__(self, world: World):
        self._u = world.user_latent.copy()
        self._v = world.item_latent.copy()
        self._b = world.item_bias.copy()
        for a in (self._u, self._v, self._b):
            a.setflags(write=False)

    def __call__(self, users, items) -> np.ndarray:
        users = np.asarray(users, dtype=np.int64)
        items = np.asarray(items, dtype=np.int64)
        return np.einsum("...k,...k->...", self._u[users], self._v[items]) + self._b[items]


def _logit(p: float) -> float:
    return math.log(p) - math.log1p(-p)


def generate_world(config: WorldConfig) -> Tuple[World, TeacherModel]:
    c = config
    rng = np.random.default_rng(c.seed)
    scale = 1.0 / math.sqrt(c.latent_dim)
    user_latent = rng.normal(0.0, 1.0, (c.num_users, c.latent_dim)) * math.sqrt(scale)
    item_latent = rng.normal(0.0, 1.0, (c.num_items, c.latent_dim)) * math.sqrt(scale)
    clusters = {d: rng.integers(0, c.num_clusters[d], c.num_items) for d in DIMENSIONS}
    n_mat = c.num_clusters["material_fp"]
    # A minority of material clusters are "bait": users slip off them far more often.
    bait = (rng.random(n_mat) < c.bait_fraction).astype(np.float64)
    item_bias = c.bias_bait * bait[clusters["material_fp"]] + c.bias_scale * rng.normal(0.0, 1.0, c.num_items)
    user_segment = rng.integers(0, c.num_segments, c.num_users)
    centre = np.where(bait > 0, _logit(c.slip_bait), _logit(c.slip_base))
    logit = centre[None, :] + c.slip_segment_noise * rng.normal(0.0, 1.0, (c.num_segments, n_mat))
    propensity = 1.0 / (1.0 + np.exp(-logit))
    phase = rng.uniform(0.0, 2 * np.pi, n_mat)
    world = World(c, user_latent, item_latent, item_bias, user_segment, clusters, propensity, phase)
    return world, TeacherModel(world)


@dataclass
class InteractionLog:
    """Column-oriented log; labels use the forgetting module's vocabulary."""

    user_id: np.ndarray
    item_id: np.ndarray
    timestamp: np.ndarray
    watch_ratio: np.ndarray
    label: np.ndarray
    dims: Dict[str, np.ndarray] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.user_id)

    def take(self, idx) -> "InteractionLog":
        return InteractionLog(self.user_id[idx], self.item_id[idx], self.timestamp[idx],
                              self.watch_ratio[idx], self.label[idx],
                              {k: v[idx] for k, v in self.dims.items()})

    @property
    def negative(self) -> np.ndarray:
        return self.label == NEGATIVE


def simulate_logs(world: World, teacher: TeacherModel, num_impressions: int,
                  protocol: EvalProtocol = EvalProtocol(), seed: Optional[int] = None) -> InteractionLog:
    """Expose the teacher's favourite from a random pool and draw the user's reaction."""
    c = world.config
    rng = np.random.default_rng(c.seed + 7919 if seed is None else seed)
    n = int(num_impressions)
    pool_size = min(protocol.candidate_pool_size, c.num_items)
    gaps = np.maximum(1, np.round(rng.exponential(86400.0 / c.impressions_per_day, n))).astype(np.int64)
    ts = START_TIMESTAMP + np.cumsum(gaps)
    users = rng.integers(0, c.num_users, n)
    exposed = np.empty(n, dtype=np.int64)
    for r in range(n):
        pool = rng.choice(c.num_items, pool_size, replace=False)
        q = teacher(np.full(pool_size, users[r]), pool)
        exposed[r] = pool[np.lexsort((pool, -q))[0]]
    u = rng.random((n, 3))
    p_slip = world.slip_probability(users, exposed, ts)
    p_click = world.click_probability(teacher(users, exposed))
    slip = u[:, 0] < p_slip
    click = ~slip & (u[:, 1] < p_click)
    label = np.where(slip, NEGATIVE, np.where(click, POSITIVE, NEUTRAL))
    watch = np.where(slip, 0.25 * u[:, 2], np.where(click, 2.0 + 2.0 * u[:, 2], 0.35 + 1.5 * u[:, 2]))
    watch = np.round(watch, 6)
    dims = {d: world.item_clusters[d][exposed] for d in DIMENSIONS}
    return InteractionLog(users, exposed, ts, watch, label.astype(object), dims)


def label_from_watch_ratio(watch_ratio, neg_threshold: float = 0.3, pos_threshold: float = 2.0):
    wr = np.asarray(watch_ratio, dtype=np.float64)
    return np.where(wr < neg_threshold, NEGATIVE, np.where(wr >= pos_threshold, POSITIVE, NEUTRAL)).astype(object)


def write_csv(log: InteractionLog, path) -> None:
    dim_cols = [d for d in DIMENSIONS if d in log.dims]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(LOG_COLUMNS) + dim_cols)
        for r in range(len(log)):
            w.writerow([int(log.user_id[r]), int(log.item_id[r]), int(log.timestamp[r]),
                        repr(float(log.watch_ratio[r]))] + [int(log.dims[d][r]) for d in dim_cols])


@dataclass
class IngestReport:
    rows_read: int = 0
    rows_kept: int = 0
    rows_skipped: int = 0
    skipped_lines: List[int] = field(default_factory=list)


def ingest_csv(path, neg_threshold: float = 0.3, pos_threshold: float = 2.0) -> Tuple[InteractionLog, IngestReport]:
    """Read a KuaiRec-shaped log. Malformed rows are skipped and reported."""
    report = IngestReport()
    cols: Dict[str, list] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise DataInputError(f"{path}: missing header")
        header = [h.strip() for h in header]
        missing = [c for c in LOG_COLUMNS if c not in header]
        if missing:
            raise DataInputError(f"{path}: missing required columns {missing}")
        dim_cols = [d for d in DIMENSIONS if d in header]
        pos = {h: i for i, h in enumerate(header)}
        for name in LOG_COLUMNS + tuple(dim_cols):
            cols[name] = []
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            report.rows_read += 1
            try:
                vals = {
                    "user_id": int(row[pos["user_id"]]),
                    "item_id": int(row[pos["item_id"]]),
                    "timestamp": int(float(row[pos["timestamp"]])),
                    "watch_ratio": float(row[pos["watch_ratio"]]),
                }
                for d in dim_cols:
                    vals[d] = int(row[pos[d]])
                if vals["timestamp"] < 0 or vals["watch_ratio"] < 0 or not math.isfinite(vals["watch_ratio"]):
                    raise ValueError("out of range")
            except (ValueError, IndexError):
                report.rows_skipped += 1
                report.skipped_lines.append(line_no)
                continue
            for k, v in vals.items():
                cols[k].append(v)
            report.rows_kept += 1
    wr = np.asarray(cols["watch_ratio"], dtype=np.float64)
    log = InteractionLog(
        np.asarray(cols["user_id"], dtype=np.int64), np.asarray(cols["item_id"], dtype=np.int64),
        np.asarray(cols["timestamp"], dtype=np.int64), wr,
        label_from_watch_ratio(wr, neg_threshold, pos_threshold),
        {d: np.asarray(cols[d], dtype=np.int64) for d in dim_cols},
    )
    return log, report


def split_by_time(log: InteractionLog, fractions=(0.9, 0.05, 0.05)):
    """Contiguous time-ordered train/val/test cuts; equal timestamps keep row order."""
    fr = np.asarray(fractions, dtype=np.float64)
    if fr.shape != (3,) or np.any(fr <= 0) or abs(fr.sum() - 1.0) > 1e-9:
        raise DataInputError(f"split fractions must be three positive numbers summing to 1, got {fractions}")
    n = len(log)
    if n < 3:
        raise DataInputError(f"{n} rows cannot fill three splits")
    order = np.argsort(log.timestamp, kind="stable")
    a = int(round(fr[0] * n))
    b = int(round((fr[0] + fr[1]) * n))
    a, b = min(max(a, 1), n - 2), min(max(b, a + 1), n - 1)
    return log.take(order[:a]), log.take(order[a:b]), log.take(order[b:])


def _dimension_keys(log: InteractionLog, granularity: str, num_items: Optional[int] = None) -> np.ndarray:
    if granularity == "item_id":
        return log.item_id
    if granularity not in log.dims:
        raise DataInputError(f"log has no {granularity} column")
    return log.dims[granularity]


def coverage_report(log: InteractionLog, windows: TimeWindows,
                    granularities=("item_fp", "material_fp")) -> List[dict]:
    """Share of samples whose windowed history (strictly earlier events) is non-empty."""
    if len(log) == 0:
        raise DataInputError("coverage needs a non-empty log")
    rows = []
    for gran in granularities:
        keys = _dimension_keys(log, gran)
        width = int(keys.max()) + 1
        for mode in ("personalized", "general"):
            k = keys if mode == "general" else log.user_id.astype(np.int64) * width + keys
            index = HistoryIndex(k, log.timestamp, log.negative)
            _, tot = index.counts(k, log.timestamp, windows)
            cov = (tot > 0).mean(axis=0)
            rows.append({"granularity": gran, "method": mode,
                         **{f"w{j}": float(cov[j]) for j in range(len(windows))}})
    return rows


@dataclass
class ImpressionSet:
    users: np.ndarray
    timestamps: np.ndarray
    items: np.ndarray  # (N, C) candidates, or (N, P) evaluation pools
    teacher_scores: np.ndarray
    uniforms: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return len(self.users)


@dataclass
class Dataset:
    world: World
    teacher: TeacherModel
    log: InteractionLog
    train: ImpressionSet
    val: ImpressionSet
    test: ImpressionSet
    protocol: EvalProtocol
    seed: int
    _cache: dict = field(default_factory=dict, repr=False)

    def user_model(self, users, items, timestamps, uniforms):
        p_slip = self.world.slip_probability(users, items, timestamps)
        p_click = self.world.click_probability(self.teacher(users, items))
        slip = uniforms[:, 0] < p_slip
        click = ~slip & (uniforms[:, 1] < p_click)
        return slip, click

    def history_index(self, key: str, personalized: bool) -> HistoryIndex:
        """Index of the full log keyed by item id or a dimension's cluster id."""
        ck = ("index", key, personalized)
        if ck not in self._cache:
            keys = self.log.item_id if key == "item_id" else self.log.dims[key]
            if personalized:
                keys = self.log.user_id.astype(np.int64) * self.key_width(key) + keys
            self._cache[ck] = HistoryIndex(keys, self.log.timestamp, self.log.negative)
        return self._cache[ck]

    def key_width(self, key: str) -> int:
        return self.world.num_items if key == "item_id" else self.world.config.num_clusters[key]

    def candidate_keys(self, key: str, personalized: bool) -> np.ndarray:
        items = self.train.items
        k = items if key == "item_id" else self.world.item_clusters[key][items]
        if personalized:
            k = self.train.users[:, None].astype(np.int64) * self.key_width(key) + k
        return k


def _impression_set(world, teacher, log: InteractionLog, width: int, rng, with_uniforms: bool,
                    pool_size: Optional[int] = None, head: int = 1) -> ImpressionSet:
    """Candidate lists anchored on each logged exposure.

    Without ``pool_size`` the list is the exposure plus random other items.
    With it, a pool of that size (exposure included) is drawn, its ``head``
    best items by teacher score are kept and the rest of the list is filled
    at random from the remainder of the pool.
    """
    n = len(log)
    n_items = world.num_items
    items = np.empty((n, width), dtype=np.int64)
    for r in range(n):
        draw = width if pool_size is None else max(pool_size, width)
        draw = min(draw, n_items)
        others = rng.choice(n_items - 1, draw - 1, replace=False)
        others = others + (others >= log.item_id[r])
        if pool_size is None or head <= 1:
            chosen = others[:width - 1]
        else:
            q = teacher(np.full(len(others), log.user_id[r]), others)
            order = np.lexsort((others, -q))
            top = others[order[:head - 1]]
            rest = rng.choice(others[order[head - 1:]], width - head, replace=False)
            chosen = np.concatenate([top, rest])
        items[r, 0] = log.item_id[r]
        items[r, 1:] = chosen
    q = teacher(np.repeat(log.user_id[:, None], width, axis=1), items)
    uni = rng.random((n, 2)) if with_uniforms else None
    return ImpressionSet(log.user_id.copy(), log.timestamp.copy(), items, q, uni)


def build_dataset(world: World, teacher: TeacherModel, log: InteractionLog,
                  fractions=(0.9, 0.05, 0.05), protocol: EvalProtocol = EvalProtocol(),
                  candidates_per_impression: int = 10, head_candidates: int = 1,
                  seed: int = 0) -> Dataset:
    """Split the log by time and attach candidate lists.

    Each training impression gets the logged exposure plus random other
    items (``candidates_per_impression`` in total); validation and test
    impressions get evaluation pools of ``protocol.candidate_pool_size``
    built the same way, plus per-impression uniforms so every model is
    judged against the same simulated user reactions.
    """
    if len(log) == 0:
        raise DataInputError("empty log")
    protocol = protocol.capped(world.num_items)
    train, val, test = split_by_time(log, fractions)
    c = min(candidates_per_impression, world.num_items)
    rng = np.random.default_rng(seed)
    return Dataset(
        world, teacher, log,
        _impression_set(world, teacher, train, c, rng, False,
                        protocol.candidate_pool_size if head_candidates > 1 else None,
                        min(head_candidates, c)),
        _impression_set(world, teacher, val, protocol.candidate_pool_size, rng, True),
        _impression_set(world, teacher, test, protocol.candidate_pool_size, rng, True),
        protocol, seed,
    )
