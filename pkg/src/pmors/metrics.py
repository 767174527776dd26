"""Cascade evaluation: pre-rank a pool, keep the top slice, let the teacher pick one.

Ties in any score are broken by ascending item id.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np


class MetricInputError(ValueError):
    pass


@dataclass(frozen=True)
class EvalProtocol:
    candidate_pool_size: int = 100
    prerank_cut: int = 10
    final_cut: int = 1

    def __post_init__(self):
        if not 1 <= self.final_cut <= self.prerank_cut <= self.candidate_pool_size:
            raise MetricInputError(
                f"need 1 <= final_cut <= prerank_cut <= candidate_pool_size, got {self}")

    def capped(self, num_items: int) -> "EvalProtocol":
        """Shrink the protocol for worlds with fewer items than the pool size."""
        pool = min(self.candidate_pool_size, num_items)
        cut = min(self.prerank_cut, pool)
        return EvalProtocol(pool, cut, min(self.final_cut, cut))


@dataclass
class EvalReport:
    ndcg_at_10: float
    recall_10_1: float
    fast_slip_rate: float
    ctr: float
    counts: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)


def rank_order(scores, item_ids) -> np.ndarray:
    """Indices sorted by descending score, ascending item id on ties."""
    scores = np.asarray(scores, dtype=np.float64)
    return np.lexsort((np.asarray(item_ids), -scores))


def linear_relevance(teacher_scores, item_ids, k: int) -> np.ndarray:
    """Graded gains from teacher rank: k for the teacher's best, down to 1 at rank k, 0 below."""
    order = rank_order(teacher_scores, item_ids)
    rel = np.zeros(len(order))
    rel[order] = np.maximum(0, k - np.arange(len(order)))
    return rel


def ndcg_at_k(prerank_order, relevance, k: int = 10) -> float:
    """NDCG@k of an ordering (indices into ``relevance``)."""
    if k < 1:
        raise MetricInputError("k must be >= 1")
    rel = np.asarray(relevance, dtype=np.float64)
    order = np.asarray(prerank_order, dtype=np.int64)
    if rel.size == 0 or order.size == 0:
        raise MetricInputError("empty candidate list")
    if not np.all(np.isfinite(rel)):
        raise MetricInputError("relevance values must be finite")
    discounts = 1.0 / np.log2(np.arange(2, k + 2))
    top = order[:k]
    dcg = float(np.sum(rel[top] * discounts[:len(top)]))
    ideal = np.sort(rel)[::-1][:k]
    idcg = float(np.sum(ideal * discounts[:len(ideal)]))
    return dcg / idcg if idcg > 0 else 0.0


def recall_10_1(prerank_top_sets: Sequence, teacher_top1: Sequence) -> float:
    if len(prerank_top_sets) == 0 or len(prerank_top_sets) != len(teacher_top1):
        raise MetricInputError("need one teacher top-1 per impression, at least one impression")
    hits = sum(1 for top, best in zip(prerank_top_sets, teacher_top1) if best in set(np.asarray(top).tolist()))
    return hits / len(prerank_top_sets)


def _event_rate(events) -> float:
    events = np.asarray(events, dtype=bool)
    if events.size == 0:
        raise MetricInputError("no impressions")
    return float(events.sum() / events.size)


def fast_slip_rate_metric(slips) -> float:
    """Share of exposures that received a fast-slip."""
    return _event_rate(slips)


def ctr_metric(clicks) -> float:
    return _event_rate(clicks)


ScoreFn = Callable[[np.ndarray, np.ndarray], np.ndarray]
OutcomeFn = Callable[[np.ndarray, np.ndarray, np.ndarray, np.ndarray], tuple]


def evaluate(prerank: ScoreFn, teacher: ScoreFn, users, timestamps, pools, uniforms,
             protocol: EvalProtocol, user_model: OutcomeFn, trace_path=None) -> EvalReport:
    """Run the cascade over test impressions and aggregate all four metrics.

    ``prerank`` and ``teacher`` map (users, items) arrays of equal shape to
    scores. ``pools`` is either an (M, P) array or a list of 1-D arrays;
    impressions with fewer than ``candidate_pool_size`` candidates are
    rejected and counted. ``user_model(users, items, timestamps, uniforms)``
    returns boolean (slip, click) arrays for the exposed items.
    """
    users = np.asarray(users)
    timestamps = np.asarray(timestamps)
    uniforms = np.asarray(uniforms)
    if len(users) == 0:
        raise MetricInputError("empty test set")
    n_pool = protocol.candidate_pool_size
    keep = [i for i in range(len(users)) if len(pools[i]) >= n_pool]
    rejected = len(users) - len(keep)
    if not keep:
        raise MetricInputError("every impression was rejected: pools smaller than the protocol")
    pool_arr = np.stack([np.asarray(pools[i][:n_pool], dtype=np.int64) for i in keep])
    u = users[keep]
    u_rep = np.repeat(u[:, None], n_pool, axis=1)
    pre_s = np.asarray(prerank(u_rep, pool_arr), dtype=np.float64).reshape(pool_arr.shape)
    tea_s = np.asarray(teacher(u_rep, pool_arr), dtype=np.float64).reshape(pool_arr.shape)

    k = protocol.prerank_cut
    ndcgs = np.empty(len(keep))
    hits = np.zeros(len(keep), dtype=bool)
    exposed = np.empty(len(keep), dtype=np.int64)
    for r in range(len(keep)):
        items = pool_arr[r]
        pre_order = rank_order(pre_s[r], items)
        rel = linear_relevance(tea_s[r], items, k)
        ndcgs[r] = ndcg_at_k(pre_order, rel, k)
        top = pre_order[:k]
        best_overall = items[rank_order(tea_s[r], items)[0]]
        hits[r] = best_overall in items[top]
        final = top[rank_order(tea_s[r][top], items[top])[:protocol.final_cut]]
        exposed[r] = items[final[0]]

    slips, clicks = user_model(u, exposed, timestamps[keep], uniforms[keep])
    slips = np.asarray(slips, dtype=bool)
    clicks = np.asarray(clicks, dtype=bool)
    report = EvalReport(
        ndcg_at_10=float(ndcgs.mean()),
        recall_10_1=float(hits.mean()),
        fast_slip_rate=fast_slip_rate_metric(slips),
        ctr=ctr_metric(clicks),
        counts={"impressions": len(keep), "rejected": rejected, "fast_slips": int(slips.sum()),
                "clicks": int(clicks.sum()), "recall_hits": int(hits.sum())},
    )
    if trace_path is not None:
        with open(trace_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["user_id", "timestamp", "exposed_item", "ndcg", "recall_hit", "fast_slip", "click"])
            for r in range(len(keep)):
                w.writerow([int(u[r]), int(timestamps[keep][r]), int(exposed[r]), repr(float(ndcgs[r])),
                            int(hits[r]), int(slips[r]), int(clicks[r])])
    return report
