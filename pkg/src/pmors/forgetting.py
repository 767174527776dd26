"""Negative-feedback penalties weighted by an exponential forgetting curve.

Time is measured in days throughout. Interaction timestamps are integer
seconds and are converted when gaps are taken.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

SECONDS_PER_DAY = 86400.0
NEGATIVE, POSITIVE, NEUTRAL = "negative", "positive", "neutral"
LABELS = (NEGATIVE, POSITIVE, NEUTRAL)
DIMENSIONS = ("material_fp", "item_fp", "industry")

_UNIT_DAYS = {
    "s": 1 / 86400, "sec": 1 / 86400, "secs": 1 / 86400, "second": 1 / 86400, "seconds": 1 / 86400,
    "m": 1 / 1440, "min": 1 / 1440, "mins": 1 / 1440, "minute": 1 / 1440, "minutes": 1 / 1440,
    "h": 1 / 24, "hr": 1 / 24, "hrs": 1 / 24, "hour": 1 / 24, "hours": 1 / 24,
    "d": 1.0, "day": 1.0, "days": 1.0,
    "w": 7.0, "week": 7.0, "weeks": 7.0,
}
_DURATION = re.compile(r"^\s*([0-9]*\.?[0-9]+)\s*([a-zA-Z]+)\s*$")

DEFAULT_WINDOWS = ("10min", "3h", "1day", "7days")


class ForgettingInputError(ValueError):
    pass


@dataclass(frozen=True)
class Interaction:
    user_id: int
    item_id: int
    timestamp: int
    label: str
    dims: Mapping[str, int] = field(default_factory=dict)

    def __post_init__(self):
        if self.timestamp < 0:
            raise ForgettingInputError(f"negative timestamp {self.timestamp}")
        if self.label not in LABELS:
            raise ForgettingInputError(f"unknown label {self.label!r}")


def parse_duration(value) -> float:
    """Duration in days from a number (already days) or a string like ``"3h"``."""
    if isinstance(value, (int, float)) and not isinstance(value, bool):
        return float(value)
    m = _DURATION.match(str(value))
    if not m or m.group(2).lower() not in _UNIT_DAYS:
        raise ForgettingInputError(f"cannot parse duration {value!r}")
    return float(m.group(1)) * _UNIT_DAYS[m.group(2).lower()]


@dataclass(frozen=True)
class TimeWindows:
    days: Tuple[float, ...]

    def __post_init__(self):
        if len(self.days) == 0:
            raise ForgettingInputError("at least one time window is required")
        if any(d <= 0 for d in self.days):
            raise ForgettingInputError(f"windows must be positive, got {self.days}")
        if any(b <= a for a, b in zip(self.days, self.days[1:])):
            raise ForgettingInputError(f"windows must be strictly increasing, got {self.days}")

    @classmethod
    def parse(cls, values: Iterable = DEFAULT_WINDOWS) -> "TimeWindows":
        return cls(tuple(parse_duration(v) for v in values))

    def __len__(self) -> int:
        return len(self.days)

    @property
    def seconds(self) -> np.ndarray:
        return np.asarray(self.days) * SECONDS_PER_DAY


def strength_from_retention(retention: float) -> float:
    """Decay constant S such that one day of elapsed time keeps ``retention``."""
    if not 0.0 < retention < 1.0:
        raise ForgettingInputError(f"retention must lie in (0, 1), got {retention}")
    return -1.0 / math.log(retention)


@dataclass(frozen=True)
class MemoryCurve:
    retention_L: float
    strength_S: float

    @classmethod
    def from_retention(cls, retention: float) -> "MemoryCurve":
        return cls(retention, strength_from_retention(retention))

    def __post_init__(self):
        if not 0.0 < self.retention_L < 1.0 or self.strength_S <= 0:
            raise ForgettingInputError("invalid memory curve")
        if abs(self.strength_S + 1.0 / math.log(self.retention_L)) > 1e-9:
            raise ForgettingInputError("strength_S inconsistent with retention_L")


def memory_decay(t: float, curve: MemoryCurve) -> float:
    if t < 0:
        raise ForgettingInputError(f"elapsed time must be >= 0, got {t}")
    return math.exp(-t / curve.strength_S)


def decay_vector(windows: TimeWindows, curve: MemoryCurve) -> np.ndarray:
    return np.exp(-np.asarray(windows.days) / curve.strength_S)


def preprocess_rate(r, mode: str = "identity", gamma: float = 0.5):
    """Rate transform applied before time weighting.

    ``clipped_power`` is a concave stretch of small rates; works on scalars
    and arrays alike.
    """
    if mode == "identity":
        return r
    if mode == "clipped_power":
        if gamma <= 0:
            raise ForgettingInputError("gamma must be positive")
        return np.clip(r, 0.0, 1.0) ** gamma
    raise ForgettingInputError(f"unknown preprocess mode {mode!r}")


@dataclass(frozen=True)
class FastSlipVector:
    rates: Tuple[float, ...]
    counts: Tuple[Tuple[int, int], ...]


@dataclass(frozen=True)
class DimensionWeights:
    lambdas: Mapping[str, float]
    curves: Mapping[str, MemoryCurve]

    def __post_init__(self):
        if set(self.lambdas) != set(self.curves):
            raise ForgettingInputError("every dimension needs both a lambda and a memory curve")
        if not self.lambdas:
            raise ForgettingInputError("no dimensions given")
        for name, lam in self.lambdas.items():
            # a single dimension carries the whole mass
            if len(self.lambdas) > 1 and not 0.0 < lam < 1.0:
                raise ForgettingInputError(f"lambda for {name} must lie in (0, 1), got {lam}")
        if abs(sum(self.lambdas.values()) - 1.0) > 1e-9:
            raise ForgettingInputError(f"lambdas must sum to 1, got {sum(self.lambdas.values())}")


def fast_slip_rates(history: Sequence[Interaction], item_id, now: int, windows: TimeWindows,
                    mode: str = "general", user_id=None, key: str = "item_id") -> FastSlipVector:
    """Per-window negative rates for one candidate, by direct counting.

    Only interactions strictly before ``now`` count. ``key`` selects what
    identifies the candidate: ``"item_id"`` or one of the dimension names,
    in which case ``item_id`` is the cluster identifier.
    """
    if mode not in ("general", "personalized"):
        raise ForgettingInputError(f"unknown gathering mode {mode!r}")
    if mode == "personalized" and user_id is None:
        raise ForgettingInputError("personalized gathering needs a user_id")
    limits = windows.seconds
    neg = [0] * len(limits)
    tot = [0] * len(limits)
    for ev in history:
        ev_key = ev.item_id if key == "item_id" else ev.dims.get(key)
        if ev_key != item_id or ev.timestamp >= now:
            continue
        if mode == "personalized" and ev.user_id != user_id:
            continue
        gap = now - ev.timestamp
        for j, lim in enumerate(limits):
            if gap <= lim:
                tot[j] += 1
                neg[j] += ev.label == NEGATIVE
    rates = tuple(n / t if t else 0.0 for n, t in zip(neg, tot))
    return FastSlipVector(rates, tuple(zip(neg, tot)))


def penalty_weight_offline(rates, windows: TimeWindows, curve: MemoryCurve,
                           f: str = "identity", gamma: float = 0.5) -> float:
    r = np.asarray(rates.rates if isinstance(rates, FastSlipVector) else rates, dtype=np.float64)
    if r.shape != (len(windows),):
        raise ForgettingInputError(f"{r.shape[0]} rates for {len(windows)} windows")
    return float(np.dot(preprocess_rate(r, f, gamma), decay_vector(windows, curve)))


def penalty_weight_online(per_dim_rates: Mapping[str, object], windows: TimeWindows,
                          dimw: DimensionWeights, f: str = "clipped_power",
                          gamma: float = 0.5) -> float:
    missing = set(dimw.lambdas) - set(per_dim_rates)
    if missing:
        raise ForgettingInputError(f"no rates for dimensions {sorted(missing)}")
    return float(sum(
        lam * penalty_weight_offline(per_dim_rates[name], windows, dimw.curves[name], f, gamma)
        for name, lam in dimw.lambdas.items()
    ))


def forgetting_loss(weights, probs, eps: float = 1e-7) -> Tuple[float, np.ndarray]:
    """Weighted ``-log(1 - p)`` penalty and its derivative with respect to p."""
    w = np.asarray(weights, dtype=np.float64)
    p = np.asarray(probs, dtype=np.float64)
    if w.shape != p.shape:
        raise ForgettingInputError(f"weights {w.shape} and probabilities {p.shape} differ")
    if np.any(w < 0):
        raise ForgettingInputError("penalty weights must be nonnegative")
    p = np.clip(p, eps, 1.0 - eps)
    loss = float(-np.sum(w * np.log1p(-p)))
    return loss, w / (1.0 - p)


class HistoryIndex:
    """Sorted event index answering windowed rate queries in bulk.

    Events are keyed by an integer (item id, cluster id, or a user/item
    pair code) and sorted by (key, timestamp) into one composite int64
    array, so every query is two ``searchsorted`` calls. Built once, then
    read-only.
    """

    def __init__(self, keys: np.ndarray, timestamps: np.ndarray, negative: np.ndarray):
        keys = np.asarray(keys, dtype=np.int64)
        ts = np.asarray(timestamps, dtype=np.int64)
        if keys.size and (keys.min() < 0 or ts.min() < 0):
            raise ForgettingInputError("keys and timestamps must be nonnegative")
        self._span = int(ts.max()) + 1 + int(SECONDS_PER_DAY * 366 * 10) if ts.size else 1
        if keys.size and (int(keys.max()) + 1) * self._span >= 2**62:
            raise ForgettingInputError("key space too large for composite index")
        code = keys * self._span + ts
        order = np.argsort(code, kind="stable")
        self._code = code[order]
        self._cum_neg = np.concatenate([[0], np.cumsum(np.asarray(negative, dtype=np.int64)[order])])

    def counts(self, keys, now, windows: TimeWindows) -> Tuple[np.ndarray, np.ndarray]:
        """(negatives, totals), each shaped ``keys.shape + (n_windows,)``."""
        keys = np.asarray(keys, dtype=np.int64)
        now = np.broadcast_to(np.asarray(now, dtype=np.int64), keys.shape)
        if now.size and (now.min() < 0 or now.max() >= self._span):
            raise ForgettingInputError("query time outside the indexed range")
        base = keys * self._span
        hi = np.searchsorted(self._code, base + now, side="left")
        lims = np.floor(windows.seconds).astype(np.int64)
        lo = np.searchsorted(
            self._code, (base + now)[..., None] - lims, side="left")
        # clamp so a window never reaches into the previous key's block
        lo = np.maximum(lo, np.searchsorted(self._code, base, side="left")[..., None])
        tot = hi[..., None] - lo
        neg = self._cum_neg[hi][..., None] - self._cum_neg[lo]
        return neg, tot

    def rates(self, keys, now, windows: TimeWindows) -> np.ndarray:
        neg, tot = self.counts(keys, now, windows)
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(tot > 0, neg / np.maximum(tot, 1), 0.0)


def personalized_key(users, items, num_items: int) -> np.ndarray:
    return np.asarray(users, dtype=np.int64) * int(num_items) + np.asarray(items, dtype=np.int64)


@dataclass
class ForgettingConfig:
    """How penalty weights are produced for training candidates.

    ``penalty="offline"`` keys rates on the item and uses a single curve;
    ``penalty="online"`` keys rates on each dimension's cluster id and mixes
    per-dimension curves with ``lambdas``.
    """

    windows: TimeWindows = field(default_factory=TimeWindows.parse)
    retention_L: float = 0.7
    penalty: str = "offline"
    f: Optional[str] = None  # None: identity offline, clipped_power online
    gamma: float = 0.5
    gathering: str = "general"
    dimension_retention: Dict[str, float] = field(default_factory=dict)
    lambdas: Dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        strength_from_retention(self.retention_L)
        if self.penalty not in ("offline", "online"):
            raise ForgettingInputError(f"unknown penalty mode {self.penalty!r}")
        if self.gathering not in ("general", "personalized"):
            raise ForgettingInputError(f"unknown gathering mode {self.gathering!r}")
        if self.f is None:
            self.f = "identity" if self.penalty == "offline" else "clipped_power"
        preprocess_rate(0.5, self.f, self.gamma)
        if self.penalty == "online":
            self.dimension_weights()

    @property
    def curve(self) -> MemoryCurve:
        return MemoryCurve.from_retention(self.retention_L)

    def dimension_weights(self) -> DimensionWeights:
        names = list(self.lambdas) or list(DIMENSIONS)
        lambdas = self.lambdas or {n: 1.0 / len(names) for n in names}
        curves = {n: MemoryCurve.from_retention(self.dimension_retention.get(n, self.retention_L))
                  for n in names}
        return DimensionWeights(lambdas, curves)

    def with_retention(self, retention: float) -> "ForgettingConfig":
        return ForgettingConfig(self.windows, retention, self.penalty, self.f, self.gamma,
                                self.gathering, {k: retention for k in self.dimension_retention},
                                dict(self.lambdas))

    def to_dict(self) -> dict:
        return {
            "windows": list(self.windows.days), "retention_L": self.retention_L,
            "penalty": self.penalty, "f": self.f, "gamma": self.gamma,
            "gathering": self.gathering, "dimension_retention": dict(self.dimension_retention),
            "lambdas": dict(self.lambdas),
        }


def weights_from_rates(rates: np.ndarray, windows: TimeWindows, curve: MemoryCurve,
                       f: str = "identity", gamma: float = 0.5) -> np.ndarray:
    """Vectorised offline weight over the trailing window axis."""
    return preprocess_rate(rates, f, gamma) @ decay_vector(windows, curve)


def online_weights(per_dim_rates: Mapping[str, np.ndarray], windows: TimeWindows,
                   dimw: DimensionWeights, f: str = "clipped_power", gamma: float = 0.5) -> np.ndarray:
    out = None
    for name, lam in dimw.lambdas.items():
        term = lam * weights_from_rates(per_dim_rates[name], windows, dimw.curves[name], f, gamma)
        out = term if out is None else out + term
    return out
