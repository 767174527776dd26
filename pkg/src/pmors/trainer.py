"""Training loop: per-objective gradients, Pareto weights, one Adam step per batch."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.stats import spearmanr

from . import pareto
from .dataio import Dataset
from .forgetting import ForgettingConfig, forgetting_loss, online_weights, weights_from_rates
from .metrics import EvalReport, evaluate
from .ranker import RankerParams, backward, forward, ltr_loss_batched

log = logging.getLogger(__name__)

UNDERFLOW_LOSS = 1e-12


class TrainingError(RuntimeError):
    pass


class ConfigError(ValueError):
    pass


@dataclass
class SolverConfig:
    max_iter: int = 100
    conv_tol: float = 1e-6
    stat_tol: float = 1e-8
    init: str = "uniform"
    away_steps: bool = True


@dataclass
class TrainConfig:
    mode: str = "pareto"
    alpha_ltr: float = 1.0
    learning_rate: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    impressions_per_step: int = 256
    candidates_per_impression: int = 10
    epochs: int = 1
    seed: int = 0
    split: Tuple[float, float, float] = (0.9, 0.05, 0.05)
    embedding_dim: int = 8
    hidden: Tuple[int, ...] = (32, 16, 8)
    solve_every: str = "batch"
    ltr_input: str = "probability"
    checkpoint_every: int = 0
    eval_every_epoch: bool = True
    forgetting: ForgettingConfig = field(default_factory=ForgettingConfig)
    solver: SolverConfig = field(default_factory=SolverConfig)

    def __post_init__(self):
        if self.mode not in ("pareto", "fixed"):
            raise ConfigError(f"unknown mode {self.mode!r}")
        if not 0.0 <= self.alpha_ltr <= 1.0:
            raise ConfigError(f"alpha_ltr must lie in [0, 1], got {self.alpha_ltr}")
        if abs(sum(self.split) - 1.0) > 1e-9 or any(f <= 0 for f in self.split):
            raise ConfigError(f"split fractions must be positive and sum to 1, got {self.split}")
        if self.ltr_input not in ("probability", "score"):
            raise ConfigError(f"ltr_input must be 'probability' or 'score', got {self.ltr_input!r}")
        if self.solve_every not in ("batch", "epoch"):
            raise ConfigError(f"solve_every must be 'batch' or 'epoch', got {self.solve_every!r}")
        if self.impressions_per_step < 1 or self.epochs < 0 or self.learning_rate <= 0:
            raise ConfigError("invalid step size, epoch count, or learning rate")
        self.split = tuple(self.split)
        self.hidden = tuple(self.hidden)

    def replace(self, **changes) -> "TrainConfig":
        d = {f: getattr(self, f) for f in self.__dataclass_fields__}
        d.update(changes)
        return TrainConfig(**d)

    def to_dict(self) -> dict:
        d = {f: getattr(self, f) for f in self.__dataclass_fields__}
        d["forgetting"] = self.forgetting.to_dict()
        d["solver"] = asdict(self.solver)
        d["split"] = list(self.split)
        d["hidden"] = list(self.hidden)
        return d


class Adam:
    def __init__(self, size: int, lr: float = 0.001, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def step(self, theta: np.ndarray, grad: np.ndarray) -> np.ndarray:
        """Update ``theta`` in place; returns the applied increment."""
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        m_hat = self.m / (1 - self.beta1 ** self.t)
        v_hat = self.v / (1 - self.beta2 ** self.t)
        delta = -self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
        theta += delta
        return delta


@dataclass
class Batch:
    cat: np.ndarray
    dense: np.ndarray
    teacher: np.ndarray  # (B, C)
    weights: np.ndarray  # (B, C)

    @property
    def shape(self) -> Tuple[int, int]:
        return self.teacher.shape


@dataclass
class StepReport:
    step: int
    loss_ltr: float
    loss_fg: float
    alpha_ltr: float
    alpha_fg: float
    combined_norm_sq: float
    grad_norm_ltr: float
    grad_norm_fg: float
    skipped: bool = False
    solver_iterations: int = 0

    CSV_FIELDS = ("step", "loss_ltr", "loss_fg", "alpha_ltr", "alpha_fg", "combined_norm_sq",
                  "grad_norm_ltr", "grad_norm_fg", "skipped", "solver_iterations")

    def row(self) -> list:
        return [getattr(self, f) if not isinstance(getattr(self, f), float) else repr(getattr(self, f))
                for f in self.CSV_FIELDS]


def compute_objective_losses(params: RankerParams, batch: Batch, ltr_input: str = "probability"):
    """Both losses, their upstream derivatives, and the forward cache.

    Returns ``(L_LTR, L_FG, dLTR, dFG, cache)`` where each derivative is a
    ``(ds, dp)`` pair ready for :func:`backward`. With ``ltr_input =
    "probability"`` the pairwise loss compares sigmoid outputs, the same
    quantity the penalty sees; with ``"score"`` it compares raw scores.
    """
    cache = forward(params, batch.cat, batch.dense)
    p = cache.p.reshape(batch.shape)
    if ltr_input == "probability":
        l_ltr, d = ltr_loss_batched(p, batch.teacher)
        d_ltr = (None, d.reshape(-1))
    else:
        l_ltr, d = ltr_loss_batched(cache.s.reshape(batch.shape), batch.teacher)
        d_ltr = (d.reshape(-1), None)
    l_fg, dp = forgetting_loss(batch.weights, p)
    return l_ltr, l_fg, d_ltr, (None, dp.reshape(-1)), cache


class Trainer:
    """Single-writer loop owning the parameters and the optimiser state."""

    def __init__(self, params: RankerParams, config: TrainConfig):
        self.params = params
        self.config = config
        self.adam = Adam(params.size, config.learning_rate, config.beta1, config.beta2, config.adam_eps)
        self.steps = 0
        self.solver_calls = 0
        self.last_direction: Optional[np.ndarray] = None
        self.last_gradients: Optional[Tuple[np.ndarray, np.ndarray]] = None
        self._held_alpha: Optional[np.ndarray] = None

    def _alpha(self, g_ltr, g_fg, l_ltr, l_fg, has_ltr) -> Tuple[np.ndarray, float, int]:
        cfg = self.config
        if cfg.mode == "fixed":
            a = np.array([cfg.alpha_ltr, 1.0 - cfg.alpha_ltr])
            d = a[0] * g_ltr + a[1] * g_fg
            return a, float(d @ d), 0
        if l_fg < UNDERFLOW_LOSS:
            log.warning("forgetting loss %.3g below underflow guard; using alpha = (1, 0)", l_fg)
            return np.array([1.0, 0.0]), float(g_ltr @ g_ltr), 0
        if not has_ltr:
            return np.array([0.0, 1.0]), float(g_fg @ g_fg), 0
        if cfg.solve_every == "epoch" and self._held_alpha is not None:
            a = self._held_alpha
            d = a[0] * g_ltr + a[1] * g_fg
            return a, float(d @ d), 0
        s = cfg.solver
        res = pareto.frank_wolfe_solve(pareto.gram_matrix([g_ltr, g_fg]), s.max_iter, s.conv_tol,
                                       s.stat_tol, s.init, cfg.seed + self.steps, s.away_steps)
        self.solver_calls += 1
        if cfg.solve_every == "epoch":
            self._held_alpha = res.alpha
        return res.alpha, res.combined_norm_sq, res.iterations

    def new_epoch(self) -> None:
        self._held_alpha = None

    def train_step(self, batch: Batch) -> StepReport:
        cfg = self.config
        l_ltr, l_fg, d_ltr, d_fg, cache = compute_objective_losses(self.params, batch, cfg.ltr_input)
        if not (np.isfinite(l_ltr) and np.isfinite(l_fg)):
            raise TrainingError(f"non-finite loss at step {self.steps}: L_LTR={l_ltr}, L_FG={l_fg}")
        has_ltr = bool(np.any(batch.teacher[:, :, None] > batch.teacher[:, None, :]))
        has_fg = bool(np.any(batch.weights > 0))
        step = self.steps
        self.steps += 1
        if not has_ltr and not has_fg:
            log.info("step %d skipped: no pairwise signal and no penalty weight", step)
            return StepReport(step, l_ltr, l_fg, float("nan"), float("nan"), 0.0, 0.0, 0.0, skipped=True)
        g_ltr = backward(self.params, cache, *d_ltr)
        g_fg = backward(self.params, cache, *d_fg)
        alpha, norm_sq, iters = self._alpha(g_ltr, g_fg, l_ltr, l_fg, has_ltr)
        direction = alpha[0] * g_ltr + alpha[1] * g_fg
        self.adam.step(self.params.flat, direction)
        self.last_direction = direction
        self.last_gradients = (g_ltr, g_fg)
        return StepReport(step, l_ltr, l_fg, float(alpha[0]), float(alpha[1]), norm_sq,
                          float(np.linalg.norm(g_ltr)), float(np.linalg.norm(g_fg)),
                          solver_iterations=iters)


def candidate_weights(dataset: Dataset, fcfg: ForgettingConfig) -> np.ndarray:
    """Penalty weight of every training candidate at its impression's timestamp."""
    personalized = fcfg.gathering == "personalized"
    keys = ["item_id"] if fcfg.penalty == "offline" else list(fcfg.dimension_weights().lambdas)
    rates = {}
    for key in keys:
        ck = ("rates", key, personalized, fcfg.windows.days)
        if ck not in dataset._cache:
            index = dataset.history_index(key, personalized)
            k = dataset.candidate_keys(key, personalized)
            now = np.broadcast_to(dataset.train.timestamps[:, None], k.shape)
            dataset._cache[ck] = index.rates(k, now, fcfg.windows)
        rates[key] = dataset._cache[ck]
    if fcfg.penalty == "offline":
        return weights_from_rates(rates["item_id"], fcfg.windows, fcfg.curve, fcfg.f, fcfg.gamma)
    return online_weights(rates, fcfg.windows, fcfg.dimension_weights(), fcfg.f, fcfg.gamma)


def make_batches(dataset: Dataset, weights: np.ndarray, size: int):
    tr = dataset.train
    n, c = tr.items.shape
    for start in range(0, n, size):
        sl = slice(start, min(start + size, n))
        users = np.repeat(tr.users[sl], c)
        items = tr.items[sl].reshape(-1)
        yield Batch(dataset.world.categorical(users, items), dataset.world.dense(users, items),
                    tr.teacher_scores[sl], weights[sl])


def prerank_scorer(params: RankerParams, world):
    def score_fn(users, items):
        shape = np.shape(items)
        cache = forward(params, world.categorical(users, items), world.dense(users, items))
        return cache.s.reshape(shape)
    return score_fn


def evaluate_params(params: RankerParams, dataset: Dataset, split: str = "test", trace_path=None) -> EvalReport:
    imp = getattr(dataset, split)
    return evaluate(prerank_scorer(params, dataset.world), dataset.teacher, imp.users, imp.timestamps,
                    imp.items, imp.uniforms, dataset.protocol, dataset.user_model, trace_path)


@dataclass
class FitResult:
    params: RankerParams
    initial_params: RankerParams
    curve: List[StepReport]
    epoch_metrics: List[dict]
    checkpoints: List[Tuple[int, RankerParams]]
    solver_calls: int

    def mean_alpha(self) -> Tuple[float, float]:
        live = [r for r in self.curve if not r.skipped]
        if not live:
            return float("nan"), float("nan")
        return (float(np.mean([r.alpha_ltr for r in live])), float(np.mean([r.alpha_fg for r in live])))


def fit(dataset: Dataset, config: TrainConfig, params: Optional[RankerParams] = None) -> FitResult:
    if len(dataset.train) == 0 or len(dataset.val) == 0 or len(dataset.test) == 0:
        raise ConfigError("every split must be non-empty")
    if params is None:
        params = RankerParams.init(dataset.world.ranker_config(config.embedding_dim, config.hidden), config.seed)
    initial = params.copy()
    trainer = Trainer(params.copy(), config)
    weights = candidate_weights(dataset, config.forgetting)
    curve: List[StepReport] = []
    epoch_metrics: List[dict] = []
    checkpoints: List[Tuple[int, RankerParams]] = []
    for epoch in range(1, config.epochs + 1):
        trainer.new_epoch()
        for batch in make_batches(dataset, weights, config.impressions_per_step):
            curve.append(trainer.train_step(batch))
        row = {"epoch": epoch}
        if config.eval_every_epoch:
            row.update(evaluate_params(trainer.params, dataset, "val").to_dict())
        epoch_metrics.append(row)
        log.info("epoch %d: %s", epoch, {k: v for k, v in row.items() if k != "counts"})
        if config.checkpoint_every and epoch % config.checkpoint_every == 0:
            checkpoints.append((epoch, trainer.params.copy()))
    return FitResult(trainer.params, initial, curve, epoch_metrics, checkpoints, trainer.solver_calls)


def _metric_row(report: EvalReport) -> dict:
    return {"ndcg_at_10": report.ndcg_at_10, "recall_10_1": report.recall_10_1,
            "fast_slip_rate": report.fast_slip_rate, "ctr": report.ctr}


def spearman(x, y) -> float:
    if len(x) < 2 or np.all(np.asarray(y) == np.asarray(y)[0]):
        return float("nan")
    return float(spearmanr(x, y).statistic)


def ablation_sweep(dataset: Dataset, alphas: Sequence[float], config: TrainConfig,
                   include_pareto: bool = True) -> List[dict]:
    """One fixed-weight fit per alpha plus one Pareto fit, each scored on the test split.

    Distinct alphas share the base seed so rows differ only by the weight;
    a repeated alpha gets a fresh seed per repetition.
    """
    for a in alphas:
        if not 0.5 <= a <= 1.0:
            raise ConfigError(f"fixed alpha_ltr must lie in [0.5, 1.0], got {a}")
    rows = []
    seen: Dict[float, int] = {}
    for a in alphas:
        rep = seen.get(a, 0)
        seen[a] = rep + 1
        cfg = config.replace(mode="fixed", alpha_ltr=float(a), seed=config.seed + 1000 * rep)
        res = fit(dataset, cfg)
        rows.append({"model": "fixed", "alpha_ltr": float(a), "seed": cfg.seed,
                     "mean_alpha_ltr": res.mean_alpha()[0],
                     **_metric_row(evaluate_params(res.params, dataset))})
    if include_pareto:
        cfg = config.replace(mode="pareto")
        res = fit(dataset, cfg)
        rows.append({"model": "pareto", "alpha_ltr": float("nan"), "seed": cfg.seed,
                     "mean_alpha_ltr": res.mean_alpha()[0],
                     **_metric_row(evaluate_params(res.params, dataset))})
    return rows


def memory_strength_sweep(dataset: Dataset, retentions: Sequence[float], config: TrainConfig) -> List[dict]:
    """One Pareto fit per one-day retention value."""
    for r in retentions:
        if not 0.0 < r < 1.0:
            raise ConfigError(f"retention L must lie in (0, 1), got {r}")
    rows = []
    for r in retentions:
        cfg = config.replace(mode="pareto", forgetting=config.forgetting.with_retention(float(r)))
        res = fit(dataset, cfg)
        rows.append({"retention_L": float(r), "strength_S": cfg.forgetting.curve.strength_S,
                     "seed": cfg.seed, "mean_alpha_ltr": res.mean_alpha()[0],
                     **_metric_row(evaluate_params(res.params, dataset))})
    return rows


def trend(rows: List[dict], x_key: str, metrics=("ndcg_at_10", "fast_slip_rate")) -> Dict[str, float]:
    """Spearman correlation of each metric against ``x_key`` over the given rows."""
    xs = [r[x_key] for r in rows]
    return {m: spearman(xs, [r[m] for r in rows]) for m in metrics}
