import math
from concurrent.futures import ThreadPoolExecutor
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import softmax

from .config import SearchConfig
from .errors import ConfigurationError
from .expression import (
    Arity, BINARY_OPERATORS, UNARY_OPERATORS, ExpressionInstance, OperatorId, OperatorSequence,
    TreeTemplate, build_template, mse_loss, mse_loss_and_grad,
)
from .monitoring import RunLogger, SearchHistory, StageMetrics
from .numerics import (
    AdamState, CosineSchedule, DenseNet, Optimizer, adam_step, backward, cosine_lr, forward,
    lbfgs_refine,
)
from .simulation import NOISE_MOMENTS, NoiseKind, RegressionSet, TransitionPairs, drift_targets, \
    estimate_noise_center


class Controller:
    """Безусловное распределение над последовательностями операторов.

    Один линейный слой над постоянным входом; выход разбит на блоки
    логитов, по одному на слот шаблона (сначала унарные, затем бинарные).
    hidden > 0 добавляет скрытый ReLU-слой такой ширины.
    """

    def __init__(self, template: TreeTemplate, hidden: int = 0,
                 rng: Optional[np.random.Generator] = None, token_dim: int = 1):
        self.template = template
        self.slot_ops: List[List[OperatorId]] = []
        self.blocks: List[Tuple[int, int]] = []
        offset = 0
        for kind in template.slot_kinds:
            ops = list((UNARY_OPERATORS if kind == Arity.UNARY else BINARY_OPERATORS).values())
            self.slot_ops.append(ops)
            self.blocks.append((offset, offset + len(ops)))
            offset += len(ops)

        self.token = np.ones(token_dim)
        sizes = [token_dim, hidden, offset] if hidden > 0 else [token_dim, offset]
        self.net = DenseNet(sizes, "relu", rng)

    @property
    def output_size(self) -> int:
        return self.blocks[-1][1]

    def logits(self) -> np.ndarray:
        return self.net(self.token)

    def distributions(self) -> List[np.ndarray]:
        logits = self.logits()
        return [softmax(logits[start:end]) for start, end in self.blocks]

    def entropy(self) -> float:
        total = 0.0
        for probs in self.distributions():
            nz = probs[probs > 0]
            total -= float(np.sum(nz * np.log(nz)))
        return total


class SampledSequence:
    def __init__(self, sequence: OperatorSequence, choices: List[int], log_prob: float):
        self.sequence = sequence
        self.choices = choices
        self.log_prob = log_prob

    def __repr__(self) -> str:
        return f"SampledSequence({list(self.sequence.key)}, log_prob={self.log_prob:.4f})"


def sample_sequences(ctrl: Controller, epsilon: float, batch: int,
                     rng: np.random.Generator) -> List[SampledSequence]:
    """ε-greedy выборка: каждый слот независимо равномерен с вероятностью ε"""
    if batch < 1:
        raise ConfigurationError("batch must be >= 1")
    dists = ctrl.distributions()
    sampled = []
    for _ in range(batch):
        choices, log_prob = [], 0.0
        for probs in dists:
            if rng.random() < epsilon:
                choice = int(rng.integers(len(probs)))
            else:
                choice = int(rng.choice(len(probs), p=probs))
            choices.append(choice)
            log_prob += math.log(max(float(probs[choice]), 1e-300))
        ops = [ctrl.slot_ops[slot][c] for slot, c in enumerate(choices)]
        sampled.append(SampledSequence(OperatorSequence(ctrl.template, ops), choices, log_prob))
    return sampled


def policy_update(ctrl: Controller, batch: Sequence[SampledSequence], scores: Sequence[float],
                  quantile: float, optimizer: Optimizer) -> bool:
    """Risk-seeking REINFORCE: вклад дают только последовательности не ниже (1−v)-квантиля.

    Возвращает False, если шаг не делался (нет вклада или нефинитный градиент).
    """
    if not batch:
        raise ConfigurationError("policy_update needs a non-empty batch")
    scores = np.asarray(scores, dtype=np.float64)
    threshold = float(np.quantile(scores, 1.0 - quantile))
    weights = np.where(scores >= threshold, scores - threshold, 0.0)
    if not np.any(weights > 0):
        return False

    logits, cache = forward(ctrl.net, ctrl.token[None, :])
    dists = [softmax(logits[0, start:end]) for start, end in ctrl.blocks]
    g_logits = np.zeros(ctrl.output_size)
    for sampled, weight in zip(batch, weights):
        if weight <= 0:
            continue
        for (start, end), probs, choice in zip(ctrl.blocks, dists, sampled.choices):
            onehot = np.zeros(end - start)
            onehot[choice] = 1.0
            g_logits[start:end] += weight * (onehot - probs)
    g_logits /= len(batch)

    grad = backward(ctrl.net, cache, g_logits[None, :])
    params, ok = optimizer.step(ctrl.net.get_params(), -grad)
    if ok:
        ctrl.net.set_params(params)
    return ok


def score_from_loss(loss: float) -> float:
    if not np.isfinite(loss) or loss < 0:
        return 0.0
    return 1.0 / (1.0 + math.sqrt(loss))


class Candidate:
    def __init__(self, sequence: OperatorSequence, params: np.ndarray, input_dim: int, loss: float):
        self.sequence = sequence
        self.params = np.asarray(params, dtype=np.float64)
        self.input_dim = input_dim
        self.loss = float(loss) if np.isfinite(loss) else float("inf")
        self.score = score_from_loss(self.loss)
        self.order = -1

    @property
    def key(self) -> Tuple[str, ...]:
        return self.sequence.key

    @property
    def expression(self) -> ExpressionInstance:
        return ExpressionInstance(self.sequence, self.params, self.input_dim)

    def __repr__(self) -> str:
        return f"Candidate({list(self.key)}, score={self.score:.6f})"


def _minibatch(data: RegressionSet, size: Optional[int], rng: np.random.Generator):
    n = len(data)
    if size is None or size >= n:
        return data.x, data.y
    idx = rng.integers(0, n, size=size)
    return data.x[idx], data.y[idx]


def compute_score(seq: OperatorSequence, data: RegressionSet, cfg: SearchConfig,
                  rng: Optional[np.random.Generator] = None,
                  logger: Optional[RunLogger] = None) -> Candidate:
    """Обучение θ₁ для последовательности и Score = (1 + √L̂)⁻¹ в лучшей точке"""
    if len(data) == 0:
        raise ConfigurationError("compute_score needs non-empty data")
    rng = rng or np.random.default_rng(cfg.seed)
    d = data.input_dim
    expr = ExpressionInstance.initial(seq, d, rng if cfg.jitter > 0 else None, cfg.jitter)

    params = expr.params.copy()
    best_params = params.copy()
    best_loss = mse_loss(expr, data.x, data.y)
    optimizer = Optimizer(cfg.score_optimizer, params.size, cfg.score_lr)

    for it in range(cfg.score_iters):
        x, y = _minibatch(data, cfg.score_batch, rng)
        loss, grad = mse_loss_and_grad(expr.with_params(params), x, y)
        if not np.isfinite(loss):
            break
        params, ok = optimizer.step(params, grad)
        if not ok:
            break
        if (it + 1) % cfg.score_eval_every == 0 or it == cfg.score_iters - 1:
            full = mse_loss(expr.with_params(params), data.x, data.y)
            if full < best_loss:
                best_loss, best_params = full, params.copy()

    if cfg.use_lbfgs and cfg.lbfgs_iters > 0 and np.isfinite(best_loss):
        n = len(data)
        if n > cfg.lbfgs_max_points:
            idx = rng.choice(n, size=cfg.lbfgs_max_points, replace=False)
            x, y = data.x[idx], data.y[idx]
        else:
            x, y = data.x, data.y
        result = lbfgs_refine(lambda p: mse_loss_and_grad(expr.with_params(p), x, y),
                              best_params, max_iters=cfg.lbfgs_iters, logger=logger)
        if result.improved:
            full = mse_loss(expr.with_params(result.params), data.x, data.y)
            if full < best_loss:
                best_loss, best_params = full, result.params

    return Candidate(seq, best_params, d, best_loss)


class CandidatePool:
    """Не более N кандидатов без повторов; порядок: score по убыванию, затем порядок обнаружения"""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ConfigurationError("Pool capacity must be >= 1")
        self.capacity = capacity
        self.entries: Dict[Tuple[str, ...], Candidate] = {}
        self._counter = 0

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, sequence: OperatorSequence) -> bool:
        return sequence.key in self.entries

    @property
    def full(self) -> bool:
        return len(self.entries) >= self.capacity

    @property
    def min_score(self) -> float:
        return min((c.score for c in self.entries.values()), default=0.0)

    @property
    def best_score(self) -> float:
        return max((c.score for c in self.entries.values()), default=0.0)

    def ordered(self) -> List[Candidate]:
        return sorted(self.entries.values(), key=lambda c: (-c.score, c.order))

    def insert(self, candidate: Candidate) -> bool:
        key = candidate.key
        existing = self.entries.get(key)
        if existing is not None:
            if candidate.score > existing.score:
                candidate.order = existing.order
                self.entries[key] = candidate
                return True
            return False

        if self.full:
            worst = min(self.entries.values(), key=lambda c: (c.score, -c.order))
            if candidate.score <= worst.score:
                return False
            del self.entries[worst.key]

        candidate.order = self._counter
        self._counter += 1
        self.entries[key] = candidate
        return True


def pool_insert(pool: CandidatePool, candidate: Candidate) -> CandidatePool:
    pool.insert(candidate)
    return pool


class RefinedCandidate:
    def __init__(self, expression: ExpressionInstance, loss: float, initial_loss: float,
                 diverged: bool = False, order: int = 0):
        self.expression = expression
        self.loss = loss
        self.initial_loss = initial_loss
        self.diverged = diverged
        self.order = order

    def __repr__(self) -> str:
        return f"RefinedCandidate({list(self.expression.sequence.key)}, loss={self.loss:.6g})"


def _refine_one(candidate: Candidate, data: RegressionSet, cfg: SearchConfig,
                rng: np.random.Generator) -> RefinedCandidate:
    expr = candidate.expression
    start_params = expr.params.copy()
    start_loss = mse_loss(expr, data.x, data.y)
    best_loss, best_params = start_loss, start_params
    if cfg.refine_iters == 0:
        return RefinedCandidate(expr, start_loss, start_loss, order=candidate.order)

    state = AdamState(start_params.size, lr=cfg.refine_lr)
    schedule = CosineSchedule(cfg.refine_lr, cfg.refine_iters)
    params = start_params.copy()
    diverged = False
    for step in range(cfg.refine_iters):
        x, y = _minibatch(data, cfg.refine_batch, rng)
        loss, grad = mse_loss_and_grad(expr.with_params(params), x, y)
        if not np.isfinite(loss):
            diverged = True
            break
        params, ok = adam_step(state, params, grad, lr=cosine_lr(schedule, step))
        if not ok:
            diverged = True
            break
        if (step + 1) % cfg.score_eval_every == 0 or step == cfg.refine_iters - 1:
            full = mse_loss(expr.with_params(params), data.x, data.y)
            if not np.isfinite(full):
                diverged = True
                break
            if full < best_loss:
                best_loss, best_params = full, params.copy()

    if diverged:
        return RefinedCandidate(expr, start_loss, start_loss, diverged=True, order=candidate.order)
    return RefinedCandidate(expr.with_params(best_params), best_loss, start_loss, order=candidate.order)


def refine_pool(pool: CandidatePool, data: RegressionSet, cfg: SearchConfig, seed: Optional[int] = None,
                threads: int = 1, logger: Optional[RunLogger] = None) -> List[RefinedCandidate]:
    """Дообучение членов пула (Adam + косинусное расписание); итог по возрастанию потерь"""
    if len(pool) == 0:
        raise ConfigurationError("refine_pool needs a non-empty pool")
    seed = cfg.seed if seed is None else seed
    members = pool.ordered()
    if cfg.refine_top_k is not None:
        members = members[:cfg.refine_top_k]

    def task(item):
        index, candidate = item
        rng = np.random.default_rng(np.random.SeedSequence([seed, 2, index]))
        return _refine_one(candidate, data, cfg, rng)

    with ThreadPoolExecutor(max_workers=threads) as executor:
        refined = list(executor.map(task, enumerate(members)))

    diverged = sum(r.diverged for r in refined)
    if diverged and logger:
        logger.warning(f"{diverged} of {len(refined)} candidates diverged during refinement; "
                       f"pre-refinement parameters kept")
    return sorted(refined, key=lambda r: (r.loss, r.order))


class SearchReport:
    def __init__(self, expressions: List[ExpressionInstance], refined: List[List[RefinedCandidate]],
                 pools: List[CandidatePool], history: SearchHistory, centers: List[float]):
        self.expressions = expressions
        self.refined = refined
        self.pools = pools
        self.history = history
        self.centers = centers

    @property
    def losses(self) -> List[float]:
        return [r[0].loss for r in self.refined]


def regression_sets(pairs: TransitionPairs, cfg: SearchConfig,
                    noise_kind: NoiseKind = NoiseKind.GAUSSIAN,
                    logger: Optional[RunLogger] = None) -> List[RegressionSet]:
    """Цели по всем измерениям; для негауссова шума сдвиг оценивается по данным"""
    mean, std = NOISE_MOMENTS[NoiseKind(noise_kind)]
    center = cfg.center_noise if cfg.center_noise is not None else mean != 0
    sets = []
    for dim in range(pairs.dim):
        shift = estimate_noise_center(pairs, dim, mean / std, cfg.noise_bins) if center else 0.0
        if shift and logger:
            logger.info(f"dim {dim}: subtracting estimated noise mean {shift:.6g} from targets")
        sets.append(drift_targets(pairs, dim, shift))
    return sets


def _search_dim(dim: int, data: RegressionSet, cfg: SearchConfig, iterations: int,
                executor: ThreadPoolExecutor, threads: int, history: SearchHistory,
                logger: RunLogger, metrics: Optional[StageMetrics]) -> Tuple[CandidatePool, List[RefinedCandidate]]:
    # Одинаковые сиды для всех измерений
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0]))
    ctrl = Controller(build_template(cfg.depth), cfg.controller_hidden,
                      rng=np.random.default_rng(np.random.SeedSequence([cfg.seed, 1])))
    optimizer = Optimizer("adam", ctrl.net.n_params, cfg.controller_lr)
    pool = CandidatePool(cfg.pool_size)
    scored: Dict[Tuple[str, ...], Candidate] = {}

    for it in range(iterations):
        batch = sample_sequences(ctrl, cfg.epsilon, cfg.batch_size, rng)
        fresh = [(k, s.sequence) for k, s in enumerate(batch) if s.sequence.key not in scored]

        def task(item, it=it):
            k, seq = item
            task_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, it, k]))
            return compute_score(seq, data, cfg, task_rng, logger)

        for candidate in executor.map(task, fresh):
            scored[candidate.key] = candidate
            if metrics:
                metrics.increment("candidates_scored")
                if not np.isfinite(candidate.loss):
                    metrics.increment("nonfinite_candidates")

        candidates = [scored[s.sequence.key] for s in batch]
        policy_update(ctrl, batch, [c.score for c in candidates], cfg.quantile, optimizer)
        for candidate in candidates:
            pool.insert(candidate)

        entropy = ctrl.entropy()
        history.record(dim, it, pool.best_score, pool.min_score, entropy)
        if (it + 1) % 10 == 0 or it == iterations - 1:
            logger.debug(f"dim {dim} iter {it + 1}/{iterations}: best={pool.best_score:.6f} "
                         f"pool_min={pool.min_score:.6f} entropy={entropy:.4f}")

    refined = refine_pool(pool, data, cfg, threads=threads, logger=logger)
    return pool, refined


def run_search(datasets: Sequence[RegressionSet], cfg: SearchConfig, iterations: Optional[int] = None,
               threads: int = 1, logger: Optional[RunLogger] = None,
               metrics: Optional[StageMetrics] = None) -> SearchReport:
    """Независимый поиск FEX для каждого выходного измерения"""
    iterations = iterations if iterations is not None else cfg.iterations
    if iterations is None or iterations < 1:
        raise ConfigurationError("search requires >= 1 iteration")
    if not datasets:
        raise ConfigurationError("run_search needs at least one regression set")
    logger = logger or RunLogger("fexsde.search")
    history = SearchHistory()

    expressions, refined_all, pools = [], [], []
    with ThreadPoolExecutor(max_workers=threads) as executor:
        for dim, data in enumerate(datasets):
            pool, refined = _search_dim(dim, data, cfg, iterations, executor, threads, history,
                                          logger, metrics)
            best = refined[0]
            logger.info(f"dim {dim}: best {list(best.expression.sequence.key)} loss={best.loss:.6g}")
            expressions.append(best.expression)
            refined_all.append(refined)
            pools.append(pool)

    return SearchReport(expressions, refined_all, pools, history, [d.center for d in datasets])
