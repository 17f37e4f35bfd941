"""Turn raw link-prediction scores into calibrated [0,1] memberships.

Three stages after scorer training:

  normalize   f_hat(h,r,:) = min(N * softmax(f(h,r,:)), 1); N is the train
              tail count of (h,r), or alpha when the pair is unseen
  adapt       f_tilde = min(W[h,r] * f_hat, 1) with W = exp(theta), theta
              fitted on complex-query training data
  pin         rows override known train/validation tails to exactly 1

Providers built here emit sparse rows for the fuzzy engine and the tensor
builder. With theta = 0 the adapted provider reproduces the normalized one
bitwise, which the ablation tests rely on.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .dsl import QueryRecord
from .fuzzy import GradientTape, evaluate
from .graph import KnowledgeGraph
from .scorer import EmbeddingModel

log = logging.getLogger(__name__)

LOG_FLOOR = 1e-10

ABLATION_MODES = ("S12", "S123", "S1234")

# query shapes used to fit theta
ADAPTATION_STRUCTURES = ("1p", "2i", "3i", "2in", "3in")


class NormalizedScorer:
    """Scores mapped through a per-row scaled softmax into [0,1]."""

    def __init__(self, model: EmbeddingModel, kg: KnowledgeGraph, alpha: float = 0.1):
        if alpha <= 0:
            raise ValueError("alpha must be positive")
        if model.n_entities != kg.n_entities or model.n_relations != kg.n_relations:
            raise ValueError("model tables do not match the graph vocabularies")
        self.model = model
        self.kg = kg
        self.alpha = float(alpha)

    @property
    def n_entities(self) -> int:
        return self.model.n_entities

    @property
    def n_relations(self) -> int:
        return self.model.n_relations

    def scale(self, h: int, r: int) -> float:
        """N of the row: train tail count when positive, alpha fallback."""
        m = self.kg.tail_count(h, r)
        return float(m) if m > 0 else self.alpha

    def norm_row(self, h: int, r: int) -> np.ndarray:
        scores = self.model.score_rows([h], [r])[0]
        shifted = scores - scores.max()
        exp = np.exp(shifted)
        return np.minimum(self.scale(h, r) * exp / exp.sum(), 1.0)


@dataclass
class AdaptationMatrix:
    """Per-(h,r) log-scales; W = exp(theta) keeps the scales positive."""

    theta: np.ndarray

    @property
    def W(self) -> np.ndarray:
        return np.exp(self.theta)

    @classmethod
    def zeros(cls, n_entities: int, n_relations: int) -> "AdaptationMatrix":
        return cls(np.zeros((n_entities, n_relations), dtype=np.float64))

    def save(self, path) -> None:
        np.savez(path, version=np.array(1), theta=self.theta)

    @classmethod
    def load(cls, path) -> "AdaptationMatrix":
        with np.load(path) as data:
            if "version" not in data or int(data["version"]) != 1:
                raise ValueError(f"{path}: unsupported adaptation checkpoint version")
            return cls(data["theta"])


@dataclass
class CalibrationConfig:
    alpha: float = 0.1
    lr: float = 0.001
    epochs: int = 5
    batch_size: int = 1000
    structures: tuple[str, ...] = ADAPTATION_STRUCTURES
    log_floor: float = LOG_FLOOR
    eps: float = 0.0005     # support threshold for rows during adaptation
    seed: int = 0

    def __post_init__(self):
        if self.epochs > 5:
            raise ValueError("adaptation is capped at 5 epochs")


def _sparse_norm_row(scorer: NormalizedScorer, h: int, r: int, eps: float):
    dense = scorer.norm_row(h, r)
    idx = np.nonzero(dense > eps)[0].astype(np.int32)
    return idx, dense[idx]


class CalibratedRows:
    """Row provider over the full calibration chain.

    theta and pins are optional, giving the three ablation variants. Rows
    are recomputed per call; the tensor builder materializes them once.
    """

    def __init__(self, scorer: NormalizedScorer, theta: np.ndarray | None = None,
                 pins: dict[tuple[int, int], np.ndarray] | None = None,
                 eps: float = 0.0005):
        if not 0 <= eps < 1:
            raise ValueError("eps must lie in [0, 1)")
        self.scorer = scorer
        self.theta = theta
        self.pins = pins
        self.eps = float(eps)

    @property
    def n_entities(self) -> int:
        return self.scorer.n_entities

    @property
    def n_relations(self) -> int:
        return self.scorer.n_relations

    def pinned_tails(self, h: int, r: int) -> np.ndarray:
        if self.pins is None:
            return np.empty(0, dtype=np.int32)
        tails = self.pins.get((h, r))
        if tails is None:
            return np.empty(0, dtype=np.int32)
        return np.asarray(tails, dtype=np.int32)

    def row(self, h: int, r: int) -> tuple[np.ndarray, np.ndarray]:
        dense = self.scorer.norm_row(h, r)
        if self.theta is not None:
            dense = np.minimum(np.exp(self.theta[h, r]) * dense, 1.0)
        pinned = self.pinned_tails(h, r)
        if pinned.size:
            dense[pinned] = 1.0
        idx = np.nonzero(dense > self.eps)[0].astype(np.int32)
        return idx, dense[idx]


class _AdaptiveRows:
    """Training-time provider: fixed normalized support, live theta.

    The base support is thresholded once on the normalized rows so it stays
    stable while theta moves; values are recomputed against the current
    theta on every access.
    """

    def __init__(self, scorer: NormalizedScorer, theta: np.ndarray, eps: float):
        self.scorer = scorer
        self.theta = theta
        self.eps = float(eps)
        self._base: dict[tuple[int, int], tuple[np.ndarray, np.ndarray]] = {}

    @property
    def n_entities(self) -> int:
        return self.scorer.n_entities

    def base_row(self, h: int, r: int) -> tuple[np.ndarray, np.ndarray]:
        key = (h, r)
        row = self._base.get(key)
        if row is None:
            row = _sparse_norm_row(self.scorer, h, r, self.eps)
            self._base[key] = row
        return row

    def row(self, h: int, r: int) -> tuple[np.ndarray, np.ndarray]:
        idx, vals = self.base_row(h, r)
        return idx, np.minimum(np.exp(self.theta[h, r]) * vals, 1.0)

    def theta_grad(self, row_adjoints: dict[tuple[int, int], np.ndarray],
                   out: np.ndarray) -> None:
        """Chain d(loss)/d(row values) into d(loss)/d(theta), clamp-aware."""
        for (h, r), adj in row_adjoints.items():
            idx, vals = self.base_row(h, r)
            scaled = np.exp(self.theta[h, r]) * vals
            live = scaled < 1.0
            out[h, r] += float(np.sum(adj[idx] * scaled * live))


def query_loss_adjoint(values: np.ndarray, answers: np.ndarray,
                       log_floor: float = LOG_FLOOR) -> tuple[float, np.ndarray]:
    """Calibration loss of one query and its adjoint w.r.t. the answer vector.

    loss = -mean_{i in answers} log a_i - mean_{i not in answers} log(1 - a_i)
    with both logs floored; the flat side of the floor gets zero gradient.
    """
    n = values.shape[0]
    is_answer = np.zeros(n, dtype=bool)
    is_answer[answers] = True
    a = values[is_answer]
    b = 1.0 - values[~is_answer]
    seed = np.zeros(n, dtype=np.float64)
    loss = 0.0
    if a.size:
        loss -= float(np.mean(np.log(np.maximum(a, log_floor))))
        grad = np.where(a > log_floor, -1.0 / (a.size * np.maximum(a, log_floor)), 0.0)
        seed[is_answer] = grad
    if b.size:
        loss -= float(np.mean(np.log(np.maximum(b, log_floor))))
        grad = np.where(b > log_floor, 1.0 / (b.size * np.maximum(b, log_floor)), 0.0)
        seed[~is_answer] = grad
    return loss, seed


def adapt(scorer: NormalizedScorer, records: list[QueryRecord],
          config: CalibrationConfig) -> tuple[AdaptationMatrix, list[float]]:
    """Fit theta on complex-query training data with Adam; returns epoch losses.

    Only records whose structure is in config.structures participate.
    Answer sets are the records' own (train-graph) answers; non-answers are
    the full complement, no sampling.
    """
    usable = [rec for rec in records if rec.structure in config.structures
              and (rec.easy | rec.hard)]
    if not usable:
        raise ValueError("no training queries of the configured structures")
    n, m = scorer.n_entities, scorer.n_relations
    theta = np.zeros((n, m), dtype=np.float64)
    provider = _AdaptiveRows(scorer, theta, config.eps)
    adam_m = np.zeros_like(theta)
    adam_v = np.zeros_like(theta)
    beta1, beta2, adam_eps = 0.9, 0.999, 1e-8
    step = 0
    rng = np.random.default_rng(config.seed)
    answer_sets = [np.fromiter(sorted(rec.easy | rec.hard), dtype=np.int64)
                   for rec in usable]
    history: list[float] = []
    for epoch in range(config.epochs):
        order = rng.permutation(len(usable))
        total = 0.0
        for start in range(0, len(usable), config.batch_size):
            batch = order[start:start + config.batch_size]
            grad = np.zeros_like(theta)
            for q in batch:
                rec = usable[q]
                tape = GradientTape()
                vec = evaluate(rec.ast, provider, tape)
                loss, seed = query_loss_adjoint(
                    vec.values, answer_sets[q], config.log_floor
                )
                total += loss
                rows = tape.backward(vec, seed)
                provider.theta_grad(rows, grad)
            grad /= batch.size
            step += 1
            adam_m = beta1 * adam_m + (1 - beta1) * grad
            adam_v = beta2 * adam_v + (1 - beta2) * grad * grad
            m_hat = adam_m / (1 - beta1 ** step)
            v_hat = adam_v / (1 - beta2 ** step)
            theta -= config.lr * m_hat / (np.sqrt(v_hat) + adam_eps)
        mean_loss = total / len(usable)
        if not np.isfinite(mean_loss):
            raise FloatingPointError(f"non-finite adaptation loss at epoch {epoch}")
        history.append(mean_loss)
        log.debug("adaptation epoch %d: loss %.6f", epoch, mean_loss)
    return AdaptationMatrix(theta), history


def known_tails(kg: KnowledgeGraph) -> dict[tuple[int, int], np.ndarray]:
    """(h,r) -> tails seen in train or validation; the pin set."""
    return kg.adjacency(("train", "validation"))


def finalize(scorer: NormalizedScorer, adaptation: AdaptationMatrix | None,
             kg: KnowledgeGraph, eps: float = 0.0005) -> CalibratedRows:
    """Full calibration: adapted rows with known triplets pinned to 1."""
    theta = adaptation.theta if adaptation is not None else None
    return CalibratedRows(scorer, theta=theta, pins=known_tails(kg), eps=eps)


def ablation_provider(mode: str, scorer: NormalizedScorer,
                      adaptation: AdaptationMatrix | None,
                      kg: KnowledgeGraph, eps: float = 0.0005) -> CalibratedRows:
    """S12 = normalize only; S123 = + adaptation; S1234 = + pinning."""
    if mode == "S12":
        return CalibratedRows(scorer, eps=eps)
    if mode == "S123":
        if adaptation is None:
            raise ValueError("mode S123 needs an adaptation matrix")
        return CalibratedRows(scorer, theta=adaptation.theta, eps=eps)
    if mode == "S1234":
        if adaptation is None:
            raise ValueError("mode S1234 needs an adaptation matrix")
        return finalize(scorer, adaptation, kg, eps)
    raise ValueError(f"unknown ablation mode {mode!r}")
