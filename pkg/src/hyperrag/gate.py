"""Retrieval gating and document relevance filtering.

The gate computes a confidence sigma as the maximum softmax probability
over a finite candidate-answer set, compares it against a learned
threshold theta (strictly greater skips retrieval; ties retrieve), and
scores per-document relevance with a small two-layer head trained by a
contrastive log-likelihood loss.  A pluggable Scorer stands in for the
large multimodal model that would produce raw answer/document scores at
full scale.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .alignment import EmbeddingTable, KnowledgeItem, Query
from .errors import ConfigurationError, ContractViolation, DivergenceError
from .geometry import geodesic_distance

LOG_CLAMP = 1e-12
THETA_GRID = [round(i / 100.0, 2) for i in range(101)]


def sigmoid(x: float) -> float:
    if x >= 0.0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


class Scorer:
    """Deterministic raw-score interface over (query, item-or-answer) pairs."""

    def score(self, query: Query, target) -> float:
        raise NotImplementedError


class EmbeddingSimilarityScorer(Scorer):
    """Negative geodesic distance between the query embedding and the
    target's embedding; graph vertices go through the graph-modality map."""

    def __init__(self, table: EmbeddingTable):
        self.table = table

    def score(self, query: Query, target) -> float:
        q_pt = self.table.embed_query(query)
        if isinstance(target, KnowledgeItem):
            t_pt = self.table.embed_item(target)
        elif hasattr(target, "features"):
            t_pt = self.table.embed_features(
                np.asarray(target.features, dtype=float), "graph_triplet"
            )
        else:
            raise ContractViolation(f"cannot embed scoring target {target!r}")
        return -geodesic_distance(q_pt, t_pt)


class FeatureDotScorer(Scorer):
    """Mean dot product of the target features against the query's visual
    and textual blocks, truncated to the common length."""

    def score(self, query: Query, target) -> float:
        feats = np.asarray(getattr(target, "features"), dtype=float)
        total = 0.0
        for block in (query.visual_features, query.text_features):
            m = min(block.size, feats.size)
            total += float(block[:m] @ feats[:m])
        return 0.5 * total


class TableLookupScorer(Scorer):
    """Fixed (query id, target key) -> score table; the test and synthetic
    stand-in for model-produced scores."""

    def __init__(self, scores: dict[tuple[str, str], float]):
        self.scores = dict(scores)

    @staticmethod
    def key_of(target) -> str:
        return target.id if hasattr(target, "id") else str(target)

    def score(self, query: Query, target) -> float:
        key = (query.id, self.key_of(target))
        if key not in self.scores:
            raise ContractViolation(f"no score entry for {key}")
        return self.scores[key]


def max_softmax(raw) -> float:
    """Maximum softmax probability of a raw score vector."""
    raw = np.asarray(raw, dtype=float)
    if raw.size == 0:
        raise ContractViolation("max_softmax requires at least one score")
    if not np.all(np.isfinite(raw)):
        raise ContractViolation("candidate scores must be finite")
    shifted = raw - raw.max()
    probs = np.exp(shifted)
    return float(probs.max() / probs.sum())


def confidence(scorer: Scorer, query: Query, candidates: list) -> float:
    """Maximum softmax probability over the candidates' raw scores."""
    if not candidates:
        raise ContractViolation("confidence requires at least one candidate answer")
    return max_softmax([scorer.score(query, c) for c in candidates])


def decide(sigma: float, theta: float) -> int:
    """0 = answer directly, 1 = retrieve.  Strict inequality: sigma equal
    to theta retrieves."""
    if not (0.0 <= sigma <= 1.0 and 0.0 <= theta <= 1.0):
        raise ContractViolation(f"sigma={sigma} and theta={theta} must lie in [0,1]")
    return 0 if sigma > theta else 1


class RelevanceHead:
    """Two-layer scoring head: w2 . tanh(W1 z + b1) + b2 over the
    concatenated (query features, item features) vector z."""

    def __init__(self, query_dim: int, item_dim: int, hidden: int = 512, seed: int = 0):
        if hidden < 1:
            raise ConfigurationError(f"hidden width must be >= 1, got {hidden}")
        self.query_dim = query_dim
        self.item_dim = item_dim
        self.hidden = hidden
        d = query_dim + item_dim
        rng = np.random.default_rng(seed)
        self.w1 = rng.uniform(-1.0, 1.0, size=(hidden, d)) / math.sqrt(d)
        self.b1 = np.zeros(hidden)
        self.w2 = rng.uniform(-1.0, 1.0, size=hidden) / math.sqrt(hidden)
        self.b2 = 0.0

    def input_vector(self, query: Query, doc: KnowledgeItem) -> np.ndarray:
        z = np.concatenate([query.combined_features, doc.features])
        if z.size != self.query_dim + self.item_dim:
            raise ConfigurationError(
                f"feature sizes ({query.combined_features.size} + {doc.features.size}) "
                f"do not match head configuration ({self.query_dim} + {self.item_dim})"
            )
        return z

    def raw_score(self, z: np.ndarray) -> float:
        return float(self.w2 @ np.tanh(self.w1 @ z + self.b1) + self.b2)

    def raw_and_backprop(self, z: np.ndarray):
        """Raw score plus a closure mapping d(loss)/d(raw) to parameter grads."""
        h = np.tanh(self.w1 @ z + self.b1)
        raw = float(self.w2 @ h + self.b2)

        def backprop(upstream: float, grads: dict[str, np.ndarray]) -> None:
            grads["w2"] += upstream * h
            grads["b2"] += upstream
            dh = upstream * self.w2 * (1.0 - h * h)
            grads["w1"] += np.outer(dh, z)
            grads["b1"] += dh

        return raw, backprop

    def zero_grads(self) -> dict[str, np.ndarray]:
        return {
            "w1": np.zeros_like(self.w1),
            "b1": np.zeros_like(self.b1),
            "w2": np.zeros_like(self.w2),
            "b2": np.zeros(1),
        }

    def named_params(self) -> list[tuple[str, np.ndarray]]:
        return [("w1", self.w1), ("b1", self.b1), ("w2", self.w2)]

    def apply_grads(self, grads: dict[str, np.ndarray], lr: float) -> None:
        self.w1 -= lr * grads["w1"]
        self.b1 -= lr * grads["b1"]
        self.w2 -= lr * grads["w2"]
        self.b2 -= lr * float(grads["b2"][0])

    # Flat views for finite-difference gradient checks.
    def get_flat(self) -> np.ndarray:
        return np.concatenate([self.w1.ravel(), self.b1, self.w2, [self.b2]])

    def set_flat(self, flat: np.ndarray) -> None:
        n1 = self.w1.size
        n2 = n1 + self.b1.size
        n3 = n2 + self.w2.size
        self.w1 = flat[:n1].reshape(self.w1.shape).copy()
        self.b1 = flat[n1:n2].copy()
        self.w2 = flat[n2:n3].copy()
        self.b2 = float(flat[n3])

    def flat_grads(self, grads: dict[str, np.ndarray]) -> np.ndarray:
        return np.concatenate(
            [grads["w1"].ravel(), grads["b1"], grads["w2"], grads["b2"]]
        )


def relevance(head: RelevanceHead, query: Query, doc: KnowledgeItem) -> float:
    """sigmoid of the head's raw score; strictly inside (0, 1)."""
    return sigmoid(head.raw_score(head.input_vector(query, doc)))


def filter_relevant(
    head: RelevanceHead, query: Query, docs: list[KnowledgeItem]
) -> list[KnowledgeItem]:
    """Order-preserving subset of docs with relevance strictly above 0.5."""
    return [doc for doc in docs if relevance(head, query, doc) > 0.5]


CrmBatch = list[tuple[Query, list[KnowledgeItem], list[KnowledgeItem]]]


def crm_loss(head: RelevanceHead, batch: CrmBatch) -> float:
    loss, _ = crm_loss_and_grads(head, batch, want_grads=False)
    return loss


def crm_loss_and_grads(head: RelevanceHead, batch: CrmBatch, want_grads: bool = True):
    """Contrastive loss summed over queries:
    -(sum log r_i over positives + sum log(1 - r_j) over negatives),
    log arguments clamped below at 1e-12."""
    grads = head.zero_grads() if want_grads else None
    total = 0.0
    for query, positives, negatives in batch:
        if not positives and not negatives:
            raise ContractViolation(
                f"query {query.id!r} carries neither positive nor negative documents"
            )
        for doc, is_pos in [(d, True) for d in positives] + [(d, False) for d in negatives]:
            z = head.input_vector(query, doc)
            raw, backprop = head.raw_and_backprop(z)
            r = sigmoid(raw)
            p = r if is_pos else 1.0 - r
            total += -math.log(max(p, LOG_CLAMP))
            if want_grads and p > LOG_CLAMP:
                # d(-log r)/d raw = r - 1 for positives; r for negatives.
                upstream = (r - 1.0) if is_pos else r
                backprop(upstream, grads)
    return total, grads


def fit_theta(pairs: list[tuple[float, bool]]) -> tuple[float, float]:
    """Grid-search theta over {0.00, 0.01, ..., 1.00} maximizing gating
    accuracy on (sigma, needs_retrieval) pairs; ties resolve to the lowest
    theta.  Returns (theta, accuracy)."""
    if not pairs:
        raise ContractViolation("fit_theta requires at least one (sigma, label) pair")
    best_theta, best_acc = THETA_GRID[0], -1.0
    for theta in THETA_GRID:
        correct = sum(
            1 for sigma, needs in pairs if (decide(sigma, theta) == 1) == bool(needs)
        )
        acc = correct / len(pairs)
        if acc > best_acc:
            best_theta, best_acc = theta, acc
    return best_theta, best_acc


@dataclass(frozen=True)
class CrmConfig:
    hidden: int = 512
    lr: float = 0.1
    epochs: int = 200
    seed: int = 0
    batch_size: int = 0  # 0 = full batch

    def validate(self):
        if self.lr <= 0:
            raise ConfigurationError(f"lr must be positive, got {self.lr}")
        if self.epochs < 1:
            raise ConfigurationError("epochs must be >= 1")
        if self.hidden < 1:
            raise ConfigurationError("hidden must be >= 1")


@dataclass
class CrmTrace:
    epoch_losses: list[float] = field(default_factory=list)
    theta_accuracy: float = 0.0


def train_crm(
    labeled: CrmBatch,
    gating_pairs: list[tuple[float, bool]],
    config: CrmConfig,
    query_dim: int,
    item_dim: int,
) -> tuple[RelevanceHead, float, CrmTrace]:
    """Gradient descent on the contrastive loss, then a held-out grid
    search for theta; deterministic given config.seed."""
    config.validate()
    if not labeled:
        raise ContractViolation("train_crm requires a labeled corpus")
    n_pos = sum(len(p) for _, p, _ in labeled)
    n_neg = sum(len(n) for _, _, n in labeled)
    if n_pos == 0 or n_neg == 0:
        raise ContractViolation(
            f"labeled corpus needs both positives and negatives (got {n_pos} pos, {n_neg} neg)"
        )
    head = RelevanceHead(query_dim, item_dim, hidden=config.hidden, seed=config.seed)
    rng = np.random.default_rng(config.seed)
    trace = CrmTrace()
    step = 0
    for _epoch in range(config.epochs):
        if config.batch_size <= 0:
            batches = [labeled]
        else:
            order = rng.permutation(len(labeled))
            batches = [
                [labeled[i] for i in order[s : s + config.batch_size]]
                for s in range(0, len(labeled), config.batch_size)
            ]
        for batch in batches:
            loss, grads = crm_loss_and_grads(head, batch)
            if not np.isfinite(loss):
                raise DivergenceError("relevance-head loss is non-finite", step=step)
            head.apply_grads(grads, config.lr)
            step += 1
        trace.epoch_losses.append(crm_loss(head, labeled))
    theta, acc = fit_theta(gating_pairs)
    trace.theta_accuracy = acc
    return head, theta, trace
