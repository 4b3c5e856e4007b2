"""Modality encoders into H^n, geodesic alignment loss, and top-k retrieval.

Queries and knowledge items are embedded through per-modality affine maps
(weight matrix + bias) into spatial coordinates, then lifted onto the
hyperboloid.  Alignment training pulls each query toward its positive items
by minimizing the mean geodesic distance; retrieval ranks a corpus by
ascending distance with item-id tie-breaking.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import (
    ConfigurationError,
    ContractViolation,
    DivergenceError,
    InvalidPointError,
)
from .geometry import (
    LorentzPoint,
    distance_spatial_grad,
    distances_to_rows,
    geodesic_distance,
    lift_spatial,
    project_to_hyperboloid,
)

MODALITIES = ("visual", "textual", "graph_triplet")
QUERY_KEY = "query"
# Modalities whose items may appear as alignment positives.
POSITIVE_MODALITIES = ("visual", "textual")


def _clean_features(features, name: str) -> np.ndarray:
    arr = np.asarray(features, dtype=float)
    if arr.ndim != 1 or arr.size == 0:
        raise ContractViolation(f"{name} must be a nonempty 1-D vector, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ContractViolation(f"{name} contains non-finite values")
    arr = arr.copy()
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class KnowledgeItem:
    """One knowledge-base entry: raw features plus its modality."""

    id: str
    modality: str
    features: np.ndarray

    def __post_init__(self):
        if self.modality not in MODALITIES:
            raise ContractViolation(
                f"unknown modality {self.modality!r}; expected one of {MODALITIES}"
            )
        object.__setattr__(self, "features", _clean_features(self.features, "features"))


@dataclass(frozen=True)
class Query:
    """An input query carrying a visual and a textual feature block."""

    id: str
    visual_features: np.ndarray
    text_features: np.ndarray

    def __post_init__(self):
        object.__setattr__(
            self, "visual_features", _clean_features(self.visual_features, "visual_features")
        )
        object.__setattr__(
            self, "text_features", _clean_features(self.text_features, "text_features")
        )

    @property
    def combined_features(self) -> np.ndarray:
        """Concatenated (visual, textual) block fed to the query encoder."""
        return np.concatenate([self.visual_features, self.text_features])


class EmbeddingTable:
    """One affine map per modality plus one for queries, each followed by
    the hyperboloid lift.

    Weights are initialized uniformly in +/- 1/sqrt(input_dim) with zero
    bias, which keeps initial embeddings near the origin where the metric
    is well-conditioned.
    """

    def __init__(self, dim: int, input_dims: dict[str, int], seed: int = 0):
        if dim < 2:
            raise ConfigurationError(f"embedding dimension must be >= 2, got {dim}")
        expected = set(MODALITIES) | {QUERY_KEY}
        if set(input_dims) != expected:
            raise ConfigurationError(
                f"input_dims keys {sorted(input_dims)} != required {sorted(expected)}"
            )
        self.dim = dim
        self.input_dims = dict(input_dims)
        rng = np.random.default_rng(seed)
        self.weight: dict[str, np.ndarray] = {}
        self.bias: dict[str, np.ndarray] = {}
        for key in MODALITIES + (QUERY_KEY,):
            d_in = input_dims[key]
            if d_in < 1:
                raise ConfigurationError(f"input dimension for {key!r} must be >= 1")
            bound = 1.0 / np.sqrt(d_in)
            self.weight[key] = rng.uniform(-bound, bound, size=(dim, d_in))
            self.bias[key] = np.zeros(dim)

    @classmethod
    def for_corpus(
        cls,
        queries: list[Query],
        items: list[KnowledgeItem],
        dim: int,
        seed: int = 0,
        graph_feature_dim: int | None = None,
    ) -> "EmbeddingTable":
        """Infer per-modality input dimensions from a corpus sample."""
        if not queries:
            raise ContractViolation("cannot infer query dimensions from an empty query list")
        dims: dict[str, int] = {QUERY_KEY: queries[0].combined_features.size}
        for item in items:
            dims.setdefault(item.modality, item.features.size)
        if graph_feature_dim is not None:
            dims["graph_triplet"] = graph_feature_dim
        # Modalities absent from the corpus default to the query block size
        # so the table always carries all four maps.
        for key in MODALITIES:
            dims.setdefault(key, dims[QUERY_KEY])
        return cls(dim, dims, seed=seed)

    def copy(self) -> "EmbeddingTable":
        dup = object.__new__(EmbeddingTable)
        dup.dim = self.dim
        dup.input_dims = dict(self.input_dims)
        dup.weight = {k: v.copy() for k, v in self.weight.items()}
        dup.bias = {k: v.copy() for k, v in self.bias.items()}
        return dup

    def named_params(self) -> list[tuple[str, np.ndarray]]:
        """Stable (name, array) listing for generic optimizers."""
        out = []
        for key in MODALITIES + (QUERY_KEY,):
            out.append((f"weight.{key}", self.weight[key]))
            out.append((f"bias.{key}", self.bias[key]))
        return out

    def spatial(self, features: np.ndarray, key: str) -> np.ndarray:
        if key not in self.weight:
            raise ConfigurationError(f"unknown modality {key!r}; known: {sorted(self.weight)}")
        f = np.asarray(features, dtype=float)
        if f.shape != (self.input_dims[key],):
            raise ContractViolation(
                f"feature length {f.shape} does not match {key!r} input dim "
                f"({self.input_dims[key]})"
            )
        return self.weight[key] @ f + self.bias[key]

    def embed_features(self, features: np.ndarray, key: str) -> LorentzPoint:
        return project_to_hyperboloid(self.spatial(features, key))

    def embed_query(self, query: Query) -> LorentzPoint:
        return self.embed_features(query.combined_features, QUERY_KEY)

    def embed_item(self, item: KnowledgeItem) -> LorentzPoint:
        return self.embed_features(item.features, item.modality)


def embed(table: EmbeddingTable, features, modality: str) -> LorentzPoint:
    """Encode raw features of the given modality (or 'query') into H^n."""
    return table.embed_features(np.asarray(features, dtype=float), modality)


def embed_corpus_rows(table: EmbeddingTable, items: list[KnowledgeItem]) -> np.ndarray:
    """Hyperboloid coordinates for every item, stacked as (m, dim+1) rows."""
    m = len(items)
    spatial = np.empty((m, table.dim))
    by_mod: dict[str, list[int]] = {}
    for idx, item in enumerate(items):
        by_mod.setdefault(item.modality, []).append(idx)
    for mod, idxs in by_mod.items():
        feats = np.stack([items[i].features for i in idxs])
        if feats.shape[1] != table.input_dims[mod]:
            raise ContractViolation(
                f"feature length {feats.shape[1]} does not match {mod!r} input dim"
            )
        spatial[idxs] = feats @ table.weight[mod].T + table.bias[mod]
    return lift_spatial(spatial)


@dataclass(frozen=True)
class AlignmentConfig:
    dim: int = 128
    lr: float = 1e-4
    epochs: int = 20
    batch_size: int = 32
    seed: int = 0
    # Full-batch descent with backtracking halving; guarantees a
    # non-increasing loss trace at the cost of stochasticity.
    line_search: bool = False
    restarts: int = 1

    def validate(self):
        if self.lr <= 0:
            raise ConfigurationError(f"lr must be positive, got {self.lr}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigurationError("epochs and batch_size must be >= 1")
        if self.dim < 2:
            raise ConfigurationError(f"dim must be >= 2, got {self.dim}")
        if self.restarts < 1:
            raise ConfigurationError("restarts must be >= 1")


@dataclass
class AlignmentTrace:
    """Per-epoch full-corpus loss values plus restart diagnostics.

    restart_final_losses records (never asserts) whether independent
    restarts land at the same loss level.
    """

    epoch_losses: list[float] = field(default_factory=list)
    restart_final_losses: list[float] = field(default_factory=list)


Batch = list[tuple[Query, list[KnowledgeItem]]]


def _check_batch(batch: Batch) -> None:
    if not batch:
        raise ContractViolation("geo_loss batch is empty")
    for query, positives in batch:
        if not positives:
            raise ContractViolation(f"query {query.id!r} has no positive items")
        for item in positives:
            if item.modality not in POSITIVE_MODALITIES:
                raise ContractViolation(
                    f"positive {item.id!r} has modality {item.modality!r}; "
                    f"positives must be one of {POSITIVE_MODALITIES}"
                )


def geo_loss(table: EmbeddingTable, batch: Batch) -> float:
    """Mean over queries of the per-modality mean geodesic distance to the
    query's positive items (missing modalities contribute 0)."""
    loss, _ = _geo_loss_and_grads(table, batch, want_grads=False)
    return loss


def geo_loss_and_grads(table: EmbeddingTable, batch: Batch):
    """Batch-mean loss plus per-parameter gradient arrays."""
    return _geo_loss_and_grads(table, batch)


def _geo_loss_and_grads(table: EmbeddingTable, batch: Batch, want_grads: bool = True):
    _check_batch(batch)
    grads = None
    if want_grads:
        grads = {name: np.zeros_like(arr) for name, arr in table.named_params()}
    total = 0.0
    inv_b = 1.0 / len(batch)
    for query, positives in batch:
        q_feat = query.combined_features
        q_pt = table.embed_features(q_feat, QUERY_KEY)
        for mod in POSITIVE_MODALITIES:
            group = [it for it in positives if it.modality == mod]
            if not group:
                continue
            coeff = inv_b / len(group)
            for item in group:
                i_pt = table.embed_item(item)
                total += coeff * geodesic_distance(q_pt, i_pt)
                if not want_grads:
                    continue
                gq = coeff * distance_spatial_grad(q_pt, i_pt)
                gi = coeff * distance_spatial_grad(i_pt, q_pt)
                grads[f"weight.{QUERY_KEY}"] += np.outer(gq, q_feat)
                grads[f"bias.{QUERY_KEY}"] += gq
                grads[f"weight.{mod}"] += np.outer(gi, item.features)
                grads[f"bias.{mod}"] += gi
    return total, grads


@dataclass(frozen=True)
class AlignmentCorpus:
    """Queries, items, and the query-id -> positive-item-ids relation."""

    queries: list[Query]
    items: list[KnowledgeItem]
    positives: dict[str, list[str]]

    def batches_source(self) -> Batch:
        by_id = {item.id: item for item in self.items}
        out: Batch = []
        for query in self.queries:
            ids = self.positives.get(query.id, [])
            missing = [i for i in ids if i not in by_id]
            if missing:
                raise ContractViolation(
                    f"positives for query {query.id!r} reference unknown items {missing}"
                )
            out.append((query, [by_id[i] for i in ids]))
        return out


def _apply_step(table: EmbeddingTable, grads: dict[str, np.ndarray], lr: float) -> None:
    for name, arr in table.named_params():
        arr -= lr * grads[name]


def train_alignment(
    corpus: AlignmentCorpus, config: AlignmentConfig
) -> tuple[EmbeddingTable, AlignmentTrace]:
    """Fit the embedding maps by stochastic (or line-searched full-batch)
    gradient descent on geo_loss; deterministic given config.seed."""
    config.validate()
    if not corpus.queries or not corpus.items:
        raise ContractViolation("training corpus must contain queries and items")
    table, trace = _train_once(corpus, config, config.seed)
    if config.restarts > 1:
        trace.restart_final_losses.append(trace.epoch_losses[-1])
        for extra in range(1, config.restarts):
            _, t2 = _train_once(corpus, config, config.seed + extra)
            trace.restart_final_losses.append(t2.epoch_losses[-1])
    return table, trace


def _train_once(
    corpus: AlignmentCorpus, config: AlignmentConfig, seed: int
) -> tuple[EmbeddingTable, AlignmentTrace]:
    table = EmbeddingTable.for_corpus(corpus.queries, corpus.items, config.dim, seed=seed)
    pairs = corpus.batches_source()
    rng = np.random.default_rng(seed)
    trace = AlignmentTrace()
    step = 0
    for _epoch in range(config.epochs):
        if config.line_search:
            _line_search_epoch(table, pairs)
        else:
            order = rng.permutation(len(pairs))
            for start in range(0, len(pairs), config.batch_size):
                batch = [pairs[i] for i in order[start : start + config.batch_size]]
                try:
                    loss, grads = _geo_loss_and_grads(table, batch)
                except InvalidPointError as exc:
                    # Parameters blew past the representable range; surface
                    # as divergence with the offending step attached.
                    raise DivergenceError(f"alignment diverged: {exc}", step=step) from exc
                if not np.isfinite(loss):
                    raise DivergenceError("alignment loss is non-finite", step=step)
                _apply_step(table, grads, config.lr)
                step += 1
        try:
            epoch_loss = geo_loss(table, pairs)
        except InvalidPointError as exc:
            raise DivergenceError(f"alignment diverged: {exc}", step=step) from exc
        if not np.isfinite(epoch_loss):
            raise DivergenceError("alignment loss is non-finite", step=step)
        trace.epoch_losses.append(epoch_loss)
    return table, trace


def _line_search_epoch(table: EmbeddingTable, pairs: Batch) -> None:
    loss, grads = _geo_loss_and_grads(table, pairs)
    trial = 1.0
    for _ in range(40):
        candidate = table.copy()
        _apply_step(candidate, grads, trial)
        new_loss, _ = _geo_loss_and_grads(candidate, pairs, want_grads=False)
        if np.isfinite(new_loss) and new_loss <= loss + 1e-12:
            table.weight = candidate.weight
            table.bias = candidate.bias
            return
        trial *= 0.5
    # No improving step found: keep parameters (converged plateau).


def retrieve_topk(
    table: EmbeddingTable, query: Query, corpus: list[KnowledgeItem], k: int
) -> list[tuple[KnowledgeItem, float]]:
    """Exhaustive top-k scan by ascending geodesic distance; ties broken by
    ascending item id."""
    if not corpus:
        raise ContractViolation("retrieve_topk called on an empty corpus")
    if k < 0 or k > len(corpus):
        raise ContractViolation(f"k={k} outside [0, corpus size {len(corpus)}]")
    if k == 0:
        return []
    rows = embed_corpus_rows(table, corpus)
    dists = distances_to_rows(table.embed_query(query), rows)
    order = sorted(range(len(corpus)), key=lambda i: (dists[i], corpus[i].id))
    return [(corpus[i], float(dists[i])) for i in order[:k]]
