"""End-to-end orchestration: two-phase training, gated inference, and
evaluation over synthetic corpora.

Phase 1 fits the relevance head and the gating threshold on labeled
pairs.  Phase 2 iterates query mini-batches; queries gated to retrieval
accrue the relevance, alignment, and generation terms of the weighted
total loss, while directly-answerable queries accrue the generation
term only.  Non-manifold parameters (embedding maps, relevance head,
generator) share one decoupled-weight-decay adaptive optimizer.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, replace

import numpy as np

from .alignment import (
    EmbeddingTable,
    KnowledgeItem,
    Query,
    embed_corpus_rows,
    geo_loss_and_grads,
)
from .errors import ConfigurationError, ContractViolation, HyperRagError
from .gate import (
    CrmConfig,
    FeatureDotScorer,
    RelevanceHead,
    crm_loss_and_grads,
    decide,
    filter_relevant,
    max_softmax,
    train_crm,
)
from .generation import (
    GenExample,
    TokenSequence,
    ToyGenerator,
    apply_query_dropout,
    example_losses_and_grad,
    gen_loss,
    generate,
    query_dropout_prob,
)
from .geometry import distances_to_rows
from .io import canonical_json_bytes
from .spectral import (
    KnowledgeGraph,
    RelevanceVector,
    Subgraph,
    extract_triplets,
    laplacian,
    refine_subgraph,
    relevance_vector,
    smallest_eigenpairs,
)
from .synth import CorpusBundle

LOSS_IDENTITY_ATOL = 1e-9


@dataclass(frozen=True)
class PipelineConfig:
    dim: int = 128
    k: int = 10
    alpha: float = 0.7
    beta: float = 0.3
    gamma: float = 0.3
    lr: float = 1e-4
    weight_decay: float = 1e-2
    epochs: int = 20
    batch_size: int = 32
    seed: int = 0
    eta_frac: float = 0.5
    rho: float = 1.0
    epsilon: float = 0.01
    t_decay: float = 100.0
    top_k: int = 10
    crm_hidden: int = 128
    crm_lr: float = 0.02
    crm_epochs: int = 80
    crm_batch_size: int = 8
    ot_max_iter: int = 2000
    # Algorithm-literal mode trains alignment only on retrieval-gated
    # queries; the flag widens it to every query.
    align_on_all_queries: bool = False

    def validate(self) -> None:
        if not (0.0 < self.beta < 1.0 and 0.0 < self.gamma < 1.0):
            raise ConfigurationError(
                f"beta and gamma must lie strictly inside (0, 1), got {self.beta}, {self.gamma}"
            )
        if self.beta + self.gamma >= 1.0:
            raise ConfigurationError(
                f"beta + gamma must be < 1, got {self.beta + self.gamma}"
            )
        if not 0.0 < self.alpha < 1.0:
            raise ConfigurationError(f"alpha must lie strictly inside (0, 1), got {self.alpha}")
        if self.lr <= 0 or self.crm_lr <= 0:
            raise ConfigurationError("learning rates must be positive")
        if self.weight_decay < 0:
            raise ConfigurationError(f"weight_decay must be nonnegative, got {self.weight_decay}")
        if min(self.epochs, self.batch_size, self.crm_epochs, self.crm_batch_size) < 1:
            raise ConfigurationError("epochs and batch_size must be >= 1")
        if self.dim < 2 or self.k < 1 or self.top_k < 1 or self.crm_hidden < 1:
            raise ConfigurationError("dim, k, top_k, and crm_hidden must be >= their minima")
        if not 0.0 < self.eta_frac <= 1.0:
            raise ConfigurationError(f"eta_frac must lie in (0, 1], got {self.eta_frac}")
        if self.rho < 0:
            raise ConfigurationError(f"rho must be nonnegative, got {self.rho}")
        if self.epsilon <= 0 or self.t_decay <= 0:
            raise ConfigurationError("epsilon and t_decay must be positive")
        if self.ot_max_iter < 1:
            raise ConfigurationError("ot_max_iter must be >= 1")


def total_loss(l_crm: float, l_geo: float, l_gen: float, beta: float, gamma: float) -> float:
    """Weighted sum of the three training components."""
    if not (0.0 < beta < 1.0 and 0.0 < gamma < 1.0) or beta + gamma >= 1.0:
        raise ConfigurationError(
            f"loss weights beta={beta}, gamma={gamma} must be interior with beta + gamma < 1"
        )
    return beta * l_crm + gamma * l_geo + (1.0 - beta - gamma) * l_gen


@dataclass(frozen=True)
class LossReport:
    """Per-epoch component means; the weighted identity is re-checked on
    the logged values themselves."""

    step: int
    l_crm: float
    l_geo: float
    l_local: float
    l_global: float
    l_gen: float
    l_total: float
    delta_rate: float
    beta: float
    gamma: float

    def __post_init__(self):
        expected = (
            self.beta * self.l_crm
            + self.gamma * self.l_geo
            + (1.0 - self.beta - self.gamma) * self.l_gen
        )
        if abs(expected - self.l_total) > LOSS_IDENTITY_ATOL:
            raise ContractViolation(
                f"loss identity violated at step {self.step}: "
                f"{self.l_total} != {expected}"
            )
        if not 0.0 <= self.delta_rate <= 1.0:
            raise ContractViolation(f"delta rate {self.delta_rate} outside [0, 1]")

    def to_record(self) -> dict:
        return {
            "step": self.step,
            "l_crm": self.l_crm,
            "l_geo": self.l_geo,
            "l_local": self.l_local,
            "l_global": self.l_global,
            "l_gen": self.l_gen,
            "l_total": self.l_total,
            "delta_rate": self.delta_rate,
        }


@dataclass(frozen=True)
class EvalReport:
    accuracy: float
    coherence: float
    retrieval_precision: float
    mean_latency_s: float

    def __post_init__(self):
        if not 0.0 <= self.accuracy <= 1.0:
            raise ContractViolation(f"accuracy {self.accuracy} outside [0, 1]")
        if not -1.0 <= self.coherence <= 1.0 + 1e-12:
            raise ContractViolation(f"coherence {self.coherence} outside [-1, 1]")
        if not 0.0 <= self.retrieval_precision <= 1.0:
            raise ContractViolation(
                f"retrieval precision {self.retrieval_precision} outside [0, 1]"
            )

    def canonical_bytes(self) -> bytes:
        """Reproducibility digest; wall-clock latency is excluded."""
        return canonical_json_bytes(
            {
                "accuracy": self.accuracy,
                "coherence": self.coherence,
                "retrieval_precision": self.retrieval_precision,
            }
        )

    def to_record(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "coherence": self.coherence,
            "retrieval_precision": self.retrieval_precision,
            "mean_latency_s": self.mean_latency_s,
        }


class AdamW:
    """First/second-moment adaptive steps with decoupled weight decay,
    updating the registered arrays in place."""

    def __init__(
        self,
        params: dict[str, np.ndarray],
        lr: float,
        weight_decay: float = 0.0,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
    ):
        if lr <= 0:
            raise ConfigurationError(f"lr must be positive, got {lr}")
        if weight_decay < 0:
            raise ConfigurationError(f"weight_decay must be nonnegative, got {weight_decay}")
        self.params = dict(params)
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = {name: np.zeros_like(arr) for name, arr in self.params.items()}
        self.v = {name: np.zeros_like(arr) for name, arr in self.params.items()}

    def step(self, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for name, p in self.params.items():
            g = grads.get(name)
            if g is None:
                continue
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * self.weight_decay * p
            p -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


@dataclass
class PipelineComponents:
    """Everything needed to answer queries after training."""

    config: PipelineConfig
    table: EmbeddingTable
    head: RelevanceHead
    theta: float
    generator: ToyGenerator
    graph: KnowledgeGraph
    eigvecs: np.ndarray
    items: list[KnowledgeItem]
    token_embeddings: np.ndarray
    confidence: dict[str, np.ndarray]
    answer_len: int
    crm_enabled: bool = True

    def with_crm(self, enabled: bool) -> "PipelineComponents":
        return replace(self, crm_enabled=enabled)


@dataclass(frozen=True)
class AnswerResult:
    tokens: TokenSequence
    sigma: float
    delta: int
    retrieved_ids: tuple[str, ...]
    used_ids: tuple[str, ...]
    subgraph: Subgraph | None
    timings: dict[str, float]


def _with_stage(exc: HyperRagError, stage: str) -> HyperRagError:
    """Tag a propagating error with the pipeline stage, preserving type."""
    if exc.args and isinstance(exc.args[0], str):
        exc.args = (f"{exc.args[0]} [stage: {stage}]",) + exc.args[1:]
    else:
        exc.args = (f"[stage: {stage}]",) + exc.args
    return exc


def _sigma_of_scores(scores) -> float:
    """Max-softmax confidence; absent candidate scores force retrieval."""
    if scores is None or len(scores) == 0:
        return 0.0
    return max_softmax(scores)


def _retrieve_ranked(
    table: EmbeddingTable,
    query: Query,
    items: list[KnowledgeItem],
    rows: np.ndarray,
    k: int,
) -> list[KnowledgeItem]:
    dists = distances_to_rows(table.embed_query(query), rows)
    order = sorted(range(len(items)), key=lambda i: (dists[i], items[i].id))
    return [items[i] for i in order[:k]]


def _triplet_points(table: EmbeddingTable, graph: KnowledgeGraph, triplets):
    """Embed triplets through a full-graph refinement-free path: one
    synthetic record per triplet via extract_triplets on a covering set."""
    # extract_triplets needs a Subgraph; a full-vertex indicator covers all.
    full = Subgraph(
        selected=tuple(sorted(v.id for v in graph.vertices)),
        indicator=np.ones(graph.size),
        induced_edges=(),
        eta=0.0,
        relevance_mass=0.0,
        objective=0.0,
    )
    wanted = set(triplets)
    records = extract_triplets(full, graph, table)
    return {
        (rec.head, rec.relation, rec.tail): rec.point
        for rec in records
        if (rec.head, rec.relation, rec.tail) in wanted
    }


def run_training(
    config: PipelineConfig, bundle: CorpusBundle
) -> tuple[PipelineComponents, list[LossReport]]:
    """Two-phase training; deterministic per config.seed."""
    config.validate()
    queries = bundle.queries
    items = bundle.items
    by_id = bundle.item_by_id()
    vocab = bundle.token_embeddings.shape[0]
    answer_len = bundle.spec.answer_len
    graph_dim = bundle.graph.vertices[0].features.size if bundle.graph.size else None

    table = EmbeddingTable.for_corpus(
        queries, items, config.dim, seed=config.seed, graph_feature_dim=graph_dim
    )

    # Phase 1: relevance head + gating threshold on the labeled pairs.
    per_query: dict[str, tuple[list, list]] = {}
    for qid, iid, flag in bundle.labels:
        pos, neg = per_query.setdefault(qid, ([], []))
        (pos if flag else neg).append(by_id[iid])
    query_of = {q.id: q for q in queries}
    labeled = [
        (query_of[qid], pos, neg) for qid, (pos, neg) in per_query.items()
    ]
    gating_pairs = [
        (_sigma_of_scores(bundle.confidence.get(qid)), needs)
        for qid, needs in bundle.gating
    ]
    head, theta, _ = train_crm(
        labeled,
        gating_pairs,
        CrmConfig(
            hidden=config.crm_hidden,
            lr=config.crm_lr,
            epochs=config.crm_epochs,
            seed=config.seed,
            batch_size=config.crm_batch_size,
        ),
        query_dim=queries[0].combined_features.size,
        item_dim=items[0].features.size,
    )

    # Phase 2 fixtures: gating decisions, relevance vectors, and refined
    # subgraphs are table-independent, so they are computed once.
    eig_k = min(config.k, max(bundle.graph.size, 1))
    _, eigvecs = smallest_eigenpairs(laplacian(bundle.graph), eig_k, seed=config.seed)
    scorer = FeatureDotScorer()
    sigma = {q.id: _sigma_of_scores(bundle.confidence.get(q.id)) for q in queries}
    delta = {qid: decide(s, theta) for qid, s in sigma.items()}
    kept_triplets: dict[str, list] = {}
    for q in queries:
        if delta[q.id] != 1:
            continue
        r = relevance_vector(q, bundle.graph, scorer)
        sub = refine_subgraph(
            bundle.graph,
            r,
            eta=config.eta_frac * r.total,
            k=config.k,
            rho=config.rho,
            eigvecs=eigvecs,
            seed=config.seed,
        )
        sel = sub.vertex_set
        kept_triplets[q.id] = [
            trip for trip in bundle.graph.triplets if trip[0] in sel and trip[2] in sel
        ]

    generator = ToyGenerator(vocab, 2 * config.dim)
    params: dict[str, np.ndarray] = dict(table.named_params())
    for name, arr in head.named_params():
        params[f"crm.{name}"] = arr
    b2_buf = np.array([head.b2])
    params["crm.b2"] = b2_buf
    params["gen.weight"] = generator.weight
    params["gen.bias"] = generator.bias
    optimizer = AdamW(params, lr=config.lr, weight_decay=config.weight_decay)

    gold = {
        qid: TokenSequence(tuple(toks), vocab) for qid, toks in bundle.qa.items()
    }
    rng = np.random.default_rng(config.seed)
    reports: list[LossReport] = []
    n = len(queries)
    gated_total = sum(delta[q.id] for q in queries)

    for epoch in range(1, config.epochs + 1):
        p_t = query_dropout_prob(epoch - 1, config.t_decay)
        sums = {"crm": 0.0, "geo": 0.0, "local": 0.0, "global": 0.0}
        counts = {"crm": 0, "geo": 0}
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            batch = [queries[i] for i in order[start : start + config.batch_size]]
            n_batch = len(batch)
            # Only parameter groups that accrue a gradient this batch are
            # stepped (and decayed); an all-answerable corpus therefore
            # leaves the head and embedding maps untouched.
            grads: dict[str, np.ndarray] = {
                "gen.weight": np.zeros_like(generator.weight),
                "gen.bias": np.zeros_like(generator.bias),
            }
            gated = [q for q in batch if delta[q.id] == 1]

            geo_batch = batch if config.align_on_all_queries else gated
            geo_pairs = [
                (q, [by_id[i] for i in bundle.positives.get(q.id, [])])
                for q in geo_batch
                if bundle.positives.get(q.id)
            ]
            if geo_pairs:
                try:
                    geo_mean, geo_grads = geo_loss_and_grads(table, geo_pairs)
                except HyperRagError as exc:
                    raise _with_stage(exc, f"phase2 epoch {epoch} alignment")
                scale = config.gamma * len(geo_pairs) / n_batch
                for name, g in geo_grads.items():
                    grads[name] = grads.get(name, 0.0) + scale * g
                sums["geo"] += geo_mean * len(geo_pairs)
                counts["geo"] += len(geo_pairs)

            crm_batch = [
                (q, *per_query[q.id]) for q in gated if q.id in per_query
            ]
            if crm_batch:
                try:
                    crm_sum, crm_grads = crm_loss_and_grads(head, crm_batch)
                except HyperRagError as exc:
                    raise _with_stage(exc, f"phase2 epoch {epoch} relevance")
                scale = config.beta / n_batch
                for name, g in crm_grads.items():
                    grads[f"crm.{name}"] = grads.get(f"crm.{name}", 0.0) + scale * g
                sums["crm"] += crm_sum
                counts["crm"] += len(crm_batch)

            rows = embed_corpus_rows(table, items)
            point_cache = {}
            batch_trips = set()
            for q in gated:
                batch_trips.update(kept_triplets.get(q.id, []))
            if batch_trips:
                point_cache = _triplet_points(table, bundle.graph, batch_trips)

            gen_scale = (1.0 - config.beta - config.gamma) / n_batch
            for idx_in_batch, q in enumerate(batch):
                evidence = []
                if delta[q.id] == 1:
                    ranked = _retrieve_ranked(
                        table, q, items, rows, min(config.top_k, len(items))
                    )
                    used = filter_relevant(head, q, ranked)
                    evidence = [table.embed_item(doc) for doc in used]
                    evidence += [point_cache[t] for t in kept_triplets.get(q.id, [])]
                example = GenExample(q, tuple(evidence), gold[q.id])
                dropped = apply_query_dropout(
                    q, p_t, seed=(config.seed, epoch, int(order[start + idx_in_batch]))
                )
                try:
                    local, sqrt_cost, grad_logits, z = example_losses_and_grad(
                        generator,
                        table,
                        example,
                        dropped,
                        bundle.token_embeddings,
                        config.alpha,
                        config.epsilon,
                        config.ot_max_iter,
                    )
                except HyperRagError as exc:
                    raise _with_stage(exc, f"phase2 epoch {epoch} generation")
                sums["local"] += local
                sums["global"] += sqrt_cost
                grads["gen.weight"] += gen_scale * np.outer(grad_logits, z)
                grads["gen.bias"] += gen_scale * grad_logits

            optimizer.step(grads)
            head.b2 = float(b2_buf[0])

        l_crm = sums["crm"] / counts["crm"] if counts["crm"] else 0.0
        l_geo = sums["geo"] / counts["geo"] if counts["geo"] else 0.0
        l_local = sums["local"] / n
        l_global = sums["global"] / n
        l_gen = gen_loss(l_local, l_global, config.alpha)
        reports.append(
            LossReport(
                step=epoch,
                l_crm=l_crm,
                l_geo=l_geo,
                l_local=l_local,
                l_global=l_global,
                l_gen=l_gen,
                l_total=total_loss(l_crm, l_geo, l_gen, config.beta, config.gamma),
                delta_rate=gated_total / n,
                beta=config.beta,
                gamma=config.gamma,
            )
        )

    components = PipelineComponents(
        config=config,
        table=table,
        head=head,
        theta=theta,
        generator=generator,
        graph=bundle.graph,
        eigvecs=eigvecs,
        items=items,
        token_embeddings=bundle.token_embeddings,
        confidence=dict(bundle.confidence),
        answer_len=answer_len,
    )
    return components, reports


def answer_query(
    components: PipelineComponents, query: Query, max_len: int | None = None
) -> AnswerResult:
    """Gate, optionally retrieve/filter/refine, then decode; per-stage
    wall-clock timings are recorded."""
    cfg = components.config
    max_len = components.answer_len if max_len is None else max_len
    timings: dict[str, float] = {}

    t0 = time.perf_counter()
    if components.crm_enabled:
        sigma = _sigma_of_scores(components.confidence.get(query.id))
        delta = decide(sigma, components.theta)
    else:
        sigma = 0.0
        delta = 1
    timings["gate"] = time.perf_counter() - t0

    retrieved: tuple[str, ...] = ()
    used: tuple[str, ...] = ()
    subgraph = None
    evidence = []
    if delta == 1:
        t0 = time.perf_counter()
        try:
            rows = embed_corpus_rows(components.table, components.items)
            ranked = _retrieve_ranked(
                components.table,
                query,
                components.items,
                rows,
                min(cfg.top_k, len(components.items)),
            )
        except HyperRagError as exc:
            raise _with_stage(exc, "retrieve")
        retrieved = tuple(doc.id for doc in ranked)
        timings["retrieve"] = time.perf_counter() - t0

        t0 = time.perf_counter()
        try:
            docs = (
                filter_relevant(components.head, query, ranked)
                if components.crm_enabled
                else ranked
            )
        except HyperRagError as exc:
            raise _with_stage(exc, "filter")
        used = tuple(doc.id for doc in docs)
        timings["filter"] = time.perf_counter() - t0

        t0 = time.perf_counter()
        try:
            r = relevance_vector(query, components.graph, FeatureDotScorer())
            subgraph = refine_subgraph(
                components.graph,
                r,
                eta=cfg.eta_frac * r.total,
                k=cfg.k,
                rho=cfg.rho,
                eigvecs=components.eigvecs,
                seed=cfg.seed,
            )
            records = extract_triplets(subgraph, components.graph, components.table)
        except HyperRagError as exc:
            raise _with_stage(exc, "refine")
        timings["refine"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    try:
        if delta == 1:
            evidence = [components.table.embed_item(doc) for doc in docs]
            evidence += [rec.point for rec in records]
        q_point = components.table.embed_query(query)
        tokens, _ = generate(
            components.generator,
            components.table,
            q_point,
            evidence,
            [],
            max_len,
        )
    except HyperRagError as exc:
        raise _with_stage(exc, "generate")
    timings["generate"] = time.perf_counter() - t0

    return AnswerResult(
        tokens=tokens,
        sigma=sigma,
        delta=delta,
        retrieved_ids=retrieved,
        used_ids=used,
        subgraph=subgraph,
        timings=timings,
    )


def _mean_token_embedding(tokens, token_embeddings: np.ndarray) -> np.ndarray:
    return token_embeddings[np.array(tokens, dtype=int)].mean(axis=0)


def evaluate(
    components: PipelineComponents,
    bundle: CorpusBundle,
    query_ids: list[str] | None = None,
) -> EvalReport:
    """Exact-match accuracy, cosine coherence in the bundle's token
    embedding space, micro-averaged retrieval precision over gated
    queries, and mean per-query latency."""
    queries = bundle.queries
    if query_ids is not None:
        wanted = set(query_ids)
        queries = [q for q in queries if q.id in wanted]
    if not queries:
        raise ContractViolation("evaluation query set is empty")

    hits = 0
    coherence_sum = 0.0
    used_total = 0
    used_relevant = 0
    latency_sum = 0.0
    for q in queries:
        t0 = time.perf_counter()
        result = answer_query(components, q)
        latency_sum += time.perf_counter() - t0

        gold = bundle.qa[q.id]
        hits += int(result.tokens.tokens == tuple(gold))
        a = _mean_token_embedding(result.tokens.tokens, bundle.token_embeddings)
        b = _mean_token_embedding(gold, bundle.token_embeddings)
        denom = np.linalg.norm(a) * np.linalg.norm(b)
        coherence_sum += float(a @ b / denom) if denom > 0 else 0.0

        if result.delta == 1:
            relevant = bundle.relevance.get(q.id, frozenset())
            used_total += len(result.used_ids)
            used_relevant += sum(1 for iid in result.used_ids if iid in relevant)

    n = len(queries)
    precision = used_relevant / used_total if used_total else 0.0
    return EvalReport(
        accuracy=hits / n,
        coherence=min(coherence_sum / n, 1.0),
        retrieval_precision=precision,
        mean_latency_s=latency_sum / n,
    )
