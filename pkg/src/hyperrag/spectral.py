"""Graph Laplacian spectral machinery and query-relevant subgraph extraction.

The knowledge graph is refined per query by rounding a relaxed Rayleigh
quotient: sort vertices along smallest-eigenvalue Laplacian eigenvectors,
sweep prefix/suffix cuts, keep the candidates whose relevance mass clears
the floor eta, and pick the one minimizing

    sum_{(i,j) in E, i,j in S} w_ij (r_i - r_j)^2  +  rho * cut(S).

A Cheeger-style self-check verifies that the best sweep conductance of the
second normalized-Laplacian eigenvector never exceeds sqrt(2 * lambda_2).
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.linalg import eigh_tridiagonal

from .alignment import EmbeddingTable, Query
from .errors import (
    ContractViolation,
    HyperRagError,
    InfeasibleConstraintError,
    NumericalError,
)
from .gate import Scorer, sigmoid
from .geometry import LorentzPoint, exp_map, log_map, origin

DENSE_EIG_CUTOFF = 512
EIG_RESIDUAL_TOL = 1e-7
# Quantization used in sweep sort keys so that relabeling-level rounding
# noise cannot reorder vertices.
_SORT_QUANTUM = 1e-9
_FEASIBLE_ATOL = 1e-12


@dataclass(frozen=True)
class GraphVertex:
    id: str
    label: str
    features: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.features, dtype=float)
        if arr.ndim != 1 or not np.all(np.isfinite(arr)):
            raise ContractViolation(f"vertex {self.id!r} has invalid features")
        arr = arr.copy()
        arr.setflags(write=False)
        object.__setattr__(self, "features", arr)


@dataclass(frozen=True)
class KnowledgeGraph:
    """Undirected weighted graph with an overlaid triplet relation list.

    Edges are (u_id, v_id, weight >= 0) with no self-loops and at most one
    edge per unordered pair.
    """

    vertices: tuple[GraphVertex, ...]
    edges: tuple[tuple[str, str, float], ...]
    triplets: tuple[tuple[str, str, str], ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "vertices", tuple(self.vertices))
        object.__setattr__(self, "edges", tuple(self.edges))
        object.__setattr__(self, "triplets", tuple(self.triplets))
        index: dict[str, int] = {}
        for i, vert in enumerate(self.vertices):
            if vert.id in index:
                raise ContractViolation(f"duplicate vertex id {vert.id!r}")
            index[vert.id] = i
        seen: set[tuple[str, str]] = set()
        u_idx, v_idx, weights = [], [], []
        for u, v, w in self.edges:
            if u not in index or v not in index:
                raise ContractViolation(f"edge ({u!r}, {v!r}) references unknown vertices")
            if u == v:
                raise ContractViolation(f"self-loop on vertex {u!r}")
            if w < 0:
                raise ContractViolation(f"negative edge weight {w} on ({u!r}, {v!r})")
            key = (u, v) if u <= v else (v, u)
            if key in seen:
                raise ContractViolation(f"duplicate edge for pair {key}")
            seen.add(key)
            u_idx.append(index[u])
            v_idx.append(index[v])
            weights.append(float(w))
        for h, _rel, t in self.triplets:
            if h not in index or t not in index:
                raise ContractViolation(f"triplet ({h!r}, ..., {t!r}) references unknown vertices")
        object.__setattr__(self, "_index", index)
        object.__setattr__(self, "_u", np.array(u_idx, dtype=np.intp))
        object.__setattr__(self, "_v", np.array(v_idx, dtype=np.intp))
        object.__setattr__(self, "_w", np.array(weights, dtype=float))
        deg = np.zeros(len(self.vertices))
        np.add.at(deg, self._u, self._w)
        np.add.at(deg, self._v, self._w)
        object.__setattr__(self, "_degrees", deg)

    @property
    def size(self) -> int:
        return len(self.vertices)

    @property
    def degrees(self) -> np.ndarray:
        return self._degrees

    def vertex_index(self, vid: str) -> int:
        if vid not in self._index:
            raise ContractViolation(f"unknown vertex id {vid!r}")
        return self._index[vid]

    def edge_arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return self._u, self._v, self._w

    def adjacency(self) -> sp.csr_matrix:
        n = self.size
        rows = np.concatenate([self._u, self._v])
        cols = np.concatenate([self._v, self._u])
        vals = np.concatenate([self._w, self._w])
        return sp.csr_matrix((vals, (rows, cols)), shape=(n, n))


def connected_components(graph: KnowledgeGraph) -> int:
    n = graph.size
    if n == 0:
        return 0
    adj: list[list[int]] = [[] for _ in range(n)]
    u, v, _ = graph.edge_arrays()
    for a, b in zip(u, v):
        adj[a].append(b)
        adj[b].append(a)
    seen = np.zeros(n, dtype=bool)
    count = 0
    for start in range(n):
        if seen[start]:
            continue
        count += 1
        stack = [start]
        seen[start] = True
        while stack:
            node = stack.pop()
            for nb in adj[node]:
                if not seen[nb]:
                    seen[nb] = True
                    stack.append(nb)
    return count


def laplacian(graph: KnowledgeGraph):
    """L = D - A.  Dense ndarray up to 512 vertices, sparse CSR beyond."""
    adj = graph.adjacency()
    lap = sp.diags(graph.degrees) - adj
    if graph.size <= DENSE_EIG_CUTOFF:
        return np.asarray(lap.todense())
    return lap.tocsr()


def normalized_laplacian(graph: KnowledgeGraph):
    """I - D^{-1/2} A D^{-1/2}; zero-degree vertices get isolated zero rows."""
    deg = graph.degrees
    inv_sqrt = np.where(deg > 0, 1.0 / np.sqrt(np.where(deg > 0, deg, 1.0)), 0.0)
    adj = graph.adjacency()
    norm_adj = sp.diags(inv_sqrt) @ adj @ sp.diags(inv_sqrt)
    eye = sp.diags((deg > 0).astype(float))
    lap = eye - norm_adj
    if graph.size <= DENSE_EIG_CUTOFF:
        return np.asarray(lap.todense())
    return lap.tocsr()


def _matrix_norm_bound(mat) -> float:
    # Gershgorin bound on the spectral radius of a symmetric matrix.
    if sp.issparse(mat):
        return float(np.abs(mat).sum(axis=1).max())
    return float(np.abs(mat).sum(axis=1).max())


def smallest_eigenpairs(
    mat,
    k: int,
    dense_cutoff: int = DENSE_EIG_CUTOFF,
    seed: int = 0,
    tol: float = EIG_RESIDUAL_TOL,
) -> tuple[np.ndarray, np.ndarray]:
    """k smallest (eigenvalue, eigenvector) pairs of a symmetric matrix,
    eigenvalues ascending, eigenvectors orthonormal columns.

    Dense symmetric solve up to dense_cutoff; Lanczos with full
    re-orthogonalization and deflation beyond (matvec cap 50 * n).
    """
    n = mat.shape[0]
    if mat.shape[0] != mat.shape[1]:
        raise ContractViolation(f"matrix must be square, got {mat.shape}")
    if k < 1 or k > n:
        raise ContractViolation(f"k={k} outside [1, {n}]")
    if n <= dense_cutoff:
        dense = np.asarray(mat.todense()) if sp.issparse(mat) else np.asarray(mat, dtype=float)
        vals, vecs = np.linalg.eigh(dense)
        return vals[:k].copy(), vecs[:, :k].copy()
    return _lanczos_smallest(mat, k, seed=seed, tol=tol)


def _lanczos_smallest(mat, k: int, seed: int, tol: float) -> tuple[np.ndarray, np.ndarray]:
    """Deflated Lanczos: finds the k smallest eigenpairs one at a time,
    each chain fully re-orthogonalized against its own basis and all
    previously converged eigenvectors (so repeated eigenvalues are found
    copy by copy)."""
    n = mat.shape[0]
    norm_bound = max(_matrix_norm_bound(mat), 1e-30)
    # Work with B = cI - M so the smallest eigenvalues of M become the
    # extremal (largest) ones, where Lanczos converges first.
    c = norm_bound
    rng = np.random.default_rng(seed)
    max_matvecs = 50 * n
    matvecs = 0
    conv_vals: list[float] = []
    conv_vecs: list[np.ndarray] = []
    resid_tol = tol * norm_bound

    def deflate(vec: np.ndarray) -> np.ndarray:
        for prev in conv_vecs:
            vec = vec - (prev @ vec) * prev
        return vec

    while len(conv_vals) < k:
        v = deflate(rng.standard_normal(n))
        nrm = np.linalg.norm(v)
        if nrm < 1e-12:
            raise NumericalError("Lanczos start vector vanished under deflation")
        basis = [v / nrm]
        alphas: list[float] = []
        betas: list[float] = []
        found = None
        last_resid = math.inf
        max_chain = n - len(conv_vecs)
        for _ in range(max_chain):
            if matvecs >= max_matvecs:
                raise NumericalError(
                    f"eigen-solver hit the matvec cap {max_matvecs} "
                    f"(last residual estimate {last_resid:.3e})"
                )
            w = c * basis[-1] - (mat @ basis[-1])
            matvecs += 1
            alphas.append(float(basis[-1] @ w))
            # Full re-orthogonalization (two passes) against the converged
            # eigenvectors and the whole chain basis.
            for _pass in range(2):
                w = deflate(w)
                for q in basis:
                    w = w - (q @ w) * q
            beta = float(np.linalg.norm(w))
            theta, s_vecs = eigh_tridiagonal(np.array(alphas), np.array(betas))
            top = int(np.argmax(theta))
            last_resid = abs(beta * s_vecs[-1, top])
            if last_resid <= resid_tol or beta <= 1e-14 * norm_bound:
                ritz = np.column_stack(basis) @ s_vecs[:, top]
                ritz = deflate(ritz)
                ritz_norm = np.linalg.norm(ritz)
                if ritz_norm < 1e-12:
                    raise NumericalError("Ritz vector vanished under deflation")
                found = (c - float(theta[top]), ritz / ritz_norm)
                break
            betas.append(beta)
            basis.append(w / beta)
        if found is None:
            raise NumericalError(
                f"Lanczos chain exhausted without convergence "
                f"(residual estimate {last_resid:.3e}, tolerance {resid_tol:.3e})"
            )
        conv_vals.append(found[0])
        conv_vecs.append(found[1])
    order = np.argsort(conv_vals, kind="stable")
    vals = np.array([conv_vals[i] for i in order])
    vecs = np.column_stack([conv_vecs[i] for i in order])
    return vals, vecs


@dataclass(frozen=True)
class RelevanceVector:
    """Per-vertex relevance scores in [0, 1], aligned with graph order."""

    values: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.values, dtype=float)
        if arr.ndim != 1:
            raise ContractViolation("relevance values must form a 1-D vector")
        if not np.all(np.isfinite(arr)) or arr.min(initial=0.0) < 0.0 or arr.max(initial=0.0) > 1.0:
            raise ContractViolation("relevance entries must lie in [0, 1]")
        arr = arr.copy()
        arr.setflags(write=False)
        object.__setattr__(self, "values", arr)

    @property
    def total(self) -> float:
        return float(self.values.sum())


def relevance_vector(query: Query, graph: KnowledgeGraph, scorer: Scorer) -> RelevanceVector:
    """r_i = sigmoid(scorer(query, vertex_i)) for every vertex."""
    values = np.empty(graph.size)
    for i, vert in enumerate(graph.vertices):
        try:
            values[i] = sigmoid(scorer.score(query, vert))
        except HyperRagError:
            raise
        except Exception as exc:
            raise ContractViolation(f"scorer failed on vertex {vert.id!r}: {exc}") from exc
    return RelevanceVector(values)


@dataclass(frozen=True)
class Subgraph:
    """A selected vertex set with its induced edges and build parameters."""

    selected: tuple[str, ...]
    indicator: np.ndarray
    induced_edges: tuple[tuple[str, str, float], ...]
    eta: float
    relevance_mass: float
    objective: float
    fallback_used: bool = False

    @property
    def vertex_set(self) -> frozenset:
        return frozenset(self.selected)


def _coerce_relevance(graph: KnowledgeGraph, r) -> np.ndarray:
    if isinstance(r, RelevanceVector):
        arr = r.values
    else:
        arr = RelevanceVector(np.asarray(r, dtype=float)).values
    if arr.size != graph.size:
        raise ContractViolation(
            f"relevance length {arr.size} does not match vertex count {graph.size}"
        )
    return arr


def subgraph_objective(graph: KnowledgeGraph, members: np.ndarray, r, rho: float) -> float:
    """sum_{edges inside S} w (r_i - r_j)^2 + rho * cut(S) for a boolean
    membership vector."""
    r_arr = _coerce_relevance(graph, r)
    u, v, w = graph.edge_arrays()
    inside = members[u] & members[v]
    crossing = members[u] != members[v]
    smooth = float(np.sum(w[inside] * (r_arr[u[inside]] - r_arr[v[inside]]) ** 2))
    return smooth + rho * float(np.sum(w[crossing]))


def _prefix_profiles(graph: KnowledgeGraph, order: np.ndarray, r: np.ndarray, rho: float):
    """Vectorized sweep: objective(s) and relevance mass for every prefix
    size s = 0..n of the given vertex order."""
    n = graph.size
    u, v, w = graph.edge_arrays()
    pos = np.empty(n, dtype=np.intp)
    pos[order] = np.arange(n)
    if len(w):
        pu, pv = pos[u], pos[v]
        lo = np.minimum(pu, pv)
        hi = np.maximum(pu, pv)
        smooth_vals = w * (r[u] - r[v]) ** 2
        # An edge is internal to the prefix once both endpoints are in
        # (s >= hi+1) and crosses it while exactly one is (lo < s <= hi).
        d_smooth = np.zeros(n + 1)
        np.add.at(d_smooth, hi + 1, smooth_vals)
        internal = np.cumsum(d_smooth)[: n + 1]
        d_cut = np.zeros(n + 2)
        np.add.at(d_cut, lo + 1, w)
        np.add.at(d_cut, hi + 1, -w)
        cut = np.cumsum(d_cut)[: n + 1]
    else:
        internal = np.zeros(n + 1)
        cut = np.zeros(n + 1)
    mass = np.concatenate([[0.0], np.cumsum(r[order])])
    return internal + rho * cut, mass


def _canonical_sign(vec: np.ndarray) -> np.ndarray:
    pivot = int(np.argmax(np.abs(vec)))
    return -vec if vec[pivot] < 0 else vec


def _sweep_order(vec: np.ndarray, r: np.ndarray) -> np.ndarray:
    q = np.round(vec / _SORT_QUANTUM) * _SORT_QUANTUM
    return np.lexsort((np.arange(vec.size), np.round(r / _SORT_QUANTUM), q))


def refine_subgraph(
    graph: KnowledgeGraph,
    r,
    eta: float,
    k: int = 10,
    rho: float = 1.0,
    eigvecs: np.ndarray | None = None,
    seed: int = 0,
) -> Subgraph:
    """Sweep-cut rounding over the k smallest-eigenvalue eigenvectors with
    the relevance-mass feasibility filter sum_{i in S} r_i >= eta.

    Candidate pool: all prefix/suffix sweeps of each eigenvector, plus the
    empty set and the full set.  Ties resolve by objective, then set size,
    then lexicographic vertex ids.  If no proper sweep candidate is
    feasible the full set is returned with fallback_used set.
    """
    if eta < 0:
        raise ContractViolation(f"eta must be nonnegative, got {eta}")
    if k < 1:
        raise ContractViolation(f"k must be >= 1, got {k}")
    if rho < 0:
        raise ContractViolation(f"rho must be nonnegative, got {rho}")
    r_arr = _coerce_relevance(graph, r)
    n = graph.size
    total_mass = float(r_arr.sum())
    if eta > total_mass + _FEASIBLE_ATOL:
        raise InfeasibleConstraintError(
            f"eta={eta} exceeds total relevance mass {total_mass:.6g}"
        )
    if eigvecs is None:
        _, eigvecs = smallest_eigenpairs(laplacian(graph), min(k, n), seed=seed)
    # Each candidate is (objective, size, member index array).
    candidates: list[tuple[float, int, np.ndarray]] = []
    all_idx = np.arange(n)
    candidates.append((subgraph_objective(graph, np.ones(n, dtype=bool), r_arr, rho), n, all_idx))
    if 0.0 >= eta - _FEASIBLE_ATOL:
        candidates.append((0.0, 0, all_idx[:0]))
    proper_feasible = False
    for col in range(eigvecs.shape[1]):
        vec = _canonical_sign(eigvecs[:, col])
        for direction in (1, -1):
            order = _sweep_order(direction * vec, r_arr)
            objective, mass = _prefix_profiles(graph, order, r_arr, rho)
            # Proper prefixes only; infeasible ones are masked out.  The
            # per-sweep argmin matches the global (objective, size) order
            # because argmin returns the smallest prefix among ties.
            objs = np.where(mass[1:n] >= eta - _FEASIBLE_ATOL, objective[1:n], np.inf)
            if objs.size and np.isfinite(objs.min(initial=np.inf)):
                proper_feasible = True
                best_s = int(np.argmin(objs)) + 1
                candidates.append((float(objective[best_s]), best_s, order[:best_s]))
    best_obj, best_size = min((obj, size) for obj, size, _ in candidates)
    tied = [
        idxs
        for obj, size, idxs in candidates
        if obj == best_obj and size == best_size
    ]
    ids_of = lambda idxs: tuple(sorted(graph.vertices[i].id for i in idxs))
    best_ids = min(ids_of(idxs) for idxs in tied)
    fallback = not proper_feasible and best_size == n
    members = np.zeros(n, dtype=bool)
    members[[graph.vertex_index(i) for i in best_ids]] = True
    mass = float(r_arr[members].sum())
    if mass < eta - _FEASIBLE_ATOL:
        raise NumericalError("selected subgraph violates its relevance constraint")
    u, v, w = graph.edge_arrays()
    inside = members[u] & members[v]
    induced = tuple(
        (graph.vertices[a].id, graph.vertices[b].id, float(wt))
        for a, b, wt in zip(u[inside], v[inside], w[inside])
    )
    return Subgraph(
        selected=best_ids,
        indicator=members.astype(float),
        induced_edges=induced,
        eta=eta,
        relevance_mass=mass,
        objective=best_obj,
        fallback_used=fallback,
    )


def cut_size(graph: KnowledgeGraph, selected) -> float:
    """Total weight of edges with exactly one endpoint in the set."""
    members = _member_mask(graph, selected)
    u, v, w = graph.edge_arrays()
    crossing = members[u] != members[v]
    return float(np.sum(w[crossing]))


def conductance(graph: KnowledgeGraph, selected) -> float:
    """cut(S) / min(vol(S), vol(V \\ S)); requires a proper nonempty set."""
    members = _member_mask(graph, selected)
    size = int(members.sum())
    if size == 0 or size == graph.size:
        raise ContractViolation("conductance requires a proper nonempty vertex subset")
    cut = cut_size(graph, members)
    vol_s = float(graph.degrees[members].sum())
    vol_rest = float(graph.degrees[~members].sum())
    denom = min(vol_s, vol_rest)
    if denom == 0.0:
        return 0.0
    return cut / denom


def _member_mask(graph: KnowledgeGraph, selected) -> np.ndarray:
    if isinstance(selected, np.ndarray) and selected.dtype == bool:
        if selected.size != graph.size:
            raise ContractViolation("membership mask length mismatch")
        return selected
    members = np.zeros(graph.size, dtype=bool)
    for vid in selected:
        members[graph.vertex_index(vid)] = True
    return members


@dataclass(frozen=True)
class CheegerReport:
    lambda2_normalized: float
    lambda2_unnormalized: float
    sweep_conductance: float
    bound: float
    bound_holds: bool
    degenerate: bool


def cheeger_check(graph: KnowledgeGraph, seed: int = 0) -> CheegerReport:
    """Best sweep conductance of the second normalized-Laplacian
    eigenvector versus the sqrt(2 * lambda_2) bound.

    Disconnected graphs report lambda_2 = 0 and are flagged degenerate.
    """
    n = graph.size
    if n < 2:
        raise ContractViolation("cheeger_check needs at least 2 vertices")
    degenerate = connected_components(graph) != 1
    vals_n, vecs_n = smallest_eigenpairs(normalized_laplacian(graph), 2, seed=seed)
    vals_u, _ = smallest_eigenpairs(laplacian(graph), 2, seed=seed)
    lam2 = max(float(vals_n[1]), 0.0)
    # Sweep in D^{-1/2} v order, which carries the Cheeger guarantee.
    deg = graph.degrees
    scale = np.where(deg > 0, 1.0 / np.sqrt(np.where(deg > 0, deg, 1.0)), 1.0)
    y = vecs_n[:, 1] * scale
    order = _sweep_order(_canonical_sign(y), np.zeros(n))
    u, v, w = graph.edge_arrays()
    pos = np.empty(n, dtype=np.intp)
    pos[order] = np.arange(n)
    if len(w):
        pu, pv = pos[u], pos[v]
        lo = np.minimum(pu, pv)
        hi = np.maximum(pu, pv)
        d_cut = np.zeros(n + 2)
        np.add.at(d_cut, lo + 1, w)
        np.add.at(d_cut, hi + 1, -w)
        cuts = np.cumsum(d_cut)[: n + 1]
    else:
        cuts = np.zeros(n + 1)
    vol_prefix = np.concatenate([[0.0], np.cumsum(deg[order])])
    total_vol = vol_prefix[-1]
    best = math.inf
    for s in range(1, n):
        denom = min(vol_prefix[s], total_vol - vol_prefix[s])
        if denom <= 0.0:
            phi = 0.0 if cuts[s] == 0.0 else math.inf
        else:
            phi = cuts[s] / denom
        best = min(best, phi)
    bound = math.sqrt(2.0 * lam2)
    return CheegerReport(
        lambda2_normalized=lam2,
        lambda2_unnormalized=float(vals_u[1]),
        sweep_conductance=float(best),
        bound=bound,
        bound_holds=bool(best <= bound + 1e-12),
        degenerate=degenerate,
    )


def hash_features(label: str, dim: int) -> np.ndarray:
    """Deterministic pseudo-features for relation labels: SHA-256 bytes
    mapped into [-1, 1]."""
    if dim < 1:
        raise ContractViolation(f"feature dimension must be >= 1, got {dim}")
    raw: list[int] = []
    counter = 0
    while len(raw) < dim:
        raw.extend(hashlib.sha256(f"{label}#{counter}".encode()).digest())
        counter += 1
    return np.array(raw[:dim], dtype=float) / 127.5 - 1.0


@dataclass(frozen=True)
class TripletRecord:
    head: str
    relation: str
    tail: str
    point: LorentzPoint | None = None


def extract_triplets(
    subgraph: Subgraph,
    graph: KnowledgeGraph,
    table: EmbeddingTable | None = None,
) -> list[TripletRecord]:
    """All triplets of the parent graph whose head and tail lie in the
    selected set.  With an embedding table, each triplet also yields a
    point: head/relation/tail features go through the graph-modality map
    and their origin log-map tangents are averaged, then exp-mapped back.
    """
    selected = subgraph.vertex_set
    records = []
    graph_dim = table.input_dims["graph_triplet"] if table is not None else 0
    for head, rel, tail in graph.triplets:
        if head not in selected or tail not in selected:
            continue
        point = None
        if table is not None:
            parts = [
                graph.vertices[graph.vertex_index(head)].features,
                hash_features(rel, graph_dim),
                graph.vertices[graph.vertex_index(tail)].features,
            ]
            base = origin(table.dim)
            tangents = [
                log_map(base, table.embed_features(_fit_dim(f, graph_dim), "graph_triplet"))
                for f in parts
            ]
            mean_components = np.mean([t.components for t in tangents], axis=0)
            point = exp_map(base, type(tangents[0])(base, mean_components))
        records.append(TripletRecord(head, rel, tail, point))
    return records


def _fit_dim(features: np.ndarray, dim: int) -> np.ndarray:
    if features.size == dim:
        return features
    if features.size > dim:
        return features[:dim]
    out = np.zeros(dim)
    out[: features.size] = features
    return out
