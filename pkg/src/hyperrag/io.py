"""File formats: tab-separated corpus/label/graph files, the hyperboloid
point format, and canonical JSON used for reproducibility checks.

All writers emit byte-deterministic output (floats as shortest
round-trip decimals); all loaders raise DataFormatError naming the file
and 1-based line number of the first offending record.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .alignment import KnowledgeItem, Query
from .errors import DataFormatError
from .geometry import LorentzPoint, project_to_hyperboloid
from .spectral import GraphVertex, KnowledgeGraph

GATING_TOKENS = {"answerable": False, "needs_retrieval": True}
LABEL_TOKENS = {"pos": True, "neg": False}


def _fmt(x: float) -> str:
    return repr(float(x))


def _csv(values) -> str:
    return ",".join(_fmt(v) for v in values)


def _parse_floats(text: str, path, lineno: int, what: str) -> np.ndarray:
    try:
        return np.array([float(tok) for tok in text.split(",")])
    except ValueError as exc:
        raise DataFormatError(f"{path}:{lineno}: bad {what}: {exc}") from exc


def _read_rows(path, n_cols: int):
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise DataFormatError(f"{path}: {exc}") from exc
    rows = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line:
            raise DataFormatError(f"{path}:{lineno}: blank line")
        parts = line.split("\t")
        if len(parts) != n_cols:
            raise DataFormatError(
                f"{path}:{lineno}: expected {n_cols} tab-separated fields, got {len(parts)}"
            )
        rows.append((lineno, parts))
    return rows


def _write_lines(path, lines) -> None:
    Path(path).write_text("".join(f"{line}\n" for line in lines))


def save_points(path, points: list[LorentzPoint]) -> None:
    """Header `lorentz <n> <count>`, then one row of n space-like
    coordinates per point."""
    if points:
        n = points[0].dim
    else:
        n = 0
    lines = [f"lorentz {n} {len(points)}"]
    for pt in points:
        lines.append(" ".join(_fmt(c) for c in pt.space))
    _write_lines(path, lines)


def load_points(path) -> list[LorentzPoint]:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise DataFormatError(f"{path}: {exc}") from exc
    lines = text.splitlines()
    if not lines:
        raise DataFormatError(f"{path}:1: missing header")
    header = lines[0].split()
    if len(header) != 3 or header[0] != "lorentz":
        raise DataFormatError(f"{path}:1: header must be 'lorentz <n> <count>'")
    try:
        n, count = int(header[1]), int(header[2])
    except ValueError as exc:
        raise DataFormatError(f"{path}:1: bad header numbers: {exc}") from exc
    body = [line for line in lines[1:] if line]
    if len(body) != count:
        raise DataFormatError(
            f"{path}: header promises {count} points, found {len(body)} rows"
        )
    points = []
    for lineno, line in enumerate(body, start=2):
        toks = line.split()
        if len(toks) != n:
            raise DataFormatError(f"{path}:{lineno}: expected {n} coordinates, got {len(toks)}")
        try:
            spatial = np.array([float(t) for t in toks])
        except ValueError as exc:
            raise DataFormatError(f"{path}:{lineno}: bad coordinate: {exc}") from exc
        points.append(project_to_hyperboloid(spatial))
    return points


def save_items(path, items: list[KnowledgeItem]) -> None:
    _write_lines(path, (f"{it.id}\t{it.modality}\t{_csv(it.features)}" for it in items))


def load_items(path) -> list[KnowledgeItem]:
    items = []
    for lineno, (iid, modality, feats) in _read_rows(path, 3):
        items.append(KnowledgeItem(iid, modality, _parse_floats(feats, path, lineno, "features")))
    return items


def save_queries(path, queries: list[Query]) -> None:
    _write_lines(
        path,
        (f"{q.id}\t{_csv(q.visual_features)}\t{_csv(q.text_features)}" for q in queries),
    )


def load_queries(path) -> list[Query]:
    queries = []
    for lineno, (qid, vis, txt) in _read_rows(path, 3):
        queries.append(
            Query(
                qid,
                _parse_floats(vis, path, lineno, "visual features"),
                _parse_floats(txt, path, lineno, "text features"),
            )
        )
    return queries


def save_positives(path, pairs: list[tuple[str, str]]) -> None:
    _write_lines(path, (f"{q}\t{i}" for q, i in pairs))


def load_positives(path) -> list[tuple[str, str]]:
    return [(q, i) for _, (q, i) in _read_rows(path, 2)]


def save_labels(path, labels: list[tuple[str, str, bool]]) -> None:
    _write_lines(
        path,
        (f"{q}\t{i}\t{'pos' if flag else 'neg'}" for q, i, flag in labels),
    )


def load_labels(path) -> list[tuple[str, str, bool]]:
    out = []
    for lineno, (q, i, tok) in _read_rows(path, 3):
        if tok not in LABEL_TOKENS:
            raise DataFormatError(f"{path}:{lineno}: label must be pos|neg, got {tok!r}")
        out.append((q, i, LABEL_TOKENS[tok]))
    return out


def save_gating(path, gating: list[tuple[str, bool]]) -> None:
    _write_lines(
        path,
        (
            f"{q}\t{'needs_retrieval' if needs else 'answerable'}"
            for q, needs in gating
        ),
    )


def load_gating(path) -> list[tuple[str, bool]]:
    out = []
    for lineno, (q, tok) in _read_rows(path, 2):
        if tok not in GATING_TOKENS:
            raise DataFormatError(
                f"{path}:{lineno}: gating label must be answerable|needs_retrieval, got {tok!r}"
            )
        out.append((q, GATING_TOKENS[tok]))
    return out


def save_confidence(path, scores: dict[str, np.ndarray]) -> None:
    lines = []
    for qid in scores:
        for idx, val in enumerate(scores[qid]):
            lines.append(f"{qid}\tcand{idx}\t{_fmt(val)}")
    _write_lines(path, lines)


def load_confidence(path) -> dict[str, np.ndarray]:
    acc: dict[str, list[float]] = {}
    for lineno, (qid, _cand, val) in _read_rows(path, 3):
        try:
            acc.setdefault(qid, []).append(float(val))
        except ValueError as exc:
            raise DataFormatError(f"{path}:{lineno}: bad score: {exc}") from exc
    return {qid: np.array(vals) for qid, vals in acc.items()}


def save_qa(path, answers: dict[str, tuple[int, ...]]) -> None:
    _write_lines(
        path,
        (f"{qid}\t{','.join(str(t) for t in toks)}" for qid, toks in answers.items()),
    )


def load_qa(path) -> dict[str, tuple[int, ...]]:
    out = {}
    for lineno, (qid, toks) in _read_rows(path, 2):
        try:
            out[qid] = tuple(int(t) for t in toks.split(","))
        except ValueError as exc:
            raise DataFormatError(f"{path}:{lineno}: bad token id: {exc}") from exc
    return out


def save_graph(graph_dir, graph: KnowledgeGraph) -> None:
    graph_dir = Path(graph_dir)
    graph_dir.mkdir(parents=True, exist_ok=True)
    _write_lines(
        graph_dir / "vertices.tsv",
        (f"{v.id}\t{v.label}\t{_csv(v.features)}" for v in graph.vertices),
    )
    _write_lines(
        graph_dir / "edges.tsv",
        (f"{u}\t{v}\t{_fmt(w)}" for u, v, w in graph.edges),
    )
    _write_lines(
        graph_dir / "triplets.tsv",
        (f"{h}\t{r}\t{t}" for h, r, t in graph.triplets),
    )


def load_graph(graph_dir) -> KnowledgeGraph:
    graph_dir = Path(graph_dir)
    vertices = []
    for lineno, (vid, label, feats) in _read_rows(graph_dir / "vertices.tsv", 3):
        vertices.append(
            GraphVertex(vid, label, _parse_floats(feats, graph_dir / "vertices.tsv", lineno, "features"))
        )
    edges = []
    edges_path = graph_dir / "edges.tsv"
    for lineno, (u, v, w) in _read_rows(edges_path, 3):
        try:
            edges.append((u, v, float(w)))
        except ValueError as exc:
            raise DataFormatError(f"{edges_path}:{lineno}: bad weight: {exc}") from exc
    triplets_path = graph_dir / "triplets.tsv"
    triplets = []
    if triplets_path.exists():
        triplets = [(h, r, t) for _, (h, r, t) in _read_rows(triplets_path, 3)]
    return KnowledgeGraph(tuple(vertices), tuple(edges), tuple(triplets))


def save_vocab(path, embeddings: np.ndarray) -> None:
    _write_lines(
        path,
        (f"{idx}\t{_csv(row)}" for idx, row in enumerate(embeddings)),
    )


def load_vocab(path) -> np.ndarray:
    rows = []
    for lineno, (idx, feats) in _read_rows(path, 2):
        try:
            if int(idx) != lineno - 1:
                raise DataFormatError(
                    f"{path}:{lineno}: token ids must be contiguous from 0"
                )
        except ValueError as exc:
            raise DataFormatError(f"{path}:{lineno}: bad token id: {exc}") from exc
        rows.append(_parse_floats(feats, path, lineno, "embedding"))
    if not rows:
        raise DataFormatError(f"{path}: empty vocabulary")
    return np.vstack(rows)


def save_clusters(path, assignment: dict[tuple[str, str], int]) -> None:
    _write_lines(
        path,
        (f"{kind}\t{ident}\t{cluster}" for (kind, ident), cluster in assignment.items()),
    )


def load_clusters(path) -> dict[tuple[str, str], int]:
    out = {}
    for lineno, (kind, ident, cluster) in _read_rows(path, 3):
        try:
            out[(kind, ident)] = int(cluster)
        except ValueError as exc:
            raise DataFormatError(f"{path}:{lineno}: bad cluster index: {exc}") from exc
    return out


def canonical_json_bytes(obj) -> bytes:
    return (json.dumps(obj, sort_keys=True, separators=(",", ":")) + "\n").encode()


def write_json(path, obj) -> None:
    Path(path).write_bytes(canonical_json_bytes(obj))


def read_json(path):
    path = Path(path)
    try:
        return json.loads(path.read_text())
    except OSError as exc:
        raise DataFormatError(f"{path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise DataFormatError(f"{path}:{exc.lineno}: invalid JSON: {exc.msg}") from exc


def save_table(path, table) -> None:
    arrays = {"dim": np.array([table.dim])}
    for name, arr in table.named_params():
        arrays[name] = arr
    for key, d_in in table.input_dims.items():
        arrays[f"input_dim.{key}"] = np.array([d_in])
    np.savez(path, **arrays)


def load_table(path):
    from .alignment import EmbeddingTable
    from .errors import ConfigurationError

    try:
        data = np.load(path)
    except (OSError, ValueError) as exc:
        raise DataFormatError(f"{path}: cannot read table: {exc}") from exc
    try:
        dim = int(data["dim"][0])
        input_dims = {
            key.split(".", 1)[1]: int(data[key][0])
            for key in data.files
            if key.startswith("input_dim.")
        }
        table = EmbeddingTable(dim, input_dims, seed=0)
        for name, _ in table.named_params():
            kind, key = name.split(".", 1)
            if kind == "weight":
                table.weight[key] = data[name]
            else:
                table.bias[key] = data[name]
    except KeyError as exc:
        raise DataFormatError(f"{path}: missing array {exc}") from exc
    except ConfigurationError as exc:
        raise DataFormatError(f"{path}: malformed table archive: {exc}") from exc
    return table
