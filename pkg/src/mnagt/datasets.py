"""Dataset loading: TUDataset text format, featurization, synthetic tasks."""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np

from .errors import DataError
from .graph import Graph

DATA_DIR_ENV = "MNAGT_DATA_DIR"


def default_data_dir() -> Path:
    return Path(os.environ.get(DATA_DIR_ENV, "data"))


def _read_int_lines(path: Path, per_line: int):
    """Parse `per_line` comma-separated integers per line, 1-based file format."""
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            parts = [p.strip() for p in line.split(",")]
            if len(parts) != per_line:
                raise DataError(
                    f"{path.name}:{lineno}: expected {per_line} values, got {len(parts)}"
                )
            try:
                rows.append(tuple(int(p) for p in parts))
            except ValueError:
                raise DataError(
                    f"{path.name}:{lineno}: non-integer token in {line!r}"
                ) from None
    return rows


def load_tudataset(directory, name: str, degree_onehot_cap: int | None = None):
    """Load a TUDataset-format directory into a list of graphs.

    Expects NAME_A.txt, NAME_graph_indicator.txt, NAME_graph_labels.txt; uses
    NAME_node_labels.txt for one-hot node features when present, otherwise
    falls back to node-degree features (scalar, or one-hot capped at
    ``degree_onehot_cap``). Graph labels are remapped to contiguous [0, C).
    """
    directory = Path(directory)
    paths = {
        key: directory / f"{name}_{key}.txt"
        for key in ("A", "graph_indicator", "graph_labels", "node_labels")
    }
    for key in ("A", "graph_indicator", "graph_labels"):
        if not paths[key].is_file():
            raise DataError(f"missing dataset file: {paths[key]}")

    indicator = [r[0] for r in _read_int_lines(paths["graph_indicator"], 1)]
    raw_graph_labels = [r[0] for r in _read_int_lines(paths["graph_labels"], 1)]
    edges = _read_int_lines(paths["A"], 2)

    n_nodes = len(indicator)
    n_graphs = len(raw_graph_labels)
    if not n_graphs:
        raise DataError(f"{paths['graph_labels'].name}: no graphs")
    if max(indicator, default=0) > n_graphs or min(indicator, default=1) < 1:
        raise DataError(
            f"{paths['graph_indicator'].name}: graph id outside [1, {n_graphs}]"
        )

    # global 1-based node id -> (graph index, local 0-based index)
    local_index = np.zeros(n_nodes, dtype=np.int64)
    graph_of = np.asarray(indicator, dtype=np.int64) - 1
    counts = np.zeros(n_graphs, dtype=np.int64)
    for node, gid in enumerate(graph_of):
        local_index[node] = counts[gid]
        counts[gid] += 1

    per_graph_edges = [[] for _ in range(n_graphs)]
    for u, v in edges:
        if not (1 <= u <= n_nodes and 1 <= v <= n_nodes):
            raise DataError(
                f"{paths['A'].name}: node id ({u}, {v}) outside [1, {n_nodes}]"
            )
        gu, gv = graph_of[u - 1], graph_of[v - 1]
        if gu != gv:
            raise DataError(
                f"{paths['A'].name}: edge ({u}, {v}) crosses graphs {gu + 1} and {gv + 1}"
            )
        per_graph_edges[gu].append((int(local_index[u - 1]), int(local_index[v - 1])))

    if paths["node_labels"].is_file():
        node_labels = [r[0] for r in _read_int_lines(paths["node_labels"], 1)]
        if len(node_labels) != n_nodes:
            raise DataError(
                f"{paths['node_labels'].name}: {len(node_labels)} labels for "
                f"{n_nodes} nodes"
            )
        vocab = {lab: i for i, lab in enumerate(sorted(set(node_labels)))}
        features = np.zeros((n_nodes, len(vocab)))
        features[np.arange(n_nodes), [vocab[l] for l in node_labels]] = 1.0
    else:
        features = None  # degree features, filled per graph below

    label_map = {lab: i for i, lab in enumerate(sorted(set(raw_graph_labels)))}

    graphs = []
    node_rows = np.argsort(graph_of, kind="stable")
    row_start = np.concatenate([[0], np.cumsum(counts)])
    for gid in range(n_graphs):
        rows = node_rows[row_start[gid]:row_start[gid + 1]]
        n = int(counts[gid])
        if features is not None:
            feats = features[rows]
        else:
            deg = np.zeros(n)
            for i, j in set(
                (min(e), max(e)) for e in per_graph_edges[gid]
            ):
                deg[i] += 1
                if j != i:
                    deg[j] += 1
            if degree_onehot_cap:
                capped = np.minimum(deg, degree_onehot_cap - 1).astype(np.int64)
                feats = np.zeros((n, degree_onehot_cap))
                feats[np.arange(n), capped] = 1.0
            else:
                feats = deg[:, None]
        graphs.append(
            Graph(
                n=n,
                edges=tuple(per_graph_edges[gid]),
                features=feats,
                label=label_map[raw_graph_labels[gid]],
            )
        )
    return graphs


def write_tudataset(graphs, directory, name: str) -> None:
    """Serialize graphs back to the TUDataset text format.

    Node labels are emitted when features look one-hot (width > 1); edges are
    written once per undirected pair.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    a_lines = []
    indicator = []
    node_labels = []
    base = 0
    onehot = graphs and graphs[0].features.shape[1] > 1
    for gid, g in enumerate(graphs, start=1):
        indicator.extend([gid] * g.n)
        for i, j in g.edges:
            a_lines.append(f"{base + i + 1}, {base + j + 1}")
        if onehot:
            node_labels.extend(int(np.argmax(row)) for row in g.features)
        base += g.n
    (directory / f"{name}_A.txt").write_text("\n".join(a_lines) + "\n")
    (directory / f"{name}_graph_indicator.txt").write_text(
        "\n".join(str(i) for i in indicator) + "\n"
    )
    (directory / f"{name}_graph_labels.txt").write_text(
        "\n".join(str(g.label) for g in graphs) + "\n"
    )
    if onehot:
        (directory / f"{name}_node_labels.txt").write_text(
            "\n".join(str(l) for l in node_labels) + "\n"
        )


def dataset_stats(graphs) -> dict:
    labels = [g.label for g in graphs]
    classes = sorted(set(labels))
    return {
        "graphs": len(graphs),
        "avg_nodes": float(np.mean([g.n for g in graphs])),
        "avg_edges": float(np.mean([g.n_edges for g in graphs])),
        "classes": len(classes),
        "class_histogram": {str(c): labels.count(c) for c in classes},
        "feature_dim": int(graphs[0].features.shape[1]) if graphs else 0,
    }


def planted_clique_task(n_graphs: int = 400, seed: int = 0):
    """Structural two-class task: random trees with a planted 5-clique vs the
    same trees with an edge-count-matched set of random extra edges.

    Both classes have identical edge counts, so plain edge statistics do not
    separate them; the degree distribution shape and neighborhood structure
    do. Degree features.
    """
    rng = np.random.default_rng(seed)
    graphs = []
    for i in range(n_graphs):
        label = i % 2
        n = int(rng.integers(14, 19))
        edges = set()
        for v in range(1, n):
            edges.add((int(rng.integers(0, v)), v))
        if label == 1:
            clique = rng.choice(n, size=5, replace=False)
            for a in range(5):
                for b in range(a + 1, 5):
                    u, v = int(clique[a]), int(clique[b])
                    edges.add((min(u, v), max(u, v)))
        else:
            added = 0
            while added < 10:
                u, v = (int(x) for x in rng.integers(0, n, size=2))
                if u != v and (min(u, v), max(u, v)) not in edges:
                    edges.add((min(u, v), max(u, v)))
                    added += 1
        deg = np.zeros(n)
        for a, b in edges:
            deg[a] += 1
            deg[b] += 1
        graphs.append(
            Graph(n=n, edges=tuple(edges), features=deg[:, None], label=label)
        )
    order = rng.permutation(n_graphs)
    return [graphs[j] for j in order]


def triangles_vs_paths(n_graphs: int = 200, seed: int = 0):
    """Synthetic two-class task: 3-cycles vs 3-node paths, degree features.

    Separable by construction (mean degree 2 vs 4/3), used as a learnability
    smoke check.
    """
    triangle_edges = ((0, 1), (1, 2), (0, 2))
    path_edges = ((0, 1), (1, 2))
    graphs = []
    for i in range(n_graphs):
        label = i % 2
        edges = triangle_edges if label == 0 else path_edges
        deg = np.zeros(3)
        for a, b in edges:
            deg[a] += 1
            deg[b] += 1
        graphs.append(Graph(n=3, edges=edges, features=deg[:, None], label=label))
    order = np.random.default_rng(seed).permutation(n_graphs)
    return [graphs[i] for i in order]
