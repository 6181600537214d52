"""Graph data model: CSR adjacency, normalization, k-hop propagation, batching.

Graphs and sparse matrices are immutable after construction and safe to share.
Adjacency values are kept in double precision; products cast to the feature
dtype on demand.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np
import scipy.sparse as sp

from .errors import DataError, ShapeError
from .tensor import Tape, Tensor


class NormalizationKind(Enum):
    SYMMETRIC = "sym"
    RANDOM_WALK = "rw"


@dataclass(frozen=True)
class Graph:
    """Undirected, unweighted graph with node features and an optional label.

    Edges are canonicalized to unique (min, max) pairs; endpoints are 0-based.
    """

    n: int
    edges: tuple
    features: np.ndarray
    label: int | None = None

    def __post_init__(self):
        canon = set()
        for i, j in self.edges:
            if not (0 <= i < self.n and 0 <= j < self.n):
                raise DataError(
                    f"edge ({i}, {j}) out of range for {self.n} nodes"
                )
            canon.add((min(i, j), max(i, j)))
        object.__setattr__(self, "edges", tuple(sorted(canon)))
        feats = np.asarray(self.features, dtype=np.float64)
        if feats.ndim != 2 or feats.shape[0] != self.n:
            raise ShapeError(
                f"features must be {self.n} x d, got shape {feats.shape}"
            )
        object.__setattr__(self, "features", feats)

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    def degrees(self) -> np.ndarray:
        deg = np.zeros(self.n, dtype=np.int64)
        for i, j in self.edges:
            deg[i] += 1
            if j != i:
                deg[j] += 1
        return deg

    def permuted(self, perm) -> "Graph":
        """Relabel nodes: new index of old node i is perm[i]."""
        perm = np.asarray(perm)
        inv = np.empty_like(perm)
        inv[perm] = np.arange(self.n)
        edges = tuple((int(perm[i]), int(perm[j])) for i, j in self.edges)
        return Graph(self.n, edges, self.features[inv], self.label)


class SparseMatrix:
    """Square CSR matrix; columns within each row are strictly increasing."""

    def __init__(self, rows: int, row_offsets, col_indices, values):
        row_offsets = np.asarray(row_offsets, dtype=np.int64)
        col_indices = np.asarray(col_indices, dtype=np.int64)
        values = np.asarray(values, dtype=np.float64)
        if row_offsets.shape != (rows + 1,):
            raise ShapeError(
                f"row_offsets needs {rows + 1} entries, got {row_offsets.shape}"
            )
        if np.any(np.diff(row_offsets) < 0) or row_offsets[0] != 0:
            raise ShapeError("row_offsets must start at 0 and be nondecreasing")
        if row_offsets[-1] != len(values) or len(col_indices) != len(values):
            raise ShapeError("row_offsets end must equal the number of stored values")
        if len(col_indices):
            if col_indices.min() < 0 or col_indices.max() >= rows:
                raise ShapeError("column index out of range")
            # strictly increasing within each row: only allow non-increasing
            # adjacent pairs where a new row starts
            breaks = np.zeros(len(col_indices), dtype=bool)
            inner = row_offsets[1:-1]
            breaks[inner[inner < len(col_indices)]] = True
            non_increasing = np.diff(col_indices) <= 0
            if np.any(non_increasing & ~breaks[1:]):
                bad = int(np.nonzero(non_increasing & ~breaks[1:])[0][0])
                row = int(np.searchsorted(row_offsets, bad, side="right") - 1)
                raise ShapeError(f"columns of row {row} are not strictly increasing")
        self.rows = rows
        self.row_offsets = row_offsets
        self.col_indices = col_indices
        self.values = values
        self._backends: dict = {}
        self._transposed: "SparseMatrix | None" = None

    @property
    def nnz(self) -> int:
        return len(self.values)

    def _backend(self, dtype) -> sp.csr_matrix:
        key = np.dtype(dtype)
        if key not in self._backends:
            self._backends[key] = sp.csr_matrix(
                (self.values.astype(key), self.col_indices, self.row_offsets),
                shape=(self.rows, self.rows),
            )
        return self._backends[key]

    def matmul_dense(self, h: np.ndarray) -> np.ndarray:
        if h.shape[0] != self.rows:
            raise ShapeError(
                f"sparse-dense product: {self.rows}x{self.rows} @ {h.shape}"
            )
        return np.asarray(self._backend(h.dtype) @ h)

    def transpose(self) -> "SparseMatrix":
        if self._transposed is None:
            t = self._backend(np.float64).T.tocsr()
            t.sort_indices()
            self._transposed = SparseMatrix(self.rows, t.indptr, t.indices, t.data)
        return self._transposed

    def to_dense(self) -> np.ndarray:
        return self._backend(np.float64).toarray()

    @classmethod
    def block_diag(cls, blocks) -> "SparseMatrix":
        blocks = list(blocks)
        n = sum(b.rows for b in blocks)
        offsets = [np.array([0], dtype=np.int64)]
        cols = []
        vals = []
        row_base = 0
        nnz_base = 0
        for b in blocks:
            offsets.append(b.row_offsets[1:] + nnz_base)
            cols.append(b.col_indices + row_base)
            vals.append(b.values)
            row_base += b.rows
            nnz_base += b.nnz
        return cls(
            n,
            np.concatenate(offsets),
            np.concatenate(cols) if cols else np.empty(0, dtype=np.int64),
            np.concatenate(vals) if vals else np.empty(0),
        )


def normalized_adjacency(g: Graph, kind: NormalizationKind) -> SparseMatrix:
    """Degree-normalized adjacency with self-loops.

    Symmetric: D^{-1/2} (A+I) D^{-1/2}; random walk: D^{-1} (A+I), with D the
    degree matrix of A+I. Isolated nodes keep a well-defined self-loop entry.
    """
    neighbors = [{i} for i in range(g.n)]
    for i, j in g.edges:
        neighbors[i].add(j)
        neighbors[j].add(i)
    deg = np.array([len(nb) for nb in neighbors], dtype=np.float64)
    offsets = [0]
    cols = []
    vals = []
    inv_sqrt = 1.0 / np.sqrt(deg)
    for i in range(g.n):
        row_cols = sorted(neighbors[i])
        cols.extend(row_cols)
        if kind is NormalizationKind.SYMMETRIC:
            vals.extend(inv_sqrt[i] * inv_sqrt[j] for j in row_cols)
        elif kind is NormalizationKind.RANDOM_WALK:
            vals.extend(1.0 / deg[i] for _ in row_cols)
        else:
            raise ValueError(f"unknown normalization kind: {kind!r}")
        offsets.append(len(cols))
    return SparseMatrix(g.n, offsets, cols, vals)


def propagate(h: Tensor, a_hat: SparseMatrix, k: int) -> Tensor:
    """k-step smoothing: a_hat applied k times to h, autodiff-aware.

    The adjacency is a constant; gradients flow back through k transposed
    products. k=0 returns h itself.
    """
    if k < 0:
        raise ValueError(f"hop count must be >= 0, got {k}")
    if h.shape[0] != a_hat.rows:
        raise ShapeError(
            f"propagate: adjacency {a_hat.rows}x{a_hat.rows} vs features {h.shape}"
        )
    if k == 0:
        return h
    out_data = h.data
    for _ in range(k):
        out_data = a_hat.matmul_dense(out_data)
    tape = Tape.active()
    if tape is None or not h.grad_enabled:
        return Tensor(out_data)
    out = Tensor(out_data, grad_enabled=True)
    a_t = a_hat.transpose()

    def backward(g, acc):
        for _ in range(k):
            g = a_t.matmul_dense(g)
        acc(h, g)

    tape.record(out, (h,), backward)
    return out


@dataclass
class GraphBatch:
    """Several graphs packed as one block-diagonal system.

    ``offsets[i]:offsets[i+1]`` are the feature rows of graph i; attention
    and propagation never cross block boundaries.
    """

    features: Tensor
    offsets: np.ndarray
    a_hat: SparseMatrix
    labels: np.ndarray
    n_graphs: int = field(init=False)

    def __post_init__(self):
        self.n_graphs = len(self.offsets) - 1

    @property
    def blocks(self):
        return [
            (int(self.offsets[i]), int(self.offsets[i + 1]))
            for i in range(self.n_graphs)
        ]


def make_batch(
    graphs,
    kind: NormalizationKind = NormalizationKind.SYMMETRIC,
    adjacencies=None,
    dtype=None,
) -> GraphBatch:
    """Concatenate graphs into one batch with a block-diagonal adjacency.

    Per-graph adjacencies can be passed in (precomputed once per dataset) to
    avoid renormalizing every epoch.
    """
    graphs = list(graphs)
    if not graphs:
        raise DataError("make_batch: empty graph list")
    d = graphs[0].features.shape[1]
    for g in graphs:
        if g.features.shape[1] != d:
            raise ShapeError(
                f"feature widths differ: {d} vs {g.features.shape[1]}"
            )
    if adjacencies is None:
        adjacencies = [normalized_adjacency(g, kind) for g in graphs]
    feats = np.concatenate([g.features for g in graphs], axis=0)
    if dtype is not None:
        feats = feats.astype(dtype)
    offsets = np.cumsum([0] + [g.n for g in graphs])
    labels = np.array(
        [g.label if g.label is not None else -1 for g in graphs], dtype=np.int64
    )
    return GraphBatch(
        features=Tensor(feats),
        offsets=offsets,
        a_hat=SparseMatrix.block_diag(adjacencies),
        labels=labels,
    )


def split_dataset(graphs, ratios=(0.8, 0.1, 0.1), seed: int = 0):
    """Shuffled train/val/test split; floor sizes, remainder goes to train."""
    graphs = list(graphs)
    if not graphs:
        raise DataError("split_dataset: empty dataset")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"split ratios must sum to 1, got {ratios}")
    n = len(graphs)
    order = np.random.default_rng(seed).permutation(n)
    n_val = int(n * ratios[1])
    n_test = int(n * ratios[2])
    n_train = n - n_val - n_test
    train = [graphs[i] for i in order[:n_train]]
    val = [graphs[i] for i in order[n_train:n_train + n_val]]
    test = [graphs[i] for i in order[n_train + n_val:]]
    return train, val, test
