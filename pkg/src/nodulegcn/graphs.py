"""Slice graphs per nodule: star, chain, or fully connected topology.

Nodes are the selected slices of one nodule in ascending z order. Adjacency
is normalized as D^{-1/2} (A + I) D^{-1/2} with degrees taken after adding
self-loops. Batches of nodules form one block-diagonal matrix; nodules are
never connected to each other.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations

import numpy as np

from .errors import ConfigError, ValidationError

TOPOLOGIES = ("star", "chain", "full")


@dataclass
class NoduleGraph:
    n: int
    edges: frozenset  # unordered (i, j) pairs, i < j, no self-edges
    topology: str


@dataclass
class NormalizedAdjacency:
    matrix: np.ndarray  # dense symmetric, float64
    spans: list = field(default_factory=list)  # half-open (start, stop) per nodule

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.float64)
        if self.matrix.ndim != 2 or self.matrix.shape[0] != self.matrix.shape[1]:
            raise ValidationError(f"adjacency must be square, got shape {self.matrix.shape}")
        if not self.spans:
            self.spans = [(0, self.matrix.shape[0])]

    @property
    def n(self):
        return self.matrix.shape[0]


def build_graph(n, topology):
    if n < 1:
        raise ValidationError(f"graph needs at least one node, got n={n}")
    if topology == "star":
        center = n // 2
        edges = frozenset(
            (min(center, j), max(center, j)) for j in range(n) if j != center
        )
    elif topology == "chain":
        edges = frozenset((i, i + 1) for i in range(n - 1))
    elif topology == "full":
        edges = frozenset(combinations(range(n), 2))
    else:
        raise ConfigError(f"unknown topology {topology!r}, expected one of {TOPOLOGIES}")
    return NoduleGraph(n=n, edges=edges, topology=topology)


def adjacency(graph):
    """Raw 0/1 matrix without self-loops."""
    a = np.zeros((graph.n, graph.n), dtype=np.float64)
    for i, j in graph.edges:
        a[i, j] = 1.0
        a[j, i] = 1.0
    return a


def normalize(graph):
    a_tilde = adjacency(graph) + np.eye(graph.n)
    inv_sqrt_deg = 1.0 / np.sqrt(a_tilde.sum(axis=1))
    matrix = a_tilde * inv_sqrt_deg[:, None] * inv_sqrt_deg[None, :]
    return NormalizedAdjacency(matrix=matrix)


def make_spans(sizes):
    spans = []
    start = 0
    for size in sizes:
        if size < 1:
            raise ValidationError(f"span size must be positive, got {size}")
        spans.append((start, start + size))
        start += size
    return spans


def block_diag(blocks, spans=None):
    """Stacks normalized per-nodule matrices along the diagonal.

    spans must tile [0, N) in order and match the block sizes; they default
    to the cumulative layout of the given blocks.
    """
    sizes = [b.n for b in blocks]
    if spans is None:
        spans = make_spans(sizes)
    if len(spans) != len(blocks):
        raise ValidationError(f"{len(spans)} spans for {len(blocks)} blocks")
    cursor = 0
    for (start, stop), size in zip(spans, sizes):
        if start != cursor:
            raise ValidationError(
                f"span ({start}, {stop}) does not continue at offset {cursor}; "
                "spans must be contiguous and non-overlapping"
            )
        if stop - start != size:
            raise ValidationError(f"span ({start}, {stop}) does not fit block of size {size}")
        cursor = stop
    total = cursor
    matrix = np.zeros((total, total), dtype=np.float64)
    for (start, stop), block in zip(spans, blocks):
        matrix[start:stop, start:stop] = block.matrix
    return NormalizedAdjacency(matrix=matrix, spans=list(spans))
