"""Random-walk return probabilities as structural node features.

For each node, column t holds the probability that a t-step uniform random
walk starting there ends back at the start. Computed densely from powers of
the row-stochastic walk matrix; fine for the graph sizes this package works
with (tens of nodes).
"""

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError

DEFAULT_RW_STEPS = 5


@dataclass
class RWEncoding:
    """Per-node return-probability matrix [num_nodes x steps]."""

    matrix: np.ndarray
    steps: int


def rw_encoding(graph, steps=DEFAULT_RW_STEPS):
    """Return-probability encoding of one graph.

    Walk matrix P = D^-1 A with rows of isolated nodes left at zero; output
    column t is diag(P^t) for t = 1..steps.
    """
    if steps < 1:
        raise ConfigError(f"walk steps must be >= 1, got {steps}", path="rw_steps")
    a = graph.adjacency()
    deg = a.sum(axis=1)
    p = np.zeros_like(a)
    nz = deg > 0
    p[nz] = a[nz] / deg[nz, None]
    out = np.empty((graph.num_nodes, steps))
    pt = p
    out[:, 0] = np.diag(pt)
    for t in range(1, steps):
        pt = pt @ p
        out[:, t] = np.diag(pt)
    return RWEncoding(matrix=out, steps=steps)


def rw_matrix_for_graphs(graphs, steps=DEFAULT_RW_STEPS):
    """Stacked encodings for a graph list, row-aligned with batch_graphs."""
    return np.vstack([rw_encoding(g, steps).matrix for g in graphs])
