"""Small built-in graphs used by gradient checks and diagnostics."""

from __future__ import annotations

import numpy as np

from .graphs import Dataset, GraphInstance, build_features

NUM_NODE_LABELS = 3


def _graph(n: int, edges, node_labels, label: int) -> GraphInstance:
    A = np.zeros((n, n))
    for i, j in edges:
        A[i, j] = A[j, i] = 1.0
    return GraphInstance(A, label, node_labels=np.asarray(node_labels))


def triangle_with_tail() -> GraphInstance:
    """4 nodes: triangle 0-1-2 plus node 3 hanging off node 2."""
    return _graph(4, [(0, 1), (1, 2), (0, 2), (2, 3)], [0, 1, 2, 0], label=1)


def hexagon() -> GraphInstance:
    """6-cycle with two substituted atoms."""
    return _graph(6, [(i, (i + 1) % 6) for i in range(6)], [0, 0, 1, 0, 0, 2], label=0)


def fused_rings() -> GraphInstance:
    """9 nodes: a 6-ring and a 5-ring sharing the edge 0-5 (indole skeleton)."""
    ring6 = [(i, (i + 1) % 6) for i in range(6)]
    ring5 = [(5, 6), (6, 7), (7, 8), (8, 0)]
    return _graph(9, ring6 + ring5, [0, 0, 0, 0, 0, 0, 1, 0, 2], label=1)


def path3() -> GraphInstance:
    return _graph(3, [(0, 1), (1, 2)], [0, 1, 0], label=0)


def fixture_dataset() -> Dataset:
    """The three gradient-check graphs with one-hot node-label features."""
    ds = Dataset([triangle_with_tail(), hexagon(), fused_rings()], num_classes=2,
                 name="fixtures", label_values=[0, 1],
                 node_label_values=list(range(NUM_NODE_LABELS)))
    return build_features(ds, "node-label-onehot")
