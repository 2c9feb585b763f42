"""Temporal neighborhoods and fixed-size uniform neighbor sampling.

A node can only attend to neighbors whose interaction happened strictly
before the node's own evaluation time, so message passing never leaks
future events.
"""

from __future__ import annotations

import bisect
from dataclasses import dataclass

__all__ = ["TemporalNeighborhood", "neighbors_before", "sample_uniform"]


@dataclass
class TemporalNeighborhood:
    """Up to n_sample (node, time) pairs for one target; mask flags the
    padded slots (True = padded/unused)."""

    target: int
    t: int
    neighbors: list  # kept (node, interaction_time) pairs, time-sorted
    mask: list       # length n_sample booleans


def neighbors_before(graph, v, t, direction="undirected"):
    """All neighbors of v whose shared edge fired strictly before t.

    Returns (node, edge_time) pairs sorted by (time, node).
    """
    adj = graph.neighbors(v, direction)  # sorted by (time, node)
    cut = bisect.bisect_left(adj, (t,))
    return [(u, tu) for tu, u in adj[:cut]]


def sample_uniform(target, t, neigh, n_sample=20, rng=None):
    """Uniform sample without replacement, ordered by interaction time.

    Keeps everything when the neighborhood fits; the remaining slots are
    masked.
    """
    if n_sample < 1:
        raise ValueError("n_sample must be >= 1")
    if len(neigh) <= n_sample:
        kept = list(neigh)
    else:
        if rng is None:
            raise ValueError("rng required when the neighborhood exceeds n_sample")
        kept = rng.sample(neigh, n_sample)
    kept.sort(key=lambda p: (p[1], p[0]))
    mask = [False] * len(kept) + [True] * (n_sample - len(kept))
    return TemporalNeighborhood(target=target, t=t, neighbors=kept, mask=mask)
