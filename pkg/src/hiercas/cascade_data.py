"""Cascade corpus parsing, graph construction, labeling, and splitting.

Corpus file format (one cascade per line, UTF-8, 5 tab-separated fields):

    cascade_id \\t root_user \\t publish_time \\t num_events \\t path_list

path_list is space-separated ``u_a/u_b/.../u_z:t`` entries where the last
path element retweeted the second-to-last at integer offset t from the
publish time. A leading ``<root>:0`` entry is allowed (and emitted by the
canonical writer). num_events counts the non-root entries.
"""

from __future__ import annotations

import bisect
import random
from dataclasses import dataclass, field

__all__ = [
    "ParseError",
    "ConfigError",
    "CascadeRecord",
    "CascadeGraph",
    "LabeledCascade",
    "ObservationConfig",
    "CorpusStats",
    "parse_line",
    "parse_corpus",
    "format_line",
    "build_graph",
    "build_labeled",
    "split_dataset",
    "size_change",
    "corpus_stats",
]


class ParseError(ValueError):
    pass


class ConfigError(ValueError):
    pass


@dataclass
class CascadeRecord:
    """One cascade as read from the corpus: root plus time-sorted events."""

    cascade_id: str
    root_user: str
    publish_time: int
    events: list  # (child_user, parent_user, time_offset), sorted by offset


@dataclass
class ObservationConfig:
    t_obs: int
    t_pred: int
    min_observed: int = 10
    max_observed: int = 100
    time_unit: float = 1.0

    def __post_init__(self):
        if self.t_pred <= self.t_obs:
            raise ConfigError(f"t_pred ({self.t_pred}) must exceed t_obs ({self.t_obs})")
        if self.min_observed < 1:
            raise ConfigError("min_observed must be >= 1")
        if self.max_observed < self.min_observed:
            raise ConfigError("max_observed must be >= min_observed")
        if self.time_unit <= 0:
            raise ConfigError("time_unit must be positive")


class CascadeGraph:
    """Timestamped retweet forest truncated to the observation window.

    Node 0 is the root (join time 0); every other node joined through
    exactly one retweet edge whose time equals the node's join time.
    """

    __slots__ = ("users", "join_times", "edges", "observation_time",
                 "_edge_times", "_adj")

    def __init__(self, users, join_times, edges, observation_time):
        self.users = list(users)
        self.join_times = list(join_times)
        self.edges = list(edges)  # (child_idx, parent_idx, time)
        self.observation_time = observation_time
        self._edge_times = sorted(t for _, _, t in self.edges)
        self._adj = {}

    @property
    def n_nodes(self):
        return len(self.users)

    def size_at(self, t):
        """Number of edges with time <= t (non-decreasing step function)."""
        return bisect.bisect_right(self._edge_times, t)

    def neighbors(self, v, direction="undirected"):
        """Adjacent (node, edge_time) pairs sorted by (time, node)."""
        adj = self._adj.get(direction)
        if adj is None:
            adj = [[] for _ in range(self.n_nodes)]
            for child, parent, t in self.edges:
                if direction in ("undirected", "out"):
                    adj[child].append((t, parent))
                if direction in ("undirected", "in"):
                    adj[parent].append((t, child))
            for lst in adj:
                lst.sort()
            self._adj[direction] = adj
        return adj[v]

    def depths(self):
        """Hop distance from the root for every node."""
        depth = [0] * self.n_nodes
        for child, parent, _ in self.edges:
            depth[child] = depth[parent] + 1
        return depth


@dataclass
class LabeledCascade:
    cascade_id: str
    graph: CascadeGraph
    delta_p: int


def parse_line(line, line_no=1):
    """Parse one corpus line into a CascadeRecord (events time-sorted)."""

    def fail(msg):
        raise ParseError(f"line {line_no}: {msg}")

    fields = line.rstrip("\n").split("\t")
    if len(fields) != 5:
        fail(f"expected 5 tab-separated fields, got {len(fields)}")
    cascade_id, root_user, pub_s, count_s, paths_s = fields
    if not cascade_id or not root_user:
        fail("empty cascade id or root user")
    try:
        publish_time = int(pub_s)
    except ValueError:
        fail(f"non-numeric publish time {pub_s!r}")
    try:
        num_events = int(count_s)
    except ValueError:
        fail(f"non-numeric event count {count_s!r}")

    raw = []
    for pos, entry in enumerate(paths_s.split(" ")):
        if not entry:
            fail("empty path entry")
        node_part, sep, t_s = entry.rpartition(":")
        if not sep:
            fail(f"missing ':<time>' in entry {entry!r}")
        try:
            t = int(t_s)
        except ValueError:
            fail(f"non-numeric time in entry {entry!r}")
        if t < 0:
            fail(f"negative time in entry {entry!r}")
        chain = node_part.split("/")
        if any(not u for u in chain):
            fail(f"empty user in entry {entry!r}")
        if len(chain) == 1:
            if pos != 0 or chain[0] != root_user or t != 0:
                fail(f"unexpected single-node entry {entry!r}")
            continue
        raw.append((t, chain[-1], chain[-2]))

    if len(raw) != num_events:
        fail(f"event count field says {num_events}, found {len(raw)} events")

    raw.sort(key=lambda e: e[0])  # stable: ties keep list order
    known = {root_user}
    events = []
    for t, child, parent in raw:
        if parent not in known:
            fail(f"unknown parent {parent!r}")
        if child in known:
            fail(f"duplicate user {child!r}")
        known.add(child)
        events.append((child, parent, t))
    return CascadeRecord(cascade_id, root_user, publish_time, events)


def parse_corpus(path):
    records = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if line.strip() == "":
                continue
            records.append(parse_line(line, line_no))
    return records


def format_line(record):
    """Canonical corpus line: full root-to-node paths, leading root entry."""
    paths = {record.root_user: record.root_user}
    entries = [f"{record.root_user}:0"]
    for child, parent, t in record.events:
        paths[child] = f"{paths[parent]}/{child}"
        entries.append(f"{paths[child]}:{t}")
    return (
        f"{record.cascade_id}\t{record.root_user}\t{record.publish_time}"
        f"\t{len(record.events)}\t{' '.join(entries)}"
    )


def build_graph(record, t_obs, max_observed=None):
    """Truncate a record at t_obs (inclusive) and build its CascadeGraph.

    When the observed event count exceeds max_observed, only the first
    max_observed events become graph edges.
    """
    observed = [e for e in record.events if e[2] <= t_obs]
    if max_observed is not None:
        observed = observed[:max_observed]
    users = [record.root_user]
    join = [0]
    index = {record.root_user: 0}
    edges = []
    for child, parent, t in observed:
        index[child] = len(users)
        users.append(child)
        join.append(t)
        edges.append((index[child], index[parent], t))
    return CascadeGraph(users, join, edges, t_obs)


def build_labeled(record, cfg):
    """Observed graph plus growth label, or None if below the size filter.

    The cap on observed size limits the model input only; the label is the
    true growth count between t_obs and t_pred.
    """
    n_obs = sum(1 for e in record.events if e[2] <= cfg.t_obs)
    if n_obs < cfg.min_observed:
        return None
    n_pred = sum(1 for e in record.events if e[2] <= cfg.t_pred)
    graph = build_graph(record, cfg.t_obs, cfg.max_observed)
    return LabeledCascade(record.cascade_id, graph, n_pred - n_obs)


def split_dataset(cascades, ratios=(0.70, 0.15, 0.15), seed=0):
    """Deterministic shuffled partition into (train, val, test)."""
    if not cascades:
        raise ValueError("split_dataset: empty input")
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigError(f"split ratios must sum to 1, got {ratios}")
    idx = list(range(len(cascades)))
    random.Random(seed).shuffle(idx)
    n = len(cascades)
    n_train = int(n * ratios[0])
    n_val = int(n * ratios[1])
    train = [cascades[i] for i in idx[:n_train]]
    val = [cascades[i] for i in idx[n_train:n_train + n_val]]
    test = [cascades[i] for i in idx[n_train + n_val:]]
    return train, val, test


def size_change(graph, t1, t2):
    """Edge-count change over (t2, t1]; requires t1 >= t2."""
    if t1 < t2:
        raise ValueError(f"size_change: t1 ({t1}) < t2 ({t2})")
    return graph.size_at(t1) - graph.size_at(t2)


@dataclass
class CorpusStats:
    n_cascades: int
    total_nodes: int
    total_edges: int
    avg_hops: float
    avg_growth: float


def corpus_stats(cascades):
    """Summary statistics over labeled cascades.

    avg_hops is the mean over cascades of the mean root distance of the
    non-root nodes; avg_growth is the mean label.
    """
    if not cascades:
        raise ValueError("corpus_stats: empty corpus")
    hops = []
    growth = []
    nodes = 0
    edges = 0
    for lc in cascades:
        g = lc.graph
        nodes += g.n_nodes
        edges += len(g.edges)
        depth = g.depths()
        non_root = depth[1:]
        if non_root:
            hops.append(sum(non_root) / len(non_root))
        growth.append(lc.delta_p)
    avg_hops = sum(hops) / len(hops) if hops else 0.0
    return CorpusStats(
        n_cascades=len(cascades),
        total_nodes=nodes,
        total_edges=edges,
        avg_hops=avg_hops,
        avg_growth=sum(growth) / len(growth),
    )
