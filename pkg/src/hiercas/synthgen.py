"""Synthetic cascade generator: a subcritical branching process with
exponential waiting times and per-user influence multipliers.

Every generated cascade satisfies the corpus invariants (forest rooted at
the original post, strictly positive sorted integer offsets), so the full
pipeline can be exercised without any external corpus.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cascade_data import CascadeRecord, format_line

__all__ = ["GenParams", "generate_cascade", "generate_corpus"]


@dataclass
class GenParams:
    base_branching: float = 6.0       # mean direct retweets of the root
    child_branching: float = 0.7      # mean offspring of a non-root node, < 1
    decay_rate: float = 1.0 / 600.0   # exponential kernel rate per time unit
    user_pool: int = 100_000
    influence_spread: float = 0.5     # lognormal sigma; multiplier has mean 1
    horizon: int = 86_400             # events past this offset are dropped
    seed: int = 0
    max_events: int = 5_000           # hard safety cap

    def __post_init__(self):
        if self.base_branching < 0:
            raise ValueError("base_branching must be >= 0")
        if not 0 <= self.child_branching < 1:
            raise ValueError("child_branching must be in [0, 1) for finite cascades")
        if self.decay_rate <= 0:
            raise ValueError("decay_rate must be positive")
        if self.influence_spread < 0:
            raise ValueError("influence_spread must be >= 0")
        if self.user_pool < 2:
            raise ValueError("user_pool must hold at least root plus one retweeter")
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")


def _influence(p, rng):
    # lognormal with mean exactly 1 so branching stays calibrated
    if p.influence_spread == 0:
        return 1.0
    s = p.influence_spread
    return float(rng.lognormal(mean=-0.5 * s * s, sigma=s))


def generate_cascade(p, rng, cascade_id="c0", publish_time=0):
    """Draw one cascade; each node spawns Poisson(branching * influence)
    children with exponential waiting times, truncated at the horizon."""
    taken = set()

    def fresh_user():
        while True:
            u = int(rng.integers(0, p.user_pool))
            if u not in taken:
                taken.add(u)
                return f"u{u}"

    root = fresh_user()
    events = []
    queue = [(0, root, True)]  # (abs_offset, user, is_root)
    seq = 0
    while queue and len(events) < p.max_events:
        t_par, user, is_root = queue.pop(0)
        branching = p.base_branching if is_root else p.child_branching
        mu = branching * _influence(p, rng)
        n_children = int(rng.poisson(mu))
        for _ in range(n_children):
            wait = max(1, int(round(rng.exponential(1.0 / p.decay_rate))))
            t_child = t_par + wait
            if t_child > p.horizon:
                continue
            child = fresh_user()
            seq += 1
            events.append((t_child, seq, child, user))
            queue.append((t_child, child, False))

    events.sort(key=lambda e: (e[0], e[1]))
    return CascadeRecord(
        cascade_id=cascade_id,
        root_user=root,
        publish_time=publish_time,
        events=[(child, parent, t) for t, _, child, parent in events],
    )


def generate_corpus(p, n_cascades, path=None):
    """Generate n cascades (per-cascade derived seeds) and optionally write
    them in the corpus format. Returns the records."""
    records = []
    for i in range(n_cascades):
        rng = np.random.default_rng((p.seed, i))
        records.append(generate_cascade(p, rng, cascade_id=f"c{i}"))
    if path is not None:
        with open(path, "w", encoding="utf-8") as fh:
            for rec in records:
                fh.write(format_line(rec) + "\n")
    return records
