"""Continuous-time bipartite interaction graph.

Users and items live in disjoint dense index spaces. Every interaction is an
edge carrying a real-valued timestamp; multi-edges are kept. The graph is
immutable once built, so any number of workers may query it concurrently.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

USER = "user"
ITEM = "item"

# A node reference is a (side, index) pair, e.g. (USER, 3) or (ITEM, 17).
NodeRef = tuple


@dataclass(frozen=True, slots=True)
class Interaction:
    """One (user, item, timestamp) event with dense ids."""

    user: int
    item: int
    timestamp: float


@dataclass(frozen=True, slots=True)
class SplitDataset:
    """Chronological train/valid/test partition of an interaction list."""

    train: list
    valid: list
    test: list
    boundary_times: tuple  # (last train timestamp, last valid timestamp)

    @property
    def all_interactions(self):
        return self.train + self.valid + self.test


def interactions_to_arrays(interactions):
    """Column arrays (users, items, times) from a list of Interaction."""
    n = len(interactions)
    users = np.empty(n, dtype=np.int64)
    items = np.empty(n, dtype=np.int64)
    times = np.empty(n, dtype=np.float64)
    for k, ev in enumerate(interactions):
        users[k] = ev.user
        items[k] = ev.item
        times[k] = ev.timestamp
    return users, items, times


class Ctbg:
    """Time-indexed bipartite adjacency with strictly-before-t queries.

    Adjacency lists are sorted ascending by timestamp with ties kept in
    input order. All arrays are frozen after construction.
    """

    def __init__(self, user_nbr_ids, user_nbr_times, item_nbr_ids, item_nbr_times, num_edges):
        self._nbr_ids = {USER: user_nbr_ids, ITEM: item_nbr_ids}
        self._nbr_times = {USER: user_nbr_times, ITEM: item_nbr_times}
        self.num_users = len(user_nbr_ids)
        self.num_items = len(item_nbr_ids)
        self.num_edges = num_edges
        for side in (USER, ITEM):
            for arr in self._nbr_ids[side] + self._nbr_times[side]:
                arr.flags.writeable = False

    def check_node(self, node):
        side, index = node
        if side not in (USER, ITEM):
            raise ValueError(f"unknown node side {side!r}")
        count = self.num_users if side == USER else self.num_items
        if not 0 <= index < count:
            raise ValueError(f"unknown {side} node {index} (have {count})")

    def adjacency(self, node):
        """All edges of ``node`` as (counterpart ids, timestamps), time-sorted."""
        self.check_node(node)
        side, index = node
        return self._nbr_ids[side][index], self._nbr_times[side][index]

    def degree(self, node):
        return len(self.adjacency(node)[0])

    def neighbors_before(self, node, t):
        """Edges of ``node`` strictly earlier than ``t``, time-sorted.

        Returns (counterpart ids, timestamps); both may be empty.
        """
        ids, times = self.adjacency(node)
        pos = int(np.searchsorted(times, t, side="left"))
        return ids[:pos], times[:pos]

    def sample_neighbors(self, node, t, s, seed):
        """Draw a fixed-size neighbor set from the strictly-before-``t`` pool.

        Uniform without replacement when the pool holds at least ``s``
        edges; smaller non-empty pools are kept whole and padded with
        uniform with-replacement draws so downstream tensors stay
        fixed-size. Output is time-sorted. The draw is a pure function of
        (graph, node, t, s, seed); an empty pool yields empty arrays.
        """
        if s < 1:
            raise ValueError("sample size must be >= 1")
        ids, times = self.neighbors_before(node, t)
        n = len(ids)
        if n == 0:
            return ids, times
        rng = np.random.default_rng(_sample_entropy(seed, node, t))
        if n >= s:
            take = rng.choice(n, size=s, replace=False)
        else:
            take = np.concatenate([np.arange(n), rng.integers(0, n, size=s - n)])
        order = np.lexsort((take, times[take]))
        take = take[order]
        return ids[take], times[take]


def _sample_entropy(seed, node, t):
    """Integer entropy tuple for the per-(node, t) sampling stream."""
    side, index = node
    t_bits = int(np.float64(t).view(np.uint64))
    return (int(seed), 0 if side == USER else 1, int(index), t_bits)


def build_graph(interactions, num_users=None, num_items=None):
    """Assemble an immutable Ctbg from a list of interactions.

    Ids must already be dense; pass ``num_users``/``num_items`` to declare
    the index spaces (inferred from the data when omitted). Duplicate
    (user, item, timestamp) triplets are kept as distinct edges.
    """
    if not interactions:
        raise ValueError("cannot build a graph from an empty interaction list")
    users, items, times = interactions_to_arrays(interactions)
    if not np.all(np.isfinite(times)):
        raise ValueError("timestamps must be finite")
    if times.min() < 0:
        raise ValueError("timestamps must be non-negative")
    if num_users is None:
        num_users = int(users.max()) + 1
    if num_items is None:
        num_items = int(items.max()) + 1
    if users.min() < 0 or users.max() >= num_users:
        raise ValueError(f"user id out of range [0, {num_users})")
    if items.min() < 0 or items.max() >= num_items:
        raise ValueError(f"item id out of range [0, {num_items})")

    # Global stable sort by time, then stable-group by node: within each
    # node the edges end up time-sorted with ties in input order.
    time_order = np.argsort(times, kind="stable")
    u_s, i_s, t_s = users[time_order], items[time_order], times[time_order]

    user_ids, user_times = _bucket(u_s, i_s, t_s, num_users)
    item_ids, item_times = _bucket(i_s, u_s, t_s, num_items)
    return Ctbg(user_ids, user_times, item_ids, item_times, len(interactions))


def _bucket(keys, counterparts, times, num_keys):
    group_order = np.argsort(keys, kind="stable")
    keys_g = keys[group_order]
    ids_g = counterparts[group_order]
    times_g = times[group_order]
    starts = np.searchsorted(keys_g, np.arange(num_keys + 1))
    ids_out, times_out = [], []
    for k in range(num_keys):
        lo, hi = starts[k], starts[k + 1]
        ids_out.append(ids_g[lo:hi].copy())
        times_out.append(times_g[lo:hi].copy())
    return ids_out, times_out


def neighbors_before(graph, node, t):
    return graph.neighbors_before(node, t)


def sample_neighbors(graph, node, t, s, seed):
    return graph.sample_neighbors(node, t, s, seed)


def chronological_split(interactions, ratios=(0.8, 0.1, 0.1)):
    """Partition interactions into contiguous time-ordered train/valid/test.

    Sizes are floor(r0*N), floor(r1*N) and the remainder. Timestamp ties at
    the boundaries are resolved by stable input order.
    """
    n = len(interactions)
    if n < 3:
        raise ValueError("need at least 3 interactions to split")
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must be 3 non-negative values summing to 1, got {ratios}")
    times = np.array([ev.timestamp for ev in interactions], dtype=np.float64)
    order = np.argsort(times, kind="stable")
    ordered = [interactions[k] for k in order]
    n_train = int(np.floor(ratios[0] * n + 1e-9))
    n_valid = int(np.floor(ratios[1] * n + 1e-9))
    train = ordered[:n_train]
    valid = ordered[n_train:n_train + n_valid]
    test = ordered[n_train + n_valid:]
    t_train_end = train[-1].timestamp if train else float("-inf")
    t_valid_end = valid[-1].timestamp if valid else t_train_end
    return SplitDataset(train=train, valid=valid, test=test,
                        boundary_times=(t_train_end, t_valid_end))
