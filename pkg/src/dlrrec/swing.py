"""SWING similarity over the user-item bipartite graph.

Two items are similar when pairs of users who both interacted with them
have little else in common:

    s(i, j) = sum over unordered user pairs {u, v} in U_i & U_j of 1 / (alpha + |I_u & I_v|)

The user-side score is the same formula with the roles of users and items
swapped.
"""

from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path
from typing import Iterable

from .dataio import ConfigError, InteractionRecord


@dataclass
class BipartiteGraph:
    user_items: dict[str, frozenset[str]] = field(default_factory=dict)
    item_users: dict[str, frozenset[str]] = field(default_factory=dict)

    def neighbors(self, side: str) -> dict[str, frozenset[str]]:
        """Adjacency keyed by entities on ``side``."""
        return self.user_items if side == "user" else self.item_users

    def counterparts(self, side: str) -> dict[str, frozenset[str]]:
        return self.item_users if side == "user" else self.user_items


def build_graph(records: Iterable[InteractionRecord], positive_only: bool = True) -> BipartiteGraph:
    ui: dict[str, set[str]] = defaultdict(set)
    iu: dict[str, set[str]] = defaultdict(set)
    for r in records:
        if positive_only and r.label != 1:
            continue
        ui[r.user_id].add(r.item_id)
        iu[r.item_id].add(r.user_id)
    return BipartiteGraph({k: frozenset(v) for k, v in ui.items()},
                          {k: frozenset(v) for k, v in iu.items()})


def _check_alpha(alpha: float) -> None:
    if not alpha > 0:
        raise ConfigError(f"alpha must be > 0, got {alpha}")


def _pair_score(adj: dict, other_adj: dict, a: str, b: str, alpha: float) -> float:
    common = adj.get(a, frozenset()) & adj.get(b, frozenset())
    total = 0.0
    for x, y in combinations(sorted(common), 2):
        total += 1.0 / (alpha + len(other_adj[x] & other_adj[y]))
    return total


def swing_item_similarity(g: BipartiteGraph, i: str, j: str, alpha: float = 1.0) -> float:
    _check_alpha(alpha)
    if i == j:
        raise ValueError("swing similarity needs two distinct items")
    return _pair_score(g.item_users, g.user_items, i, j, alpha)


def swing_user_similarity(g: BipartiteGraph, u: str, v: str, alpha: float = 1.0) -> float:
    _check_alpha(alpha)
    if u == v:
        raise ValueError("swing similarity needs two distinct users")
    return _pair_score(g.user_items, g.item_users, u, v, alpha)


def swing_scores(g: BipartiteGraph, side: str, alpha: float = 1.0) -> dict[tuple[str, str], float]:
    """All nonzero pair scores on ``side``, keyed by ``(a, b)`` with ``a < b``.

    Iterates over pairs of counterparts instead of pairs of entities: every
    counterpart pair {x, y} with overlap C = N(x) & N(y) adds the same weight
    to each entity pair inside C. Counterpart pairs are visited in sorted
    order, so each entity pair receives its terms in the same order as the
    direct definition and the sums agree bitwise.
    """
    _check_alpha(alpha)
    mid = g.counterparts(side)  # counterpart -> entities on `side`
    scores: dict[tuple[str, str], float] = defaultdict(float)
    for x, y in combinations(sorted(mid), 2):
        common = mid[x] & mid[y]
        if len(common) < 2:
            continue
        w = 1.0 / (alpha + len(common))
        for pair in combinations(sorted(common), 2):
            scores[pair] += w
    return dict(scores)


@dataclass
class SimilarityGraph:
    side: str
    alpha: float
    k: int
    neighbors: dict[str, list[tuple[str, float]]]

    def to_json(self) -> dict:
        return {
            "side": self.side,
            "alpha": self.alpha,
            "k": self.k,
            "neighbors": {key: [[n, s] for n, s in lst] for key, lst in sorted(self.neighbors.items())},
        }

    @classmethod
    def from_json(cls, obj: dict) -> "SimilarityGraph":
        if obj.get("side") not in ("user", "item"):
            raise ValueError(f"bad similarity side {obj.get('side')!r}")
        nbrs = {key: [(str(n), float(s)) for n, s in lst] for key, lst in obj["neighbors"].items()}
        return cls(obj["side"], float(obj["alpha"]), int(obj["k"]), nbrs)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1) + "\n")

    @classmethod
    def load(cls, path) -> "SimilarityGraph":
        return cls.from_json(json.loads(Path(path).read_text()))


def rank_neighbors(scores: dict[tuple[str, str], float], entities: Iterable[str], k: int) -> dict[str, list[tuple[str, float]]]:
    per: dict[str, list[tuple[str, float]]] = {e: [] for e in sorted(entities)}
    for (a, b), s in scores.items():
        if s > 0:
            per[a].append((b, s))
            per[b].append((a, s))
    return {e: sorted(lst, key=lambda t: (-t[1], t[0]))[:k] for e, lst in per.items()}


def top_k_neighbors(g: BipartiteGraph, side: str, k: int = 10, alpha: float = 1.0) -> SimilarityGraph:
    if side not in ("user", "item"):
        raise ValueError(f"side must be 'user' or 'item', got {side!r}")
    if k < 1:
        raise ConfigError(f"k must be >= 1, got {k}")
    scores = swing_scores(g, side, alpha)
    return SimilarityGraph(side, alpha, k, rank_neighbors(scores, g.neighbors(side), k))
