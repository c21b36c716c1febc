"""Ranking metrics over benign users: top-K lists, hit rate, exposure rate.

Rankings exclude a user's train positives; held-out test items stay in the
candidate pool.  Adversary clients never contribute to either metric.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from decrecsim.errors import ContractError
from decrecsim.model import ClientState, score_items


class UndefinedMetricError(ValueError):
    """Raised when a metric has an empty population."""


@dataclass
class MetricsRecord:
    """One evaluation snapshot of a run."""

    round: int
    hr_at_k: float
    er_at_k: float
    attack: str
    defense: str
    seed: int


def top_k_list(state: ClientState, k: int, exclude: np.ndarray | set) -> np.ndarray:
    """The k items with highest predicted rating outside `exclude`.

    Ordered by descending score, ties by ascending item id; returns all
    candidates when fewer than k remain.
    """
    if k < 1:
        raise ContractError("k must be >= 1")
    scores = score_items(state)
    excl = np.asarray(sorted(exclude) if isinstance(exclude, set) else exclude, dtype=np.int64)
    masked = scores.copy()
    if len(excl):
        masked[excl] = -np.inf
    ids = np.arange(state.num_items)
    order = np.lexsort((ids, -masked))
    n_candidates = state.num_items - len(excl)
    return order[: min(k, n_candidates)].astype(np.int64)


def _benign_ids(world) -> list[int]:
    return [i for i in range(len(world.clients)) if i not in world.adversary_ids]


def benign_top_lists(world, k: int) -> dict[int, np.ndarray]:
    """Top-k list per benign user, excluding that user's train positives."""
    return {
        u: top_k_list(world.clients[u], k, world.dataset.train[u])
        for u in _benign_ids(world)
    }


def exposure_rate(world, k: int, lists: dict[int, np.ndarray] | None = None) -> float:
    """Mean over targets of the fraction of eligible users exposing the target.

    A user is eligible for target t when they never interacted with t (train
    or test); the numerator counts eligible users whose top-k list contains
    t.  Targets with no eligible users contribute 0.
    """
    targets = np.asarray(world.target_items, dtype=np.int64)
    if len(targets) == 0:
        raise ContractError("exposure_rate requires a nonempty target set")
    if lists is None:
        lists = benign_top_lists(world, k)
    per_target = []
    for t in targets.tolist():
        eligible = 0
        exposed = 0
        for u, top in lists.items():
            interacted = t in world.dataset.train[u] or t in world.dataset.test[u]
            if interacted:
                continue
            eligible += 1
            if t in top:
                exposed += 1
        per_target.append(exposed / eligible if eligible else 0.0)
    return float(np.mean(per_target))


def hit_rate(
    world,
    k: int,
    lists: dict[int, np.ndarray] | None = None,
    fraction_mode: bool = False,
) -> float:
    """Mean over benign users with test items of the top-k hit indicator.

    With fraction_mode, each user contributes |top-k intersect test| / k
    instead of the 0/1 indicator.
    """
    if k < 1:
        raise ContractError("k must be >= 1")
    if lists is None:
        lists = benign_top_lists(world, k)
    values = []
    for u, top in lists.items():
        test = world.dataset.test[u]
        if len(test) == 0:
            continue
        inter = np.intersect1d(top, test, assume_unique=False)
        values.append(len(inter) / k if fraction_mode else float(len(inter) > 0))
    if not values:
        raise UndefinedMetricError("no benign user has held-out test items")
    return float(np.mean(values))


def evaluate_world(
    world, k: int, attack: str, defense: str, seed: int, fraction_mode: bool = False
) -> MetricsRecord:
    """Hit rate and exposure rate from one shared ranking pass."""
    lists = benign_top_lists(world, k)
    return MetricsRecord(
        round=world.round,
        hr_at_k=hit_rate(world, k, lists=lists, fraction_mode=fraction_mode),
        er_at_k=exposure_rate(world, k, lists=lists),
        attack=attack,
        defense=defense,
        seed=seed,
    )
