"""Interaction loading, filtering, binarization, split, and negative sampling.

The pipeline is: load_interactions -> preprocess -> (optional
subsample_most_active) -> split_and_sample.  All randomized steps are pure
functions of (input, seed).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from decrecsim.errors import ContractError, EmptyDatasetError, ParseError


@dataclass
class RawInteractions:
    """Parsed interaction records in file order.

    Each record is (user_id, item_id, rating, timestamp); timestamp is None
    when the source format omitted it.
    """

    records: list[tuple[str, str, float, int | None]] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)


@dataclass
class Precursor:
    """Filtered, binarized, densely re-indexed interactions (pre-split).

    ``user_items[u]`` holds user u's distinct positive items in first
    interaction order.  Indices are dense, assigned by first appearance in
    the surviving records.
    """

    num_users: int
    num_items: int
    user_items: list[np.ndarray]

    def interaction_count(self) -> int:
        return int(sum(len(items) for items in self.user_items))


@dataclass
class Dataset:
    """Per-user local datasets after split and negative sampling.

    ``pairs[u]`` is an (n, 2) int array of (train positive, sampled negative)
    rows; ``negatives[u]`` is the sampled-negative multiset (the second pair
    column).  Train/test are sorted index arrays.
    """

    num_users: int
    num_items: int
    train: list[np.ndarray]
    test: list[np.ndarray]
    pairs: list[np.ndarray]

    @property
    def negatives(self) -> list[np.ndarray]:
        return [p[:, 1] for p in self.pairs]


def load_interactions(path: str, fmt: str = "movielens_dat") -> RawInteractions:
    """Parse a ratings file into RawInteractions.

    movielens_dat lines are ``user::item::rating::timestamp``; csv files have
    a ``user,item,rating[,timestamp]`` header.  A malformed line raises
    ParseError naming its 1-based line number.
    """
    if fmt not in ("movielens_dat", "csv"):
        raise ContractError(f"unknown dataset format: {fmt!r}")
    try:
        with open(path, "r", encoding="utf-8") as fh:
            lines = fh.read().splitlines()
    except OSError as exc:
        raise OSError(f"cannot read interactions file {path}: {exc}") from exc

    records: list[tuple[str, str, float, int | None]] = []
    if fmt == "movielens_dat":
        for lineno, line in enumerate(lines, start=1):
            if not line.strip():
                continue
            parts = line.split("::")
            if len(parts) != 4:
                raise ParseError(f"{path}: line {lineno}: expected 4 '::'-separated fields")
            records.append(_make_record(path, lineno, *parts))
    else:
        if not lines:
            return RawInteractions([])
        header = [h.strip().lower() for h in lines[0].split(",")]
        if header not in (["user", "item", "rating"], ["user", "item", "rating", "timestamp"]):
            raise ParseError(f"{path}: line 1: expected header 'user,item,rating[,timestamp]'")
        for lineno, line in enumerate(lines[1:], start=2):
            if not line.strip():
                continue
            parts = [p.strip() for p in line.split(",")]
            if len(parts) not in (3, 4):
                raise ParseError(f"{path}: line {lineno}: expected 3 or 4 comma-separated fields")
            if len(parts) == 3:
                parts = parts + [""]
            records.append(_make_record(path, lineno, *parts))
    return RawInteractions(records)


def _make_record(
    path: str, lineno: int, user: str, item: str, rating: str, timestamp: str
) -> tuple[str, str, float, int | None]:
    if not user or not item:
        raise ParseError(f"{path}: line {lineno}: empty user or item id")
    try:
        r = float(rating)
    except ValueError:
        raise ParseError(f"{path}: line {lineno}: non-numeric rating {rating!r}") from None
    if not np.isfinite(r):
        raise ParseError(f"{path}: line {lineno}: non-finite rating {rating!r}")
    ts: int | None = None
    if timestamp != "":
        try:
            ts = int(timestamp)
        except ValueError:
            raise ParseError(f"{path}: line {lineno}: non-integer timestamp {timestamp!r}") from None
    return (user, item, r, ts)


def preprocess(raw: RawInteractions, min_count: int = 5) -> Precursor:
    """Filter sparse users/items to a fixpoint, binarize, and re-index densely.

    Exact duplicate (user, item) records are collapsed to their first
    occurrence before counting.  Filtering removes users and items with fewer
    than min_count interactions and iterates until none remain, since
    removing a user can drop an item below the threshold and vice versa.
    Dense indices follow first appearance order in the surviving records.
    """
    if min_count < 1:
        raise ContractError("min_count must be >= 1")
    if not raw.records:
        raise EmptyDatasetError("no interaction records to preprocess")

    users = np.array([r[0] for r in raw.records])
    items = np.array([r[1] for r in raw.records])
    _, u_codes = np.unique(users, return_inverse=True)
    _, i_codes = np.unique(items, return_inverse=True)

    # Drop duplicate (user, item) pairs, keeping the first occurrence.
    pair_key = u_codes.astype(np.int64) * (i_codes.max() + 1) + i_codes
    _, first_pos = np.unique(pair_key, return_index=True)
    keep = np.zeros(len(raw.records), dtype=bool)
    keep[first_pos] = True

    u = u_codes[keep]
    i = i_codes[keep]
    alive = np.ones(len(u), dtype=bool)
    while True:
        u_counts = np.bincount(u[alive], minlength=u_codes.max() + 1)
        i_counts = np.bincount(i[alive], minlength=i_codes.max() + 1)
        bad = alive & ((u_counts[u] < min_count) | (i_counts[i] < min_count))
        if not bad.any():
            break
        alive &= ~bad
        if not alive.any():
            raise EmptyDatasetError(
                f"min_count={min_count} filtered out every interaction"
            )

    return _reindex(u[alive], i[alive])


def _reindex(u: np.ndarray, i: np.ndarray) -> Precursor:
    """Densely re-index surviving (user, item) code pairs by first appearance."""
    u_order = _first_appearance_map(u)
    i_order = _first_appearance_map(i)
    u_new = u_order[u]
    i_new = i_order[i]
    num_users = int(u_new.max()) + 1
    num_items = int(i_new.max()) + 1
    user_items: list[list[int]] = [[] for _ in range(num_users)]
    for uu, ii in zip(u_new.tolist(), i_new.tolist()):
        user_items[uu].append(ii)
    return Precursor(
        num_users=num_users,
        num_items=num_items,
        user_items=[np.asarray(v, dtype=np.int64) for v in user_items],
    )


def _first_appearance_map(codes: np.ndarray) -> np.ndarray:
    """Map old codes to dense ids ordered by first appearance."""
    seen = np.full(int(codes.max()) + 1, -1, dtype=np.int64)
    nxt = 0
    for c in codes.tolist():
        if seen[c] < 0:
            seen[c] = nxt
            nxt += 1
    return seen


def subsample_most_active(pre: Precursor, num_users: int, min_count: int) -> Precursor:
    """Keep the num_users most active users, then re-run the filter fixpoint.

    Activity is the post-filter positive count; ties break by ascending user
    index.  The survivors are re-indexed densely in the original record
    order, so downstream seeds see a self-consistent dataset.
    """
    if num_users < 1:
        raise ContractError("subsample size must be >= 1")
    if num_users >= pre.num_users:
        return pre
    counts = np.array([len(v) for v in pre.user_items])
    order = np.lexsort((np.arange(pre.num_users), -counts))
    chosen = np.zeros(pre.num_users, dtype=bool)
    chosen[order[:num_users]] = True

    u_list: list[int] = []
    i_list: list[int] = []
    for uu in range(pre.num_users):
        if not chosen[uu]:
            continue
        for ii in pre.user_items[uu].tolist():
            u_list.append(uu)
            i_list.append(ii)
    u = np.asarray(u_list, dtype=np.int64)
    i = np.asarray(i_list, dtype=np.int64)

    alive = np.ones(len(u), dtype=bool)
    while True:
        u_counts = np.bincount(u[alive], minlength=pre.num_users)
        i_counts = np.bincount(i[alive], minlength=pre.num_items)
        bad = alive & ((u_counts[u] < min_count) | (i_counts[i] < min_count))
        if not bad.any():
            break
        alive &= ~bad
        if not alive.any():
            raise EmptyDatasetError("subsampling filtered out every interaction")
    return _reindex(u[alive], i[alive])


def split_and_sample(
    pre: Precursor, train_ratio: float, neg_ratio: int, seed: int
) -> Dataset:
    """Split positives into train/test and sample negatives per train positive.

    Per user, a seeded uniform-random train_ratio fraction of positives
    (rounded down, minimum 1) becomes train and the rest test.  Each train
    positive draws neg_ratio negatives without replacement from the user's
    never-interacted items; draws are independent across positives, so the
    per-user negative pool is a multiset.
    """
    if not (0.0 < train_ratio < 1.0):
        raise ContractError("train_ratio must be in (0, 1)")
    if neg_ratio < 0:
        raise ContractError("neg_ratio must be >= 0")

    all_items = np.arange(pre.num_items, dtype=np.int64)
    train: list[np.ndarray] = []
    test: list[np.ndarray] = []
    pairs: list[np.ndarray] = []
    for u in range(pre.num_users):
        positives = pre.user_items[u]
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), int(u)]))
        perm = rng.permutation(len(positives))
        n_train = max(1, int(len(positives) * train_ratio))
        tr = np.sort(positives[perm[:n_train]])
        te = np.sort(positives[perm[n_train:]])
        pool = np.setdiff1d(all_items, positives, assume_unique=False)
        rows: list[np.ndarray] = []
        for p in tr.tolist():
            k = min(neg_ratio, len(pool))
            if k == 0:
                continue
            negs = pool[rng.choice(len(pool), size=k, replace=False)]
            rows.append(np.column_stack([np.full(k, p, dtype=np.int64), negs]))
        train.append(tr)
        test.append(te)
        pairs.append(
            np.concatenate(rows, axis=0) if rows else np.empty((0, 2), dtype=np.int64)
        )
    return Dataset(
        num_users=pre.num_users,
        num_items=pre.num_items,
        train=train,
        test=test,
        pairs=pairs,
    )
