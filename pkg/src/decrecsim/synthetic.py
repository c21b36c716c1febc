"""Deterministic synthetic interaction data in MovieLens format.

Generates clustered implicit-feedback data with a popularity skew: users
belong to preference clusters and mostly interact with their own cluster's
items, whose within-cluster popularity follows a Zipf profile.  Useful as a
desk-scale stand-in for real rating files; the repo ships a small generated
fixture for fast tests.
"""

from __future__ import annotations

import argparse

import numpy as np


def generate_interactions(
    num_users: int,
    num_items: int,
    seed: int,
    clusters: int = 6,
    zipf_s: float = 1.05,
    mix: float = 0.85,
    act_mean: float = 3.3,
    act_sigma: float = 0.45,
    act_min: int = 8,
    act_max: int = 120,
) -> list[tuple[int, int]]:
    """Sample (user, item) interactions; ids are 0-based and deterministic."""
    rng = np.random.default_rng(np.random.SeedSequence([int(seed)]))
    perm = rng.permutation(num_items)
    item_cluster = np.empty(num_items, dtype=np.int64)
    for c in range(clusters):
        item_cluster[perm[c::clusters]] = c

    weights = np.empty(num_items)
    for c in range(clusters):
        members = np.flatnonzero(item_cluster == c)
        ranks = rng.permutation(len(members))
        weights[members] = 1.0 / (ranks + 1.0) ** zipf_s
    global_p = weights / weights.sum()

    user_cluster = rng.integers(0, clusters, size=num_users)
    activity = np.clip(
        np.round(rng.lognormal(act_mean, act_sigma, size=num_users)),
        act_min,
        act_max,
    ).astype(np.int64)

    cluster_items = [np.flatnonzero(item_cluster == c) for c in range(clusters)]
    cluster_p = [weights[ci] / weights[ci].sum() for ci in cluster_items]

    out: list[tuple[int, int]] = []
    for u in range(num_users):
        c = int(user_cluster[u])
        want = int(activity[u])
        chosen: list[int] = []
        seen: set[int] = set()
        attempts = 0
        while len(chosen) < want and attempts < 20:
            n_draw = (want - len(chosen)) * 2
            in_cluster = rng.random(n_draw) < mix
            draws = np.where(
                in_cluster,
                cluster_items[c][rng.choice(len(cluster_items[c]), size=n_draw, p=cluster_p[c])],
                rng.choice(num_items, size=n_draw, p=global_p),
            )
            for item in draws.tolist():
                if item not in seen:
                    seen.add(item)
                    chosen.append(item)
                    if len(chosen) >= want:
                        break
            attempts += 1
        out.extend((u, item) for item in chosen)
    return out


def write_movielens_dat(path: str, interactions: list[tuple[int, int]]) -> None:
    """Write user::item::rating::timestamp lines with 1-based ids."""
    with open(path, "w", encoding="utf-8") as fh:
        for ts, (u, i) in enumerate(interactions):
            fh.write(f"{u + 1}::{i + 1}::5::{978300000 + ts}\n")


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        description="Generate a synthetic MovieLens-format interaction file."
    )
    parser.add_argument("--users", type=int, required=True)
    parser.add_argument("--items", type=int, required=True)
    parser.add_argument("--seed", type=int, default=7)
    parser.add_argument("--clusters", type=int, default=6)
    parser.add_argument("--zipf-s", type=float, default=1.05)
    parser.add_argument("--mix", type=float, default=0.85)
    parser.add_argument("--act-mean", type=float, default=3.3)
    parser.add_argument("--act-sigma", type=float, default=0.45)
    parser.add_argument("--act-min", type=int, default=8)
    parser.add_argument("--act-max", type=int, default=120)
    parser.add_argument("--out", required=True)
    args = parser.parse_args(argv)
    interactions = generate_interactions(
        args.users,
        args.items,
        args.seed,
        clusters=args.clusters,
        zipf_s=args.zipf_s,
        mix=args.mix,
        act_mean=args.act_mean,
        act_sigma=args.act_sigma,
        act_min=args.act_min,
        act_max=args.act_max,
    )
    write_movielens_dat(args.out, interactions)
    print(f"wrote {len(interactions)} interactions to {args.out}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
