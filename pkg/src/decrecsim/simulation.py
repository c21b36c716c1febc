"""Round engine: periodic neighbor refresh, per-client local training,
gradient exchange, benign-side defenses, adversary-side attacks, and metric
snapshots.

Rounds are 1-based so the neighbor refresh condition (round mod period = 1)
fires on the very first round.  Adversaries behave benignly during round 1
(concealment before the initial neighbor identification) and attack from
round 2 on.  Every randomized step draws from a stream keyed by (root seed,
domain, client, round), so thread-parallel execution is bit-identical to
sequential execution.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from decrecsim import rng as rngmod
from decrecsim.attacks import (
    AdversaryState,
    AttackCoordinator,
    adversary_collab_update,
    baseline_poison,
    build_adversary_dataset,
    pamn_poison,
    select_substitute_items,
    update_adversary_user_embedding,
)
from decrecsim.config import ExperimentConfig, resolve_trim_k
from decrecsim.dataset import Dataset
from decrecsim.defenses import (
    MemoryBank,
    build_round_rows,
    item_krum_aggregate,
    l2_clip_aggregate,
    median_aggregate,
    trimmed_mean_aggregate,
    ucsu_aggregate,
)
from decrecsim.errors import ConfigError, ContractError
from decrecsim.metrics import MetricsRecord, evaluate_world
from decrecsim.model import (
    LOCAL_BATCH_SIZE,
    AdamState,
    ClientState,
    GradientPacket,
    apply_neighbor_aggregate,
    compute_gradients,
    init_client_state,
    local_train_step,
)
from decrecsim.neighbors import NeighborMap, assign_neighbors, make_hyperplanes, sketch_item_table


@dataclass
class World:
    """Full mutable state of one simulated deployment."""

    clients: list[ClientState]
    optimizers: list[AdamState]
    pairs: list[np.ndarray]
    dataset: Dataset
    neighbor_map: NeighborMap | None
    adversary_ids: frozenset[int]
    adversaries: dict[int, AdversaryState]
    banks: dict[int, MemoryBank]
    target_items: np.ndarray
    hyperplanes: np.ndarray
    round: int
    rng_root: int
    extra: dict = field(default_factory=dict)

    @property
    def num_clients(self) -> int:
        return len(self.clients)

    def benign_ids(self) -> list[int]:
        return [i for i in range(self.num_clients) if i not in self.adversary_ids]


def select_cold_targets(dataset: Dataset, num_targets: int, root_seed: int) -> np.ndarray:
    """Sample targets uniformly from the coldest decile by train popularity."""
    if num_targets > dataset.num_items:
        raise ConfigError("num_targets exceeds the item count")
    counts = np.zeros(dataset.num_items, dtype=np.int64)
    for tr in dataset.train:
        counts[tr] += 1
    order = np.lexsort((np.arange(dataset.num_items), counts))
    pool_size = max(num_targets, math.ceil(dataset.num_items / 10))
    pool = order[:pool_size]
    gen = rngmod.stream(root_seed, rngmod.DOMAIN_TARGET_CHOICE)
    return np.sort(pool[gen.choice(len(pool), size=num_targets, replace=False)])


def init_world(config: ExperimentConfig, dataset: Dataset) -> World:
    """Create benign clients from the dataset plus appended adversaries.

    The adversary count is ceil(xi * benign users) when an attack is
    configured, zero otherwise.  All parameters come from per-client streams
    derived from the root seed.
    """
    num_users = dataset.num_users
    root = int(config.seed)

    if config.target_items is not None:
        targets = np.asarray(sorted(set(config.target_items)), dtype=np.int64)
        if targets.min() < 0 or targets.max() >= dataset.num_items:
            raise ConfigError("target item absent from the item index")
    else:
        targets = select_cold_targets(dataset, config.num_targets, root)

    n_adv = math.ceil(config.xi * num_users) if config.attack != "none" else 0

    clients: list[ClientState] = []
    optimizers: list[AdamState] = []
    pairs: list[np.ndarray] = []
    for u in range(num_users):
        state = init_client_state(
            dataset.num_items,
            config.embed_dim,
            list(config.layer_widths),
            rngmod.stream(root, rngmod.DOMAIN_CLIENT_INIT, u),
        )
        clients.append(state)
        optimizers.append(AdamState.for_state(state))
        pairs.append(dataset.pairs[u])

    adversaries: dict[int, AdversaryState] = {}
    shared_user = rngmod.stream(root, rngmod.DOMAIN_SHARED_USER).uniform(
        -0.05, 0.05, size=config.embed_dim
    )
    for j in range(n_adv):
        cid = num_users + j
        state = init_client_state(
            dataset.num_items,
            config.embed_dim,
            list(config.layer_widths),
            rngmod.stream(root, rngmod.DOMAIN_CLIENT_INIT, cid),
        )
        data_seed = int(
            np.random.SeedSequence(
                [root, rngmod.DOMAIN_ADVERSARY_DATA, cid]
            ).generate_state(1)[0]
        )
        positives, adv_pairs = build_adversary_dataset(
            dataset.num_items,
            targets,
            config.alpha,
            data_seed,
            neg_ratio=config.neg_ratio,
            include_targets=(config.attack == "ra"),
        )
        fixed_user = None
        if config.attack == "psmu":
            fixed_user = shared_user.copy()
            state.user_vec = shared_user.copy()
        adversaries[cid] = AdversaryState(
            client_id=cid,
            base=state,
            positives=positives,
            pairs=adv_pairs,
            strategy=config.attack,
            fixed_user=fixed_user,
        )
        clients.append(state)
        optimizers.append(AdamState.for_state(state))
        pairs.append(adv_pairs)

    banks: dict[int, MemoryBank] = {}
    if config.defense == "ucsu":
        banks = {u: MemoryBank(config.capacity_rounds) for u in range(num_users)}

    hyperplanes = make_hyperplanes(
        config.embed_dim, config.sketch_dim, rngmod.stream(root, rngmod.DOMAIN_HYPERPLANES)
    )
    return World(
        clients=clients,
        optimizers=optimizers,
        pairs=pairs,
        dataset=dataset,
        neighbor_map=None,
        adversary_ids=frozenset(adversaries),
        adversaries=adversaries,
        banks=banks,
        target_items=targets,
        hyperplanes=hyperplanes,
        round=0,
        rng_root=root,
    )


def _empty_packet(state: ClientState, sender: int, round_no: int) -> GradientPacket:
    return GradientPacket(
        sender=sender,
        round=round_no,
        item_idx=np.zeros(0, dtype=np.int64),
        item_rows=np.zeros((0, state.layout.embed_dim)),
        net_grad=np.zeros_like(state.net),
    )


def _map_clients(worker, ids: list[int], workers: int) -> list:
    if workers <= 1:
        return [worker(i) for i in ids]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(worker, ids))


def _refresh_due(t: int, period: int) -> bool:
    # period 1 means refresh every round; t mod 1 = 1 never holds.
    return period == 1 or t % period == 1


def run_round(world: World, config: ExperimentConfig) -> None:
    """Advance the world by one round of the integration loop."""
    if world.round < 0:
        raise ContractError("world round must be >= 0")
    t = world.round + 1
    lr = config.lr

    # Phase 1: the server refreshes neighbors from everyone's sketches.
    if _refresh_due(t, config.refresh_every):
        if config.raw_similarity:
            sketches = np.stack(
                [c.item_table.ravel() for c in world.clients]
            ).astype(np.float32)
            world.neighbor_map = assign_neighbors(
                sketches, config.neighbors, t, sign_sketches=False
            )
        else:
            sketches = np.stack(
                [sketch_item_table(c.item_table, world.hyperplanes) for c in world.clients]
            )
            world.neighbor_map = assign_neighbors(sketches, config.neighbors, t)

    nbr = world.neighbor_map

    # Phase 2: every client trains locally and produces its honest packet.
    def train_one(i: int) -> GradientPacket:
        state = world.clients[i]
        local_pairs = world.pairs[i]
        if len(local_pairs) == 0:
            return _empty_packet(state, i, t)
        perm = rngmod.stream(
            world.rng_root, rngmod.DOMAIN_ROUND_SHUFFLE, i, t
        ).permutation(len(local_pairs))
        shuffled = local_pairs[perm]
        keep_user_fixed = i in world.adversaries and world.adversaries[i].fixed_user is not None
        for start in range(0, len(shuffled), LOCAL_BATCH_SIZE):
            local_train_step(
                state,
                shuffled[start : start + LOCAL_BATCH_SIZE],
                world.optimizers[i],
                lr,
                update_user=not keep_user_fixed,
            )
        _, packet = compute_gradients(state, local_pairs, sender=i, round_no=t)
        return packet

    all_ids = list(range(world.num_clients))
    packets: list[GradientPacket] = _map_clients(train_one, all_ids, config.workers)

    # Phase 3: adversaries absorb neighbor knowledge, then craft this
    # round's outgoing packets (from round 2 on; round 1 conceals).
    outgoing: dict[int, GradientPacket] = {}
    adv_ids = sorted(world.adversary_ids)
    for a in adv_ids:
        neigh = nbr.neighbors_of(a) if nbr is not None else np.zeros(0, dtype=np.int64)
        if len(neigh):
            adversary_collab_update(
                world.adversaries[a], [packets[k] for k in neigh.tolist()], lr
            )
    if adv_ids and t >= 2:
        coord = None
        if config.attack == "pamn":
            coord = AttackCoordinator(
                embeddings={a: world.clients[a].user_vec.copy() for a in adv_ids},
                lam=config.lam,
                norm_order=config.p,
            )

        def attack_one(a: int) -> GradientPacket:
            adv = world.adversaries[a]
            if config.attack == "pamn":
                update_adversary_user_embedding(adv, coord, lr)
                adv.substitute_items = select_substitute_items(
                    adv, world.target_items, config.s
                )
                return pamn_poison(
                    adv, world.target_items, config.top_k, config.e_ft, lr, t
                )
            if config.attack == "psmu":
                adv.substitute_items = select_substitute_items(
                    adv, world.target_items, config.s
                )
            return baseline_poison(
                adv, world.target_items, config.attack, config.top_k, config.e_ft, lr, t
            )

        for a, pkt in zip(adv_ids, _map_clients(attack_one, adv_ids, config.workers)):
            outgoing[a] = pkt

    # Phase 4: benign clients apply the configured defense and aggregate.
    final_packets = [outgoing.get(i, packets[i]) for i in all_ids]
    benign = world.benign_ids()

    shared_rows = None
    slices = None
    if config.defense == "ucsu":
        shared_rows = build_round_rows(
            final_packets, t, mu=config.mu, p=config.p, clip=config.ucsu_clip
        )
        slices = shared_rows.sender_slices()
    net_matrix = np.stack([p.net_grad for p in final_packets])

    def defend_one(i: int) -> None:
        state = world.clients[i]
        neigh = nbr.neighbors_of(i) if nbr is not None else np.zeros(0, dtype=np.int64)
        if len(neigh) == 0:
            return
        ordered = np.sort(neigh)
        pkts = [final_packets[k] for k in ordered.tolist()]
        if config.defense == "none":
            apply_neighbor_aggregate(state, pkts, lr)
            return
        if config.defense == "ucsu":
            refs = [
                np.arange(slices[k].start, slices[k].stop, dtype=np.int32)
                for k in ordered.tolist()
                if k in slices
            ]
            refs_cat = (
                np.concatenate(refs) if refs else np.zeros(0, dtype=np.int32)
            )
            items, rows = ucsu_aggregate(
                world.banks[i],
                (shared_rows, refs_cat),
                config.nu,
                t,
                p=config.p,
                mu=config.mu,
                clean_bank=config.ucsu_clean_bank,
                clip=config.ucsu_clip,
            )
        elif config.defense == "median":
            items, rows = median_aggregate(pkts)
        elif config.defense == "trimmed":
            items, rows = trimmed_mean_aggregate(
                pkts, resolve_trim_k(config.trim_k, len(pkts))
            )
        elif config.defense == "krum":
            items, rows = item_krum_aggregate(pkts)
        elif config.defense == "l2clip":
            items, rows = l2_clip_aggregate(pkts, config.mu, config.p)
        else:
            raise ConfigError(f"unknown defense: {config.defense!r}")
        if len(items):
            state.item_table[items] -= lr * rows
        state.net -= lr * net_matrix[ordered].mean(axis=0)

    _map_clients(defend_one, benign, config.workers)
    world.round = t


def run_experiment(
    config: ExperimentConfig, dataset: Dataset, keep_world: bool = False
) -> list[MetricsRecord] | tuple[list[MetricsRecord], World]:
    """Run T rounds, evaluating every eval_every rounds plus rounds 0 and T."""
    world = init_world(config, dataset)
    records = [_snapshot(world, config)]
    for t in range(1, config.rounds + 1):
        run_round(world, config)
        if t % config.eval_every == 0 or t == config.rounds:
            records.append(_snapshot(world, config))
    return (records, world) if keep_world else records


def _snapshot(world: World, config: ExperimentConfig) -> MetricsRecord:
    return evaluate_world(
        world,
        config.top_k,
        attack=config.attack,
        defense=config.defense,
        seed=config.seed,
        fraction_mode=config.hr_fraction,
    )
