"""Defense aggregators vs brute-force oracles, clipping bounds, and the
memory-bank lifecycle."""

import math

import numpy as np
import pytest

from decrecsim.defenses import (
    MemoryBank,
    adaptive_clip,
    build_round_rows,
    clip_row,
    item_krum_aggregate,
    l2_clip_aggregate,
    median_aggregate,
    trimmed_mean_aggregate,
    ucsu_aggregate,
)
from decrecsim.errors import ContractError
from helpers import (
    brute_force_krum,
    brute_force_median,
    brute_force_top_nu,
    brute_force_trimmed,
    packet,
)


def random_packets(rng, n_pkts, num_items, dim, p_touch=0.5):
    pkts = []
    for s in range(n_pkts):
        rows = {
            int(i): rng.normal(size=dim) * rng.choice([0.1, 1.0, 10.0])
            for i in range(num_items)
            if rng.random() < p_touch
        }
        pkts.append(packet(s, rows, np.zeros(2), dim=dim))
    return pkts


class TestClipRow:
    def test_below_threshold_unchanged(self):
        g = np.array([0.3, 0.4])
        assert np.array_equal(clip_row(g, mu=1.0), g)

    def test_hand_example(self):
        out = clip_row(np.array([3.0, 4.0]), mu=1.0)
        assert np.allclose(out, [0.6, 0.8])

    def test_norm_bounded(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            g = rng.normal(size=4) * rng.choice([0.1, 10.0])
            assert np.linalg.norm(clip_row(g, mu=1.0)) <= 1.0 + 1e-12

    def test_zero_row(self):
        assert np.array_equal(clip_row(np.zeros(3), mu=0.5), np.zeros(3))

    def test_l1_norm(self):
        out = clip_row(np.array([1.0, 1.0]), mu=1.0, p=1)
        assert np.allclose(out, [0.5, 0.5])

    def test_bad_mu(self):
        with pytest.raises(ContractError):
            clip_row(np.ones(2), mu=0.0)

    def test_sum_bound_over_subsets(self):
        # after clipping, any subset sum has norm at most mu * subset size
        rng = np.random.default_rng(1)
        mu = 0.7
        rows = [clip_row(rng.normal(size=5) * rng.choice([0.1, 3.0, 40.0]), mu) for _ in range(40)]
        for _ in range(200):
            size = int(rng.integers(1, 41))
            subset = rng.choice(40, size=size, replace=False)
            total = np.sum([rows[i] for i in subset], axis=0)
            assert np.linalg.norm(total) <= mu * size + 1e-9


class TestAdaptiveClip:
    def test_equal_norms_unchanged(self):
        rows = np.array([[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]])
        assert np.allclose(adaptive_clip(rows), rows)

    def test_hand_example(self):
        rows = np.array([[1.0, 0.0], [0.0, 1.0], [4.0, 0.0]])
        out = adaptive_clip(rows)
        assert np.allclose(out[0], [1.0, 0.0])
        assert np.allclose(out[1], [0.0, 1.0])
        assert np.allclose(out[2], [2.0, 0.0])

    def test_max_norm_at_most_mean(self):
        rng = np.random.default_rng(2)
        for _ in range(30):
            rows = rng.normal(size=(6, 3)) * rng.choice([0.1, 1.0, 5.0], size=(6, 1))
            out = adaptive_clip(rows)
            m = np.linalg.norm(rows, axis=1).mean()
            assert np.linalg.norm(out, axis=1).max() <= m + 1e-9

    def test_zero_rows_pass(self):
        rows = np.array([[0.0, 0.0], [3.0, 4.0]])
        out = adaptive_clip(rows)
        assert np.array_equal(out[0], [0.0, 0.0])

    def test_empty_rejected(self):
        with pytest.raises(ContractError):
            adaptive_clip(np.zeros((0, 3)))


class TestMedian:
    def test_hand_median_odd(self):
        pkts = [
            packet(0, {0: np.array([1.0, 1.0])}, np.zeros(2)),
            packet(1, {0: np.array([2.0, 2.0])}, np.zeros(2)),
            packet(2, {0: np.array([100.0, 100.0])}, np.zeros(2)),
        ]
        items, rows = median_aggregate(pkts)
        assert items.tolist() == [0]
        assert np.allclose(rows[0], [2.0, 2.0])

    def test_even_count_averages_middles(self):
        pkts = [
            packet(0, {0: np.array([1.0])}, np.zeros(2)),
            packet(1, {0: np.array([3.0])}, np.zeros(2)),
        ]
        _, rows = median_aggregate(pkts)
        assert rows[0][0] == 2.0

    def test_single_packet_identity(self):
        pkts = [packet(0, {2: np.array([5.0, -1.0])}, np.zeros(2))]
        items, rows = median_aggregate(pkts)
        assert items.tolist() == [2]
        assert np.allclose(rows[0], [5.0, -1.0])

    def test_matches_brute_force(self):
        rng = np.random.default_rng(3)
        for trial in range(300):
            n_pkts = int(rng.integers(1, 8))
            num_items = int(rng.integers(1, 6))
            dim = int(rng.integers(1, 4))
            pkts = random_packets(rng, n_pkts, num_items, dim)
            expect = brute_force_median(pkts, num_items, dim)
            items, rows = median_aggregate(pkts)
            assert items.tolist() == sorted(expect)
            for k, item in enumerate(items.tolist()):
                assert np.allclose(rows[k], expect[item], atol=1e-12), f"trial {trial}"


class TestTrimmedMean:
    def test_hand_example(self):
        pkts = [
            packet(s, {0: np.array([v])}, np.zeros(2))
            for s, v in enumerate([1.0, 2.0, 3.0, 4.0, 100.0])
        ]
        _, rows = trimmed_mean_aggregate(pkts, trim_k=1)
        assert rows[0][0] == pytest.approx(3.0)

    def test_trim_zero_is_plain_mean(self):
        pkts = [
            packet(0, {1: np.array([2.0, 0.0])}, np.zeros(2)),
            packet(1, {1: np.array([4.0, 2.0])}, np.zeros(2)),
        ]
        _, rows = trimmed_mean_aggregate(pkts, trim_k=0)
        assert np.allclose(rows[0], [3.0, 1.0])

    def test_constant_values(self):
        pkts = [packet(s, {0: np.array([7.0])}, np.zeros(2)) for s in range(5)]
        _, rows = trimmed_mean_aggregate(pkts, trim_k=1)
        assert rows[0][0] == pytest.approx(7.0)

    def test_fallback_when_too_few(self):
        pkts = [packet(s, {0: np.array([float(s)])}, np.zeros(2)) for s in range(3)]
        _, rows = trimmed_mean_aggregate(pkts, trim_k=2)  # 3 <= 2*2 -> plain mean
        assert rows[0][0] == pytest.approx(1.0)

    def test_matches_brute_force(self):
        rng = np.random.default_rng(4)
        for trial in range(300):
            n_pkts = int(rng.integers(1, 9))
            num_items = int(rng.integers(1, 6))
            dim = int(rng.integers(1, 4))
            trim_k = int(rng.integers(0, 4))
            pkts = random_packets(rng, n_pkts, num_items, dim)
            expect = brute_force_trimmed(pkts, num_items, dim, trim_k)
            items, rows = trimmed_mean_aggregate(pkts, trim_k)
            assert items.tolist() == sorted(expect)
            for k, item in enumerate(items.tolist()):
                assert np.allclose(rows[k], expect[item], atol=1e-12), f"trial {trial}"


class TestItemKrum:
    def test_hand_distances(self):
        pkts = [
            packet(0, {0: np.array([0.0, 0.0])}, np.zeros(2)),
            packet(1, {0: np.array([1.0, 1.0])}, np.zeros(2)),
            packet(2, {0: np.array([10.0, 10.0])}, np.zeros(2)),
        ]
        _, rows = item_krum_aggregate(pkts)
        assert np.allclose(rows[0], [1.0, 1.0])

    def test_single_row_identity(self):
        pkts = [packet(0, {3: np.array([2.0, -2.0])}, np.zeros(2))]
        items, rows = item_krum_aggregate(pkts)
        assert items.tolist() == [3]
        assert np.allclose(rows[0], [2.0, -2.0])

    def test_identical_rows(self):
        pkts = [packet(s, {0: np.array([4.0, 4.0])}, np.zeros(2)) for s in range(3)]
        _, rows = item_krum_aggregate(pkts)
        assert np.allclose(rows[0], [4.0, 4.0])

    def test_matches_brute_force(self):
        rng = np.random.default_rng(5)
        for trial in range(300):
            n_pkts = int(rng.integers(1, 8))
            num_items = int(rng.integers(1, 6))
            dim = int(rng.integers(1, 4))
            pkts = random_packets(rng, n_pkts, num_items, dim)
            expect = brute_force_krum(pkts, num_items, dim)
            items, rows = item_krum_aggregate(pkts)
            assert items.tolist() == sorted(expect)
            for k, item in enumerate(items.tolist()):
                assert np.allclose(rows[k], expect[item], atol=1e-12), f"trial {trial}"


class TestL2Clip:
    def test_hand_example(self):
        pkts = [
            packet(0, {0: np.array([3.0, 4.0])}, np.zeros(2)),
            packet(1, {0: np.array([0.0, 0.0])}, np.zeros(2)),
        ]
        _, rows = l2_clip_aggregate(pkts, mu=1.0)
        assert np.allclose(rows[0], [0.3, 0.4])

    def test_inactive_clip_equals_plain_mean(self):
        pkts = [
            packet(0, {0: np.array([0.1, 0.2])}, np.zeros(2)),
            packet(1, {0: np.array([0.3, 0.0])}, np.zeros(2)),
        ]
        _, rows = l2_clip_aggregate(pkts, mu=10.0)
        assert np.allclose(rows[0], [0.2, 0.1])

    def test_pre_mean_norms_bounded(self):
        rng = np.random.default_rng(6)
        pkts = random_packets(rng, 5, 4, 3)
        rr = build_round_rows(pkts, round_no=1, mu=1.0, p=2, clip=True)
        assert np.all(rr.norms <= 1.0 + 1e-12)


def bank_with(entries, capacity=10):
    """entries: list of (round, sender, {item: row})"""
    bank = MemoryBank(capacity)
    by_round: dict[int, list] = {}
    for rnd, sender, rows in entries:
        by_round.setdefault(rnd, []).append(packet(sender, rows, np.zeros(2), round_no=rnd))
    for rnd in sorted(by_round):
        rr = build_round_rows(by_round[rnd], rnd, clip=False)
        bank.ingest(rr, np.arange(len(rr.items), dtype=np.int32))
    return bank


class TestMemoryBank:
    def test_ten_entries_ten_percent_pops_one(self):
        entries = [(1, s, {0: np.full(2, float(s + 1))}) for s in range(10)]
        bank = bank_with(entries)
        items, rows = bank.pop_top_fraction(0.10)
        assert len(items) == 1
        assert np.allclose(rows[0], [10.0, 10.0])  # the largest norm
        assert bank.size() == 9

    def test_largest_norm_selected(self):
        entries = [(1, 0, {0: np.array([5.0, 0.0])})]
        entries += [(1, s, {0: np.array([1.0, 0.0])}) for s in range(1, 10)]
        bank = bank_with(entries)
        items, rows = bank.pop_top_fraction(0.10)
        assert np.allclose(rows[0], [5.0, 0.0])

    def test_tie_break_insertion_order(self):
        entries = [(1, s, {s: np.array([1.0, 0.0])}) for s in range(4)]
        bank = bank_with(entries)
        items, _ = bank.pop_top_fraction(0.5)
        assert items.tolist() == [0, 1]  # earliest inserted win the tie

    def test_eviction_by_age(self):
        entries = [(1, 0, {0: np.ones(2)}), (5, 1, {1: np.ones(2)})]
        bank = bank_with(entries, capacity=3)
        bank.evict(current_round=5)
        kept = [(r, item) for r, _, item, _ in bank.entries()]
        assert kept == [(5, 1)]

    def test_selection_matches_brute_force(self):
        rng = np.random.default_rng(7)
        for trial in range(300):
            n = int(rng.integers(1, 25))
            norms = rng.choice([0.5, 1.0, 2.0, 3.5], size=n)  # many ties
            entries = [
                (1, s, {int(rng.integers(0, 5)): np.array([norms[s], 0.0])})
                for s in range(n)
            ]
            nu = float(rng.uniform(0.05, 1.0))
            bank = bank_with(entries)
            stored = [(float(np.linalg.norm(row)), j) for j, (_, _, _, row) in enumerate(bank.entries())]
            expect_rows = brute_force_top_nu(stored, nu)
            items, rows = bank.pop_top_fraction(nu)
            assert len(items) == len(expect_rows), f"trial {trial}"
            got = [float(np.linalg.norm(r)) for r in rows]
            want = sorted((stored[j][0] for j in expect_rows), reverse=True)
            assert got == want, f"trial {trial}"

    def test_conservation(self):
        # every ingested row is banked, evicted by age, or applied exactly once
        rng = np.random.default_rng(8)
        bank = MemoryBank(capacity_rounds=3)
        ingested = 0
        applied = 0
        evictable = 0
        for rnd in range(1, 12):
            pkts = random_packets(rng, 4, 5, 2, p_touch=0.6)
            rr = build_round_rows(pkts, rnd, clip=False)
            before = bank.size()
            bank.ingest(rr, np.arange(len(rr.items), dtype=np.int32))
            ingested += len(rr.items)
            pre_evict = bank.size()
            bank.evict(rnd)
            evictable += pre_evict - bank.size()
            items, _ = bank.pop_top_fraction(0.3)
            applied += len(items)
        assert ingested == applied + evictable + bank.size()


class TestUcsuAggregate:
    def test_empty_everything_is_noop(self):
        bank = MemoryBank(10)
        items, rows = ucsu_aggregate(bank, [], nu=0.1, current_round=1)
        assert len(items) == 0

    def test_single_round_lifecycle(self):
        bank = MemoryBank(10)
        pkts = [
            packet(0, {0: np.array([3.0, 4.0])}, np.zeros(2)),
            packet(1, {1: np.array([0.1, 0.0])}, np.zeros(2)),
        ]
        items, rows = ucsu_aggregate(bank, pkts, nu=0.5, current_round=1, mu=1.0)
        # the clipped (0.6, 0.8) row is the largest and is popped
        assert items.tolist() == [0]
        assert np.allclose(rows[0], [0.6, 0.8])
        assert bank.size() == 1

    def test_clean_bank_variant_discards_rest(self):
        bank = MemoryBank(10)
        pkts = [
            packet(0, {0: np.array([0.9, 0.0])}, np.zeros(2)),
            packet(1, {1: np.array([0.1, 0.0])}, np.zeros(2)),
        ]
        ucsu_aggregate(bank, pkts, nu=0.5, current_round=1, clean_bank=True)
        assert bank.size() == 0

    def test_per_item_mean_of_selected(self):
        bank = MemoryBank(10)
        pkts = [
            packet(0, {0: np.array([0.8, 0.0])}, np.zeros(2)),
            packet(1, {0: np.array([0.6, 0.0])}, np.zeros(2)),
        ]
        items, rows = ucsu_aggregate(bank, pkts, nu=1.0, current_round=1, mu=10.0)
        # both rows selected; adaptive clip scales the larger to the mean norm
        assert items.tolist() == [0]
        assert rows[0][0] == pytest.approx((0.7 + 0.6) / 2.0)

    def test_retention_enables_later_application(self):
        bank = MemoryBank(capacity_rounds=10)
        big = packet(0, {0: np.array([0.9, 0.0])}, np.zeros(2))
        small = packet(1, {1: np.array([0.5, 0.0])}, np.zeros(2))
        items1, _ = ucsu_aggregate(bank, [big, small], nu=0.5, current_round=1)
        assert items1.tolist() == [0]
        items2, _ = ucsu_aggregate(bank, [], nu=1.0, current_round=2)
        assert items2.tolist() == [1]  # the held-back row surfaces later
