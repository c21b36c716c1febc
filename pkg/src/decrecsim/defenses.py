"""Benign-side aggregation defenses over received item-row gradients.

All defenses consume the item-row part of neighbor packets and produce
per-item aggregate rows; network-parameter gradients are always aggregated
by plain mean outside these functions.  For median / trimmed mean / Krum,
an item row absent from a packet counts as a zero vector, mirroring the
FedAvg convention of dividing by the packet count.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from decrecsim.errors import ContractError
from decrecsim.model import GradientPacket


def _norms(rows: np.ndarray, p: int) -> np.ndarray:
    if p < 1:
        raise ContractError("norm order must be >= 1")
    if len(rows) == 0:
        return np.zeros(0)
    return np.linalg.norm(rows, ord=p, axis=1)


def clip_row(grad_row: np.ndarray, mu: float, p: int = 2) -> np.ndarray:
    """Scale grad_row by min(1, mu / |grad_row|_p); zero rows pass through."""
    if mu <= 0:
        raise ContractError("mu must be > 0")
    row = np.asarray(grad_row, dtype=np.float64)
    norm = float(np.linalg.norm(row, ord=p))
    if norm <= mu:
        return row.copy()
    return row * (mu / norm)


def adaptive_clip(rows: np.ndarray, p: int = 2) -> np.ndarray:
    """Scale each row by min(1, mean_norm / own_norm); zero rows pass through."""
    rows = np.asarray(rows, dtype=np.float64)
    if rows.ndim != 2 or len(rows) == 0:
        raise ContractError("adaptive_clip requires a nonempty (n, dim) row matrix")
    norms = _norms(rows, p)
    m = float(norms.mean())
    factors = np.ones(len(rows))
    over = norms > m
    # zero rows never satisfy norms > m (m >= 0), so they pass unchanged
    factors[over] = m / norms[over]
    return rows * factors[:, None]


@dataclass
class RoundRows:
    """All item-row gradients received in one round, consolidated.

    One instance per round is shared by every receiving client's memory
    bank; each client references the subset of rows its neighbors sent.
    """

    round: int
    senders: np.ndarray  # (n,) int32
    items: np.ndarray  # (n,) int32
    rows: np.ndarray  # (n, embed_dim) float64
    norms: np.ndarray  # (n,) float64 p-norms

    def sender_slices(self) -> dict[int, slice]:
        """Contiguous row slice per sender (senders are stored sorted)."""
        out: dict[int, slice] = {}
        if len(self.senders) == 0:
            return out
        uniq, starts = np.unique(self.senders, return_index=True)
        ends = np.append(starts[1:], len(self.senders))
        for s, a, b in zip(uniq.tolist(), starts.tolist(), ends.tolist()):
            out[s] = slice(a, b)
        return out


def build_round_rows(
    packets: list[GradientPacket],
    round_no: int,
    mu: float = 1.0,
    p: int = 2,
    clip: bool = True,
) -> RoundRows:
    """Consolidate packets (ascending sender order) into one RoundRows.

    With clip enabled every row is clipped to the fixed mu bound before
    storage; clipping is receiver-independent, so the result may be shared.
    """
    ordered = sorted(packets, key=lambda q: q.sender)
    if ordered:
        senders = np.concatenate(
            [np.full(len(q.item_idx), q.sender, dtype=np.int32) for q in ordered]
        )
        items = np.concatenate([q.item_idx for q in ordered]).astype(np.int32)
        rows = (
            np.vstack([q.item_rows for q in ordered])
            if items.size
            else np.zeros((0, 0))
        )
    else:
        senders = np.zeros(0, dtype=np.int32)
        items = np.zeros(0, dtype=np.int32)
        rows = np.zeros((0, 0))
    norms = _norms(rows, p)
    if clip and len(rows):
        if mu <= 0:
            raise ContractError("mu must be > 0")
        factors = np.ones(len(rows))
        over = norms > mu
        factors[over] = mu / norms[over]
        rows = rows * factors[:, None]
        norms = np.minimum(norms, mu)
    return RoundRows(round=round_no, senders=senders, items=items, rows=rows, norms=norms)


class MemoryBank:
    """Per-client store of received item-row gradients awaiting application.

    Entries reference rows inside shared RoundRows objects and are kept in
    insertion order; selection pops the largest-norm entries with ties
    broken by insertion order, so the applied set matches a brute-force
    oracle exactly.
    """

    def __init__(self, capacity_rounds: int):
        if capacity_rounds < 1:
            raise ContractError("capacity_rounds must be >= 1")
        self.capacity_rounds = capacity_rounds
        self._rounds: dict[int, RoundRows] = {}
        self._round: np.ndarray = np.zeros(0, dtype=np.int32)
        self._ref: np.ndarray = np.zeros(0, dtype=np.int32)
        self._norm: np.ndarray = np.zeros(0)
        self._item: np.ndarray = np.zeros(0, dtype=np.int32)

    def ingest(self, rr: RoundRows, refs: np.ndarray) -> None:
        """Bank the given row indices of a round's consolidated gradients."""
        refs = np.asarray(refs, dtype=np.int32)
        if len(refs) == 0:
            return
        self._rounds[rr.round] = rr
        self._round = np.concatenate(
            [self._round, np.full(len(refs), rr.round, dtype=np.int32)]
        )
        self._ref = np.concatenate([self._ref, refs])
        self._norm = np.concatenate([self._norm, rr.norms[refs]])
        self._item = np.concatenate([self._item, rr.items[refs]])

    def evict(self, current_round: int) -> None:
        """Drop entries with round_received older than current - capacity_rounds."""
        horizon = current_round - self.capacity_rounds
        keep = self._round >= horizon
        if not keep.all():
            self._apply_mask(keep)
        for r in [r for r in self._rounds if r < horizon]:
            del self._rounds[r]

    def _apply_mask(self, keep: np.ndarray) -> None:
        self._round = self._round[keep]
        self._ref = self._ref[keep]
        self._norm = self._norm[keep]
        self._item = self._item[keep]

    def clear(self) -> None:
        self._rounds = {}
        self._round = np.zeros(0, dtype=np.int32)
        self._ref = np.zeros(0, dtype=np.int32)
        self._norm = np.zeros(0)
        self._item = np.zeros(0, dtype=np.int32)

    def size(self) -> int:
        return len(self._norm)

    def entries(self) -> list[tuple[int, int, int, np.ndarray]]:
        """(round_received, sender, item, grad_row) for every banked row."""
        out = []
        for r, ref, item in zip(
            self._round.tolist(), self._ref.tolist(), self._item.tolist()
        ):
            rr = self._rounds[r]
            out.append((r, int(rr.senders[ref]), item, rr.rows[ref]))
        return out

    def pop_top_fraction(self, nu: float) -> tuple[np.ndarray, np.ndarray]:
        """Remove and return the top ceil(nu * size) rows by stored norm.

        Output is ordered by descending norm, insertion order on ties.
        """
        if not (0.0 < nu <= 1.0):
            raise ContractError("nu must be in (0, 1]")
        total = self.size()
        if total == 0:
            return np.zeros(0, dtype=np.int64), np.zeros((0, 0))
        k = math.ceil(nu * total)
        seq = np.arange(total)

        if k >= total:
            chosen = seq
        else:
            boundary = -np.partition(-self._norm, k - 1)[k - 1]
            strict = np.flatnonzero(self._norm > boundary)
            need = k - len(strict)
            equal = np.flatnonzero(self._norm == boundary)
            if need <= 0:
                take = equal[:0]
            elif need >= len(equal):
                take = equal
            else:
                # positions are unique, so the tie-break is deterministic
                take = equal[np.argpartition(equal, need - 1)[:need]]
            chosen = np.concatenate([strict, take])

        order = np.lexsort((chosen, -self._norm[chosen]))
        chosen = chosen[order]

        items = self._item[chosen].astype(np.int64)
        rows = self._gather_rows(chosen)

        keep = np.ones(total, dtype=bool)
        keep[chosen] = False
        self._apply_mask(keep)
        return items, rows

    def _gather_rows(self, positions: np.ndarray) -> np.ndarray:
        dim = next(iter(self._rounds.values())).rows.shape[1]
        out = np.empty((len(positions), dim))
        rounds = self._round[positions]
        refs = self._ref[positions]
        for r in np.unique(rounds).tolist():
            sel = rounds == r
            out[sel] = self._rounds[r].rows[refs[sel]]
        return out


def _per_item_mean(items: np.ndarray, rows: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    uniq, inverse = np.unique(items, return_inverse=True)
    acc = np.zeros((len(uniq), rows.shape[1]))
    np.add.at(acc, inverse, rows)
    counts = np.bincount(inverse, minlength=len(uniq)).astype(np.float64)
    return uniq, acc / counts[:, None]


def ucsu_aggregate(
    bank: MemoryBank,
    incoming: list[GradientPacket] | tuple[RoundRows, np.ndarray],
    nu: float,
    current_round: int,
    p: int = 2,
    mu: float = 1.0,
    clean_bank: bool = False,
    clip: bool = True,
) -> tuple[np.ndarray, np.ndarray]:
    """Clip, bank, pop the top-nu fraction by norm, rescale, and average.

    Incoming rows are clipped with the fixed mu bound, inserted into the
    bank, then entries beyond the retention window are evicted.  The top
    ceil(nu * bank size) rows by norm are removed, rescaled by the adaptive
    mean-norm clip, and averaged per item.  Rows left unselected stay
    banked unless clean_bank is set, which discards them (the literal
    pop-and-clean variant).  `incoming` is either raw packets or an already
    consolidated (RoundRows, row indices) pair shared across receivers.
    Returns (item ids, aggregate rows); an empty bank yields an empty
    aggregate.
    """
    if not (0.0 < nu <= 1.0):
        raise ContractError("nu must be in (0, 1]")
    if isinstance(incoming, tuple):
        rr, refs = incoming
    else:
        rr = build_round_rows(incoming, current_round, mu=mu, p=p, clip=clip)
        refs = np.arange(len(rr.items), dtype=np.int32)
    bank.ingest(rr, refs)
    bank.evict(current_round)
    if bank.size() == 0:
        return np.zeros(0, dtype=np.int64), np.zeros((0, 0))
    items, rows = bank.pop_top_fraction(nu)
    rows = adaptive_clip(rows, p)
    if clean_bank:
        bank.clear()
    return _per_item_mean(items, rows)


def _concat_packets(
    packets: list[GradientPacket],
) -> tuple[list[int], np.ndarray, np.ndarray, np.ndarray, int]:
    """Sender ids, concatenated item ids / rows / packet positions, embed dim."""
    if not packets:
        raise ContractError("aggregation requires at least one packet")
    ordered = sorted(packets, key=lambda q: q.sender)
    senders = [int(q.sender) for q in ordered]
    dim = 0
    for q in ordered:
        if len(q.item_idx) and q.item_rows.ndim == 2:
            dim = q.item_rows.shape[1]
            break
    idx_cat = np.concatenate([q.item_idx for q in ordered]).astype(np.int64)
    if idx_cat.size:
        rows_cat = np.vstack([q.item_rows for q in ordered if len(q.item_idx)])
        pos_cat = np.concatenate(
            [np.full(len(q.item_idx), pi, dtype=np.int64) for pi, q in enumerate(ordered)]
        )
    else:
        rows_cat = np.zeros((0, dim))
        pos_cat = np.zeros(0, dtype=np.int64)
    return senders, idx_cat, rows_cat, pos_cat, dim


def _merged_rank_values(vals_sorted: np.ndarray, zeros: int, rank: int) -> np.ndarray:
    """Element at the given rank of each column merged with `zeros` zero values."""
    nnz, dim = vals_sorted.shape
    n_neg = (vals_sorted < 0).sum(axis=0)
    n_zero_vals = (vals_sorted == 0).sum(axis=0)
    out = np.zeros(dim)
    lo = rank < n_neg
    hi = rank >= n_neg + n_zero_vals + zeros
    idx = np.where(lo, rank, rank - zeros)
    idx = np.clip(idx, 0, max(nnz - 1, 0))
    picked = np.take_along_axis(vals_sorted, idx[None, :], axis=0)[0]
    out[lo | hi] = picked[lo | hi]
    return out


def median_aggregate(packets: list[GradientPacket]) -> tuple[np.ndarray, np.ndarray]:
    """Coordinate-wise median per item over all packets, absent rows as zero.

    Even counts average the two middle values.  Items absent from every
    packet are untouched (not returned).
    """
    senders, idx_cat, rows_cat, _, dim = _concat_packets(packets)
    n_pkts = len(senders)
    uniq = np.unique(idx_cat)
    out = np.zeros((len(uniq), dim))
    if idx_cat.size == 0:
        return uniq, out
    counts = np.bincount(idx_cat, minlength=int(idx_cat.max()) + 1)
    mid_lo = (n_pkts - 1) // 2
    mid_hi = n_pkts // 2
    for k, item in enumerate(uniq.tolist()):
        # With at most (n_pkts - 1) // 2 carriers the zero block always
        # spans both middle ranks, so the median row is exactly zero.
        if counts[item] <= (n_pkts - 1) // 2:
            continue
        vals = np.sort(rows_cat[idx_cat == item], axis=0)
        zeros = n_pkts - counts[item]
        lo = _merged_rank_values(vals, zeros, mid_lo)
        hi = lo if mid_hi == mid_lo else _merged_rank_values(vals, zeros, mid_hi)
        out[k] = 0.5 * (lo + hi)
    return uniq, out


def _tail_sum(svals: np.ndarray, zeros: int, k: int, smallest: bool) -> np.ndarray:
    """Sum of the k smallest (or largest) values per column, with implicit zeros.

    In the merged ascending order the implicit zeros sit between negative
    and positive values, so a tail takes same-sign values first, then
    zeros, then spills into the opposite-sign block.
    """
    cols = svals if smallest else -svals[::-1]
    _, dim = cols.shape
    n_front = (cols < 0).sum(axis=0)
    n_zero_vals = (cols == 0).sum(axis=0)
    take_front = np.minimum(k, n_front)
    spill = np.maximum(k - n_front - n_zero_vals - zeros, 0)
    prefix = np.vstack([np.zeros(dim), np.cumsum(cols, axis=0)])
    cidx = np.arange(dim)
    front = prefix[take_front, cidx]
    back_start = n_front + n_zero_vals
    back = prefix[back_start + spill, cidx] - prefix[back_start, cidx]
    result = front + back
    return result if smallest else -result


def trimmed_mean_aggregate(
    packets: list[GradientPacket], trim_k: int
) -> tuple[np.ndarray, np.ndarray]:
    """Per coordinate, drop the trim_k smallest and largest values, mean the rest.

    Absent rows count as zero.  When a coordinate has too few values
    (count <= 2 * trim_k) the plain mean is used instead.
    """
    if trim_k < 0:
        raise ContractError("trim_k must be >= 0")
    senders, idx_cat, rows_cat, _, dim = _concat_packets(packets)
    n_pkts = len(senders)
    uniq = np.unique(idx_cat)
    out = np.zeros((len(uniq), dim))
    if idx_cat.size == 0:
        return uniq, out
    if trim_k == 0 or n_pkts <= 2 * trim_k:
        sums = np.bincount(
            (idx_cat[:, None] * dim + np.arange(dim)[None, :]).ravel(),
            weights=rows_cat.ravel(),
            minlength=(int(idx_cat.max()) + 1) * dim,
        ).reshape(-1, dim)
        return uniq, sums[uniq] / n_pkts
    counts = np.bincount(idx_cat, minlength=int(idx_cat.max()) + 1)
    keep_n = n_pkts - 2 * trim_k
    for k, item in enumerate(uniq.tolist()):
        # Items carried by at most trim_k packets lose every nonzero value
        # to the trimmed tails.
        if counts[item] <= trim_k:
            continue
        svals = np.sort(rows_cat[idx_cat == item], axis=0)
        zeros = n_pkts - counts[item]
        total = svals.sum(axis=0)
        low = _tail_sum(svals, zeros, trim_k, smallest=True)
        high = _tail_sum(svals, zeros, trim_k, smallest=False)
        out[k] = (total - low - high) / keep_n
    return uniq, out


def item_krum_aggregate(packets: list[GradientPacket]) -> tuple[np.ndarray, np.ndarray]:
    """Per item, the single received row closest (l2) to the mean of received rows.

    Absent rows count as zero rows; ties break by ascending sender id.
    """
    senders, idx_cat, rows_cat, pos_cat, dim = _concat_packets(packets)
    n_pkts = len(senders)
    uniq, inverse = np.unique(idx_cat, return_inverse=True)
    if idx_cat.size == 0:
        return uniq, np.zeros((0, dim))

    sums = np.zeros((len(uniq), dim))
    np.add.at(sums, inverse, rows_cat)
    means = sums / n_pkts

    # Candidate rows: every carried row, plus one zero row per item that at
    # least one packet omitted (the smallest absent sender represents it).
    # Squared distances computed as ((x - m)**2).sum() keep the ordering
    # reproducible by a naive reimplementation.
    d_rows = ((rows_cat - means[inverse]) ** 2).sum(axis=1)
    sender_arr = np.asarray(senders, dtype=np.int64)
    cand_item = [inverse]
    cand_dist = [d_rows]
    cand_sender = [sender_arr[pos_cat]]
    cand_rowid = [np.arange(len(idx_cat), dtype=np.int64)]

    carried = np.zeros((len(uniq), n_pkts), dtype=bool)
    carried[inverse, pos_cat] = True
    has_zero = ~carried.all(axis=1)
    if has_zero.any():
        zero_items = np.flatnonzero(has_zero)
        first_absent = np.argmax(~carried[zero_items], axis=1)
        cand_item.append(zero_items)
        cand_dist.append((means[zero_items] ** 2).sum(axis=1))
        cand_sender.append(sender_arr[first_absent])
        cand_rowid.append(np.full(len(zero_items), -1, dtype=np.int64))

    items_all = np.concatenate(cand_item)
    dist_all = np.concatenate(cand_dist)
    sender_all = np.concatenate(cand_sender)
    rowid_all = np.concatenate(cand_rowid)
    order = np.lexsort((sender_all, dist_all, items_all))
    _, firsts = np.unique(items_all[order], return_index=True)
    winners = order[firsts]

    out = np.zeros((len(uniq), dim))
    won_rows = rowid_all[winners]
    carried_winners = won_rows >= 0
    out[items_all[winners][carried_winners]] = rows_cat[won_rows[carried_winners]]
    return uniq, out


def l2_clip_aggregate(
    packets: list[GradientPacket], mu: float, p: int = 2
) -> tuple[np.ndarray, np.ndarray]:
    """Clip every received row to the fixed mu bound, then plain FedAvg mean."""
    if mu <= 0:
        raise ContractError("mu must be > 0")
    senders, idx_cat, rows_cat, _, dim = _concat_packets(packets)
    uniq = np.unique(idx_cat)
    if idx_cat.size == 0:
        return uniq, np.zeros((0, dim))
    norms = _norms(rows_cat, p)
    factors = np.ones(len(rows_cat))
    over = norms > mu
    factors[over] = mu / norms[over]
    clipped = rows_cat * factors[:, None]
    sums = np.bincount(
        (idx_cat[:, None] * dim + np.arange(dim)[None, :]).ravel(),
        weights=clipped.ravel(),
        minlength=(int(idx_cat.max()) + 1) * dim,
    ).reshape(-1, dim)
    return uniq, sums[uniq] / len(senders)
