"""Shared builders and independent oracles for the test suite.

The oracles here are deliberately naive (double loops, dense matrices,
finite differences) and never call the implementation paths they check.
"""

from __future__ import annotations

import numpy as np

from decrecsim.model import ClientState, GradientPacket, NetLayout, bpr_loss, init_client_state


def make_state(
    seed: int,
    num_items: int = 20,
    embed_dim: int = 4,
    widths: tuple[int, ...] = (8, 6, 4),
    scale: float = 0.5,
) -> ClientState:
    """Random small client state with well-scaled weights."""
    rng = np.random.default_rng(seed)
    state = init_client_state(num_items, embed_dim, list(widths), rng)
    state.user_vec = rng.uniform(-scale, scale, size=embed_dim)
    state.item_table = rng.uniform(-scale, scale, size=(num_items, embed_dim))
    state.net = rng.uniform(-scale, scale, size=state.layout.size)
    # biases stay random here on purpose: the gradient check should cover them
    return state


def random_pairs(rng: np.random.Generator, num_items: int, n: int) -> np.ndarray:
    pos = rng.integers(0, num_items, size=n)
    neg = (pos + 1 + rng.integers(0, num_items - 1, size=n)) % num_items
    return np.column_stack([pos, neg]).astype(np.int64)


def min_preactivation(state: ClientState, items: np.ndarray) -> float:
    """Smallest |preactivation| across the forward pass; relu-kink guard."""
    k = state.layout.embed_dim
    x = np.empty((len(items), 2 * k))
    x[:, :k] = state.user_vec
    x[:, k:] = state.item_table[items]
    ws, bs, _ = state.layout.views(state.net)
    worst = np.inf
    h = x
    for mat, b in zip(ws, bs):
        a = h @ mat.T + b
        worst = min(worst, float(np.abs(a).min()))
        h = np.maximum(a, 0.0)
    return worst


def fd_scalar(fn, vec: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar function of a vector."""
    grad = np.zeros_like(vec)
    for i in range(vec.size):
        orig = vec.flat[i]
        vec.flat[i] = orig + eps
        hi = fn()
        vec.flat[i] = orig - eps
        lo = fn()
        vec.flat[i] = orig
        grad.flat[i] = (hi - lo) / (2.0 * eps)
    return grad


def assert_close_grad(analytic: np.ndarray, fd: np.ndarray, rtol: float = 1e-4) -> None:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(fd)), 1e-6)
    rel = np.abs(analytic - fd) / denom
    assert rel.max() < rtol, f"max relative error {rel.max():.3e}"


def full_bpr_fd_grads(
    state: ClientState, pairs: np.ndarray, eps: float = 1e-5
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """FD gradients of bpr_loss w.r.t. (user_vec, item_table, net)."""
    loss = lambda: bpr_loss(state, pairs)  # noqa: E731
    gu = fd_scalar(loss, state.user_vec, eps)
    gv = fd_scalar(loss, state.item_table, eps).reshape(state.item_table.shape)
    gn = fd_scalar(loss, state.net, eps)
    return gu, gv, gn


def packet(
    sender: int,
    rows: dict[int, np.ndarray],
    net: np.ndarray,
    round_no: int = 1,
    dim: int = 2,
) -> GradientPacket:
    idx = np.array(sorted(rows), dtype=np.int64)
    mat = (
        np.vstack([np.asarray(rows[i], dtype=np.float64) for i in idx.tolist()])
        if len(idx)
        else np.zeros((0, dim))
    )
    return GradientPacket(sender=sender, round=round_no, item_idx=idx, item_rows=mat, net_grad=net)


def dense_rows(packets: list[GradientPacket], num_items: int, dim: int) -> np.ndarray:
    """(num_packets, num_items, dim) dense matrix, absent rows zero."""
    out = np.zeros((len(packets), num_items, dim))
    for pi, p in enumerate(sorted(packets, key=lambda q: q.sender)):
        for k, item in enumerate(p.item_idx.tolist()):
            out[pi, item] = p.item_rows[k]
    return out


def brute_force_median(packets, num_items, dim):
    dense = dense_rows(packets, num_items, dim)
    touched = sorted({int(i) for p in packets for i in p.item_idx})
    return {i: np.median(dense[:, i, :], axis=0) for i in touched}


def brute_force_trimmed(packets, num_items, dim, trim_k):
    dense = dense_rows(packets, num_items, dim)
    touched = sorted({int(i) for p in packets for i in p.item_idx})
    out = {}
    n = len(packets)
    for i in touched:
        vals = np.sort(dense[:, i, :], axis=0)
        if trim_k == 0 or n <= 2 * trim_k:
            out[i] = vals.mean(axis=0)
        else:
            out[i] = vals[trim_k : n - trim_k].mean(axis=0)
    return out


def brute_force_krum(packets, num_items, dim):
    ordered = sorted(packets, key=lambda q: q.sender)
    dense = dense_rows(packets, num_items, dim)
    touched = sorted({int(i) for p in packets for i in p.item_idx})
    out = {}
    for i in touched:
        mean = dense[:, i, :].sum(axis=0) / len(ordered)
        best = None
        for pi, p in enumerate(ordered):
            d = float(((dense[pi, i] - mean) ** 2).sum())
            key = (d, p.sender)
            if best is None or key < best[0]:
                best = (key, dense[pi, i])
        out[i] = best[1]
    return out


def brute_force_top_nu(entries: list[tuple[float, int]], nu: float) -> list[int]:
    """Indices of the top ceil(nu*n) entries by (norm desc, insertion asc)."""
    import math

    n = len(entries)
    k = math.ceil(nu * n)
    order = sorted(range(n), key=lambda j: (-entries[j][0], entries[j][1]))
    return order[:k]
