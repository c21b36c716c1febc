"""Per-client recommender: embedding lookup, feedforward scoring, BPR loss,
analytic gradients, Adam local updates, and neighbor-gradient aggregation.

A client scores item j as sigmoid(w^T FFN([u, v_j])) where FFN is a relu
multilayer perceptron over the concatenated user and item embeddings.  The
pairwise BPR loss is computed on pre-sigmoid logits (the sigmoid is applied
once, to the logit difference) to avoid double-sigmoid saturation.
Everything runs in double precision so finite-difference checks are
meaningful.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from decrecsim.errors import ContractError

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

INIT_SCALE = 0.05
LOCAL_BATCH_SIZE = 32

STATE_DUMP_VERSION = 1


class NetLayout:
    """Shapes and flat-vector slices for the scoring network parameters.

    The network input is the concatenation [u, v] of width 2 * embed_dim,
    followed by relu dense layers of the given widths and a final projection
    to a scalar logit.
    """

    def __init__(self, embed_dim: int, layer_widths: list[int]):
        if embed_dim < 1 or not layer_widths or any(w < 1 for w in layer_widths):
            raise ContractError("embed_dim and layer widths must be positive")
        self.embed_dim = int(embed_dim)
        self.layer_widths = [int(w) for w in layer_widths]
        self.shapes: list[tuple[int, ...]] = []
        in_dim = 2 * embed_dim
        for width in self.layer_widths:
            self.shapes.append((width, in_dim))
            self.shapes.append((width,))
            in_dim = width
        self.shapes.append((in_dim,))  # final projection
        self.slices: list[slice] = []
        offset = 0
        for shape in self.shapes:
            size = int(np.prod(shape))
            self.slices.append(slice(offset, offset + size))
            offset += size
        self.size = offset

    def views(self, flat: np.ndarray) -> tuple[list[np.ndarray], list[np.ndarray], np.ndarray]:
        """Split a flat parameter vector into (weights, biases, projection) views."""
        if flat.shape != (self.size,):
            raise ContractError(
                f"flat parameter vector has size {flat.shape}, expected ({self.size},)"
            )
        ws, bs = [], []
        for li in range(len(self.layer_widths)):
            ws.append(flat[self.slices[2 * li]].reshape(self.shapes[2 * li]))
            bs.append(flat[self.slices[2 * li + 1]])
        return ws, bs, flat[self.slices[-1]]


@dataclass
class ClientState:
    """One simulated client's private model parameters."""

    user_vec: np.ndarray  # (embed_dim,)
    item_table: np.ndarray  # (num_items, embed_dim)
    net: np.ndarray  # flat parameter vector, see NetLayout
    layout: NetLayout

    @property
    def num_items(self) -> int:
        return self.item_table.shape[0]

    def copy(self) -> "ClientState":
        return ClientState(
            self.user_vec.copy(), self.item_table.copy(), self.net.copy(), self.layout
        )


@dataclass
class GradientPacket:
    """Gradients exchanged between clients.

    item_idx/item_rows encode the sparse item-table gradient (rows sorted by
    ascending item index); net_grad matches the sender's flat net layout.
    The private user embedding never travels.
    """

    sender: int
    round: int
    item_idx: np.ndarray  # (n,) int64, strictly increasing
    item_rows: np.ndarray  # (n, embed_dim) float64
    net_grad: np.ndarray  # flat float64

    @property
    def item_grad(self) -> dict[int, np.ndarray]:
        return {int(i): self.item_rows[k] for k, i in enumerate(self.item_idx)}


def init_client_state(
    num_items: int, embed_dim: int, layer_widths: list[int], rng: np.random.Generator
) -> ClientState:
    """Initialize embeddings and weights uniform(-0.05, 0.05); biases zero."""
    layout = NetLayout(embed_dim, layer_widths)
    user_vec = rng.uniform(-INIT_SCALE, INIT_SCALE, size=embed_dim)
    item_table = rng.uniform(-INIT_SCALE, INIT_SCALE, size=(num_items, embed_dim))
    net = np.zeros(layout.size)
    ws, bs, w = layout.views(net)
    for mat in ws:
        mat[...] = rng.uniform(-INIT_SCALE, INIT_SCALE, size=mat.shape)
    w[...] = rng.uniform(-INIT_SCALE, INIT_SCALE, size=w.shape)
    return ClientState(user_vec, item_table, net, layout)


def _forward(
    state: ClientState, items: np.ndarray
) -> tuple[np.ndarray, list[np.ndarray], list[np.ndarray]]:
    """Forward pass for the given item ids.

    Returns (logits, layer inputs, relu masks); the extra outputs feed the
    backward pass.
    """
    k = state.layout.embed_dim
    x = np.empty((len(items), 2 * k))
    x[:, :k] = state.user_vec
    x[:, k:] = state.item_table[items]
    ws, bs, w = state.layout.views(state.net)
    inputs = [x]
    masks = []
    h = x
    for mat, b in zip(ws, bs):
        a = h @ mat.T + b
        mask = a > 0.0
        h = np.where(mask, a, 0.0)
        masks.append(mask)
        inputs.append(h)
    z = inputs[-1] @ w
    return z, inputs, masks


def _backward(
    state: ClientState,
    inputs: list[np.ndarray],
    masks: list[np.ndarray],
    g: np.ndarray,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Backpropagate per-row logit weights g.

    Returns (net_grad_flat, user_grad, per-row item-embedding gradients).
    """
    ws, _, w = state.layout.views(state.net)
    k = state.layout.embed_dim
    net_grad = np.zeros(state.layout.size)
    gws, gbs, gw = state.layout.views(net_grad)
    gw[...] = inputs[-1].T @ g
    dh = g[:, None] * w[None, :]
    for li in range(len(ws) - 1, -1, -1):
        da = np.where(masks[li], dh, 0.0)
        gws[li][...] = da.T @ inputs[li]
        gbs[li][...] = da.sum(axis=0)
        dh = da @ ws[li]
    user_grad = dh[:, :k].sum(axis=0)
    return net_grad, user_grad, dh[:, k:]


def score_items(state: ClientState, items: np.ndarray | None = None) -> np.ndarray:
    """Pre-sigmoid logits for the given items (all items when None)."""
    if items is None:
        items = np.arange(state.num_items)
    z, _, _ = _forward(state, np.asarray(items, dtype=np.int64))
    return z


def predict_rating(state: ClientState, item: int) -> float:
    """Estimated rating sigmoid(w^T FFN([u, v_item])), strictly in (0, 1)."""
    if not 0 <= item < state.num_items:
        raise IndexError(f"item {item} out of range [0, {state.num_items})")
    z, _, _ = _forward(state, np.asarray([item], dtype=np.int64))
    return float(_sigmoid(z[0]))


def _sigmoid(x: np.ndarray | float) -> np.ndarray | float:
    return np.where(
        np.asarray(x) >= 0,
        1.0 / (1.0 + np.exp(-np.asarray(x))),
        np.exp(np.asarray(x)) / (1.0 + np.exp(np.asarray(x))),
    )


def _softplus(x: np.ndarray) -> np.ndarray:
    # log(1 + e^x), stable for large |x|
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def _check_batch(state: ClientState, pairs: np.ndarray) -> np.ndarray:
    pairs = np.asarray(pairs, dtype=np.int64)
    if pairs.ndim != 2 or pairs.shape[1] != 2 or len(pairs) == 0:
        raise ContractError("training batch must be a nonempty (n, 2) array of item pairs")
    if (pairs[:, 0] == pairs[:, 1]).any():
        raise ContractError("positive and negative item must differ within a pair")
    if pairs.min() < 0 or pairs.max() >= state.num_items:
        raise ContractError("batch item index out of range")
    return pairs


def bpr_loss(state: ClientState, pairs: np.ndarray) -> float:
    """Mean over pairs of -ln sigmoid(logit_pos - logit_neg)."""
    pairs = _check_batch(state, pairs)
    items = np.concatenate([pairs[:, 0], pairs[:, 1]])
    z, _, _ = _forward(state, items)
    n = len(pairs)
    diff = z[:n] - z[n:]
    return float(np.mean(_softplus(-diff)))


def compute_gradients(
    state: ClientState, pairs: np.ndarray, sender: int = -1, round_no: int = -1
) -> tuple[np.ndarray, GradientPacket]:
    """Analytic gradients of bpr_loss w.r.t. u, touched item rows, and net.

    Rows of items absent from the batch are absent from the packet.
    """
    pairs = _check_batch(state, pairs)
    items = np.concatenate([pairs[:, 0], pairs[:, 1]])
    z, inputs, masks = _forward(state, items)
    n = len(pairs)
    diff = z[:n] - z[n:]
    # d mean(softplus(-diff)) / d z_pos = -sigmoid(-diff) / n
    gpos = -np.asarray(_sigmoid(-diff)) / n
    g = np.concatenate([gpos, -gpos])
    net_grad, user_grad, item_rows = _backward(state, inputs, masks, g)

    uniq, inverse = np.unique(items, return_inverse=True)
    acc = np.zeros((len(uniq), state.layout.embed_dim))
    np.add.at(acc, inverse, item_rows)
    packet = GradientPacket(
        sender=sender, round=round_no, item_idx=uniq, item_rows=acc, net_grad=net_grad
    )
    return user_grad, packet


@dataclass
class AdamState:
    """Adam moments for one client (items tracked sparsely by row)."""

    t: int
    m_user: np.ndarray
    v_user: np.ndarray
    m_items: np.ndarray
    v_items: np.ndarray
    m_net: np.ndarray
    v_net: np.ndarray

    @classmethod
    def for_state(cls, state: ClientState) -> "AdamState":
        return cls(
            t=0,
            m_user=np.zeros_like(state.user_vec),
            v_user=np.zeros_like(state.user_vec),
            m_items=np.zeros_like(state.item_table),
            v_items=np.zeros_like(state.item_table),
            m_net=np.zeros_like(state.net),
            v_net=np.zeros_like(state.net),
        )


def _adam_update(
    param: np.ndarray, grad: np.ndarray, m: np.ndarray, v: np.ndarray,
    lr: float, bc1: float, bc2: float,
) -> None:
    m *= ADAM_BETA1
    m += (1.0 - ADAM_BETA1) * grad
    v *= ADAM_BETA2
    v += (1.0 - ADAM_BETA2) * grad * grad
    param -= lr * (m / bc1) / (np.sqrt(v / bc2) + ADAM_EPS)


def local_train_step(
    state: ClientState,
    pairs: np.ndarray,
    opt: AdamState,
    lr: float,
    update_user: bool = True,
) -> None:
    """One Adam update of u, touched item rows, and net from batch gradients."""
    if lr < 0:
        raise ContractError("learning rate must be >= 0")
    user_grad, packet = compute_gradients(state, pairs)
    opt.t += 1
    bc1 = 1.0 - ADAM_BETA1 ** opt.t
    bc2 = 1.0 - ADAM_BETA2 ** opt.t
    if update_user:
        _adam_update(state.user_vec, user_grad, opt.m_user, opt.v_user, lr, bc1, bc2)
    idx = packet.item_idx
    m_rows = opt.m_items[idx]
    v_rows = opt.v_items[idx]
    rows = state.item_table[idx]
    _adam_update(rows, packet.item_rows, m_rows, v_rows, lr, bc1, bc2)
    state.item_table[idx] = rows
    opt.m_items[idx] = m_rows
    opt.v_items[idx] = v_rows
    _adam_update(state.net, packet.net_grad, opt.m_net, opt.v_net, lr, bc1, bc2)


def mean_item_gradient(
    packets: list[GradientPacket], num_items: int, embed_dim: int
) -> tuple[np.ndarray, np.ndarray]:
    """FedAvg item-gradient mean over packets, rows absent from a packet count as zero.

    Packets are summed in ascending sender order so the result is
    bit-identical under any input permutation.  Returns (touched item ids,
    mean rows).
    """
    ordered = sorted(packets, key=lambda p: p.sender)
    idx_cat = np.concatenate([p.item_idx for p in ordered])
    touched = np.unique(idx_cat)
    if idx_cat.size == 0:
        return touched, np.zeros((0, embed_dim))
    rows_cat = np.vstack([p.item_rows for p in ordered if len(p.item_idx)])
    col = np.arange(embed_dim, dtype=np.int64)
    flat_idx = (idx_cat[:, None] * embed_dim + col[None, :]).ravel()
    buf = np.bincount(flat_idx, weights=rows_cat.ravel(), minlength=num_items * embed_dim)
    buf = buf.reshape(num_items, embed_dim)
    return touched, buf[touched] / len(ordered)


def apply_neighbor_aggregate(
    state: ClientState, packets: list[GradientPacket], lr: float
) -> None:
    """Eq-style collaborative update: subtract lr times the FedAvg packet mean.

    Item rows and net parameters move; the private user embedding does not.
    """
    if not packets:
        raise ContractError("apply_neighbor_aggregate requires at least one packet")
    for p in packets:
        if p.net_grad.shape != state.net.shape:
            raise ContractError("packet net gradient shape mismatch")
        if len(p.item_idx) and (p.item_idx.min() < 0 or p.item_idx.max() >= state.num_items):
            raise ContractError("packet item index out of range")
        if len(p.item_idx) and p.item_rows.shape != (len(p.item_idx), state.layout.embed_dim):
            raise ContractError("packet item row shape mismatch")
    touched, mean_rows = mean_item_gradient(
        packets, state.num_items, state.layout.embed_dim
    )
    state.item_table[touched] -= lr * mean_rows
    ordered = sorted(packets, key=lambda p: p.sender)
    net_sum = np.zeros_like(state.net)
    for p in ordered:
        net_sum += p.net_grad
    state.net -= lr * (net_sum / len(ordered))


def save_state(state: ClientState, path: str) -> None:
    """Versioned npz dump of all tensors, for debugging."""
    np.savez(
        path,
        version=STATE_DUMP_VERSION,
        user_vec=state.user_vec,
        item_table=state.item_table,
        net=state.net,
        layer_widths=np.asarray(state.layout.layer_widths),
    )


def load_state(path: str) -> ClientState:
    with np.load(path) as data:
        if int(data["version"]) != STATE_DUMP_VERSION:
            raise ContractError(f"unsupported state dump version {int(data['version'])}")
        layout = NetLayout(data["user_vec"].shape[0], list(data["layer_widths"]))
        return ClientState(
            data["user_vec"].copy(), data["item_table"].copy(), data["net"].copy(), layout
        )
