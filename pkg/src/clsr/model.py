"""The long/short-term interest model: encoders, proxies, contrastive losses, fusion, prediction.

Batches are laid out time-major: a batch of ``B`` histories padded to ``L``
steps is a stack of ``L * B`` rows where row ``t * B + b`` is step ``t`` of
history ``b``.  Histories are left-aligned; padded steps are masked out of
every softmax and pooling, and final recurrent states are read at each
history's own last step.
"""

from __future__ import annotations

import enum
from dataclasses import asdict, dataclass, fields
from typing import NamedTuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .nn import CellKind, InnerProductScorer, Mlp, MlpScorer, MlpSpec, ParamStore, make_cell, run_sequence

PROB_CLAMP = 1e-12


class ContrastiveKind(str, enum.Enum):
    BPR = "bpr"
    TRIPLET = "triplet"


class AttentionKind(str, enum.Enum):
    MLP = "mlp"
    INNER_PRODUCT = "inner_product"


@dataclass(frozen=True)
class ClsrConfig:
    d: int = 40
    k: int = 3
    l_t: int = 5
    beta: float = 0.1
    l2: float = 1e-6
    margin: float = 1.0
    contrastive: ContrastiveKind = ContrastiveKind.TRIPLET
    rnn_cell: CellKind = CellKind.TIME_LSTM
    attention: AttentionKind = AttentionKind.MLP
    evolution: bool = True
    fusion_gru: bool = True
    max_seq_len: int = 50
    pred_hidden: tuple = (100, 64)

    def __post_init__(self):
        object.__setattr__(self, "contrastive", ContrastiveKind(self.contrastive))
        object.__setattr__(self, "rnn_cell", CellKind(self.rnn_cell))
        object.__setattr__(self, "attention", AttentionKind(self.attention))
        object.__setattr__(self, "pred_hidden", tuple(int(w) for w in self.pred_hidden))
        self.validate()

    def validate(self) -> None:
        problems = []
        if self.d <= 0:
            problems.append("d must be > 0")
        if self.k < 1:
            problems.append("k must be >= 1")
        if self.l_t < self.k:
            problems.append("l_t must be >= k")
        if self.beta < 0:
            problems.append("beta must be >= 0")
        if self.l2 < 0:
            problems.append("l2 must be >= 0")
        if self.margin <= 0:
            problems.append("margin must be > 0")
        if self.max_seq_len < 1:
            problems.append("max_seq_len must be >= 1")
        if problems:
            raise ValueError("; ".join(problems))

    def to_dict(self) -> dict:
        out = asdict(self)
        for f in ("contrastive", "rnn_cell", "attention"):
            out[f] = getattr(self, f).value
        out["pred_hidden"] = list(self.pred_hidden)
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "ClsrConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


# Preset hyper-parameters for the two data regimes reported for the method.
TAOBAO_DEFAULTS = dict(d=40, k=3, l_t=5, max_seq_len=50, beta=0.1, l2=1e-6, contrastive="triplet")
KUAISHOU_DEFAULTS = dict(d=40, k=5, l_t=10, max_seq_len=250, beta=0.1, l2=1e-6, contrastive="bpr")


# ---------------------------------------------------------------------------
# batches


@dataclass
class Batch:
    users: np.ndarray  # (B,)
    lengths: np.ndarray  # (B,)
    items: np.ndarray  # (L * B,) time-major, padded with item 0
    mask: np.ndarray  # (L, B) 1 on real steps
    dt: np.ndarray  # (L * B, 2)
    candidates: np.ndarray  # (B, N), column 0 is the positive

    @property
    def size(self) -> int:
        return len(self.users)

    @property
    def steps(self) -> int:
        return self.mask.shape[0]

    @property
    def n_candidates(self) -> int:
        return self.candidates.shape[1]

    @property
    def labels(self) -> np.ndarray:
        y = np.zeros(self.candidates.shape)
        y[:, 0] = 1.0
        return y.reshape(-1, 1)


def make_batch(examples) -> Batch:
    examples = list(examples)
    if not examples:
        raise ValueError("empty batch")
    n_cand = {len(e.negatives) for e in examples}
    if len(n_cand) != 1:
        raise ValueError("examples in a batch must share the candidate count")
    B = len(examples)
    lengths = np.array([e.length for e in examples], dtype=np.int64)
    L = int(lengths.max())
    items = np.zeros((L, B), dtype=np.int64)
    mask = np.zeros((L, B))
    dt = np.zeros((L, B, 2))
    for b, e in enumerate(examples):
        t = e.length
        items[:t, b] = e.items
        mask[:t, b] = 1.0
        dt[:t, b] = e.dt_features
    return Batch(
        users=np.array([e.user for e in examples], dtype=np.int64),
        lengths=lengths,
        items=items.reshape(-1),
        mask=mask,
        dt=dt.reshape(L * B, 2),
        candidates=np.stack([e.candidates for e in examples]),
    )


def _pool_matrix(weights: np.ndarray) -> np.ndarray:
    """``(B, L * B)`` matrix summing time-major rows of each history with ``weights[t, b]``."""
    L, B = weights.shape
    P = np.zeros((B, L * B))
    cols = np.arange(L)[:, None] * B + np.arange(B)[None, :]
    P[np.broadcast_to(np.arange(B), (L, B)), cols] = weights
    return P


# ---------------------------------------------------------------------------
# pairwise contrastive losses (row-wise over (n, d) tensors, result (n, 1))


def bpr_pair_loss(a: Tensor, p: Tensor, q: Tensor) -> Tensor:
    """softplus(<a, q> - <a, p>)"""
    return ad.softplus(ad.inner(a, q) - ad.inner(a, p))


def triplet_pair_loss(a: Tensor, p: Tensor, q: Tensor, margin: float) -> Tensor:
    """max(d(a, p) - d(a, q) + m, 0) with Euclidean d."""
    if margin <= 0:
        raise ValueError("triplet margin must be > 0")
    return ad.hinge(ad.distance(a, p) - ad.distance(a, q) + margin)


def contrastive_loss(u_l: Tensor, u_s: Tensor, p_l: Tensor, p_s: Tensor,
                     kind=ContrastiveKind.BPR, margin: float = 1.0) -> Tensor:
    """Sum of the four symmetric representation/proxy tasks, per row."""
    kind = ContrastiveKind(kind)
    if kind is ContrastiveKind.BPR:
        f = bpr_pair_loss
    else:
        def f(a, p, q):
            return triplet_pair_loss(a, p, q, margin)
    return f(u_l, p_l, p_s) + f(p_l, u_l, u_s) + f(u_s, p_s, p_l) + f(p_s, u_s, u_l)


def compute_proxies(history: Tensor, k: int, l_t: int):
    """Long/short proxies ``(p_l, p_s)`` for one history of item vectors ``(t, d)``.

    Returns ``None`` unless ``t > l_t``.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    t = history.shape[0]
    if t <= l_t:
        return None
    p_l = ad.mean(history, axis=0)
    p_s = ad.mean(history[t - k:], axis=0)
    return p_l, p_s


# ---------------------------------------------------------------------------
# model


class Outputs(NamedTuple):
    probs: Tensor  # (B * N, 1)
    logits: Tensor
    alpha: Tensor  # (B * N, 1)
    u_l: Tensor  # (B, d)
    u_s: Tensor
    p_l: Tensor
    p_s: Tensor
    active: np.ndarray  # (B,) histories long enough for proxies
    attn_long: Tensor  # (L, B)
    attn_short: Tensor


class ClsrModel:
    def __init__(self, config: ClsrConfig, n_users: int, n_items: int, seed: int = 0):
        from .data import derive_rng

        self.config = config
        self.n_users, self.n_items = n_users, n_items
        c = config
        d = c.d
        store = ParamStore(derive_rng(seed, "init"))
        self.store = store
        self.item_emb = store.embedding("item_emb", n_items, d)
        self.user_emb = store.embedding("user_emb", n_users, d)
        self.user_query = store.embedding("user_query", n_users, d) if not c.evolution else None
        self.W_l = store.weight("W_l", d, d)
        self.W_s = store.weight("W_s", d, d)
        if c.attention is AttentionKind.MLP:
            self.tau_l = MlpScorer(store, "tau_l", d)
            self.tau_s = MlpScorer(store, "tau_s", d)
        else:
            self.tau_l = self.tau_s = InnerProductScorer()
        self.query_gru = make_cell(CellKind.GRU, store, "query_gru", d, d) if c.evolution else None
        self.short_rnn = make_cell(c.rnn_cell, store, "short_rnn", d, d)
        self.fusion_gru = make_cell(CellKind.GRU, store, "fusion_gru", d, d) if c.fusion_gru else None
        fuse_in = (4 if c.fusion_gru else 3) * d
        self.tau_f = Mlp(store, "tau_f", MlpSpec((fuse_in, d, 1)))
        self.predictor = Mlp(store, "pred", MlpSpec((2 * d, *c.pred_hidden, 1), batch_norm=True))

    @property
    def params(self) -> dict:
        return self.store.tensors

    def _check_ids(self, batch: Batch) -> None:
        if batch.users.min() < 0 or batch.users.max() >= self.n_users:
            raise IndexError("unknown user id in batch")
        for arr in (batch.items, batch.candidates):
            if arr.min() < 0 or arr.max() >= self.n_items:
                raise IndexError("unknown item id in batch")

    # -- pieces -------------------------------------------------------------

    def _final_state(self, outputs: list, batch: Batch) -> Tensor:
        stacked = ad.concat(outputs, axis=0)
        idx = (batch.lengths - 1) * batch.size + np.arange(batch.size)
        return ad.gather(stacked, idx)

    def make_queries(self, batch: Batch, seq: Tensor):
        """``q_l`` from the user table; ``q_s`` from a GRU over the history (or a static per-user vector)."""
        q_l = ad.gather(self.user_emb, batch.users)
        if self.config.evolution:
            outs = run_sequence(self.query_gru, seq, batch.steps, batch.size)
            q_s = self._final_state(outs, batch)
        else:
            q_s = ad.gather(self.user_query, batch.users)
        return q_l, q_s

    def _attend(self, scorer, W: Tensor, keys: Tensor, query: Tensor, batch: Batch):
        L, B = batch.steps, batch.size
        v = ad.matmul(keys, W)
        q = ad.gather(query, np.tile(np.arange(B), L))
        scores = ad.reshape(scorer(v, q), (L, B))
        weights = ad.softmax(scores, axis=0, mask=batch.mask)
        w = ad.expand(ad.reshape(weights, (L * B, 1)), keys.shape[1], axis=1)
        pooled = ad.matmul(_pool_matrix(np.ones((L, B))), w * keys)
        return pooled, weights

    def encode_long(self, q_l: Tensor, seq: Tensor, batch: Batch):
        """Attention pooling of item embeddings keyed by ``W_l E(x_j)`` against ``q_l``."""
        return self._attend(self.tau_l, self.W_l, seq, q_l, batch)

    def encode_short(self, q_s: Tensor, seq: Tensor, batch: Batch):
        """Attention pooling of recurrent outputs ``o_j`` keyed by ``W_s o_j`` against ``q_s``."""
        outs = run_sequence(self.short_rnn, seq, batch.steps, batch.size, dt=batch.dt)
        o = ad.concat(outs, axis=0)
        return self._attend(self.tau_s, self.W_s, o, q_s, batch)

    def proxies(self, seq: Tensor, batch: Batch):
        """Batched long/short proxies plus the mask of histories longer than ``l_t``."""
        k = self.config.k
        L, B = batch.steps, batch.size
        lengths = batch.lengths
        t_idx = np.arange(L)[:, None]
        w_long = batch.mask / lengths[None, :]
        k_eff = np.minimum(k, lengths)
        recent = (t_idx >= (lengths - k_eff)[None, :]) & (t_idx < lengths[None, :])
        w_short = recent / k_eff[None, :]
        p_l = ad.matmul(_pool_matrix(w_long), seq)
        p_s = ad.matmul(_pool_matrix(w_short), seq)
        return p_l, p_s, lengths > self.config.l_t

    def fuse(self, u_l: Tensor, u_s: Tensor, seq: Tensor, batch: Batch, target: Tensor, alpha=None):
        """Per-candidate gate ``alpha`` and fused interest ``alpha u_l + (1 - alpha) u_s``.

        ``alpha`` overrides the learned gate with a constant in [0, 1].
        """
        B, N = batch.size, batch.n_candidates
        rep = np.repeat(np.arange(B), N)
        ul, us = ad.gather(u_l, rep), ad.gather(u_s, rep)
        if alpha is None:
            parts = [target, ul, us]
            if self.fusion_gru is not None:
                h = self._final_state(run_sequence(self.fusion_gru, seq, batch.steps, B), batch)
                parts.insert(0, ad.gather(h, rep))
            a = ad.sigmoid(self.tau_f(ad.concat(parts, axis=1)))
        else:
            a = ad.Tensor(np.broadcast_to(np.asarray(alpha, dtype=np.float64).reshape(-1, 1), (B * N, 1)))
        d = u_l.shape[1]
        u = ad.expand(a, d, axis=1) * ul + ad.expand(1.0 - a, d, axis=1) * us
        return a, u

    def predict(self, u: Tensor, target: Tensor, train: bool = False):
        logits = self.predictor(ad.concat([u, target], axis=1), train=train)
        return ad.sigmoid(logits), logits

    # -- whole pass ------------------------------------------------------------

    def forward(self, batch: Batch, train: bool = False, alpha=None) -> Outputs:
        self._check_ids(batch)
        seq = ad.gather(self.item_emb, batch.items)
        q_l, q_s = self.make_queries(batch, seq)
        u_l, a_long = self.encode_long(q_l, seq, batch)
        u_s, a_short = self.encode_short(q_s, seq, batch)
        p_l, p_s, active = self.proxies(seq, batch)
        target = ad.gather(self.item_emb, batch.candidates.reshape(-1))
        a, u = self.fuse(u_l, u_s, seq, batch, target, alpha=alpha)
        probs, logits = self.predict(u, target, train=train)
        return Outputs(probs, logits, a, u_l, u_s, p_l, p_s, active, a_long, a_short)

    def rec_loss(self, out: Outputs, batch: Batch) -> Tensor:
        """Sum over the batch of each example's mean binary cross-entropy over its candidates."""
        if batch.n_candidates == 0:
            raise ValueError("empty candidate set")
        return rec_loss(out.probs, batch.labels, batch.n_candidates)

    def con_loss(self, out: Outputs) -> Tensor | None:
        if not out.active.any():
            return None
        c = self.config
        per = contrastive_loss(out.u_l, out.u_s, out.p_l, out.p_s, c.contrastive, c.margin)
        return ad.sum_(per * ad.Tensor(out.active.astype(np.float64)[:, None]))

    def joint_loss(self, batch: Batch, train: bool = True):
        """``sum(L_rec + beta L_con) + lambda ||Theta||^2``; returns ``(loss, parts, outputs)``."""
        c = self.config
        out = self.forward(batch, train=train)
        rec = self.rec_loss(out, batch)
        total = rec
        con_val = 0.0
        if c.beta > 0:
            con = self.con_loss(out)
            if con is not None:
                total = total + c.beta * con
                con_val = con.item()
        if c.l2 > 0:
            total = total + c.l2 * self.store.l2()
        return total, {"rec": rec.item(), "con": con_val, "loss": total.item()}, out


def rec_loss(probs: Tensor, labels: np.ndarray, n_candidates: int) -> Tensor:
    p = ad.clip(probs, PROB_CLAMP, 1.0 - PROB_CLAMP)
    y = ad.Tensor(np.asarray(labels, dtype=np.float64).reshape(p.shape))
    ll = y * ad.log(p) + (1.0 - y) * ad.log(1.0 - p)
    return ad.sum_(ll) * (-1.0 / n_candidates)
