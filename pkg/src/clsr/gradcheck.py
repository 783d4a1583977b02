"""Central finite-difference gradient checks for every layer and the full objective."""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import autodiff as ad
from . import nn
from .data import TrainingExample
from .model import ClsrConfig, ClsrModel, contrastive_loss, make_batch

EPS = 1e-5
TOL = 1e-4
# Entries whose analytic and numeric derivatives are both below this are compared
# absolutely.  Central differences of an O(10) loss carry roundoff near
# 1e-16 * 10 / EPS = 1e-10, so exactly-zero gradients need a floor well above that.
FLOOR = 1e-5


def rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = FLOOR) -> float:
    a, n = np.asarray(analytic).ravel(), np.asarray(numeric).ravel()
    den = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / den)) if a.size else 0.0


def check_gradients(f: Callable[[], ad.Tensor], params: dict, eps: float = EPS,
                    max_entries: int | None = None, rng: np.random.Generator | None = None) -> dict:
    """Max relative error per parameter between backprop and central differences.

    ``f`` rebuilds the graph and returns a scalar.  With ``max_entries`` only a
    random subset of each tensor's entries is perturbed.
    """
    root = f()
    grads = ad.backward(root, params.values())
    rng = rng or np.random.default_rng(0)
    out = {}
    for name, p in params.items():
        flat = p.value.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = rng.choice(flat.size, max_entries, replace=False)
        numeric = np.empty(len(idx))
        with ad.no_grad():
            for j, i in enumerate(idx):
                orig = flat[i]
                flat[i] = orig + eps
                up = f().item()
                flat[i] = orig - eps
                down = f().item()
                flat[i] = orig
                numeric[j] = (up - down) / (2 * eps)
        out[name] = rel_error(grads[p].reshape(-1)[idx], numeric)
    return out


def _leaf(rng, *shape, scale=1.0, name=None):
    return ad.parameter(rng.normal(0.0, scale, size=shape), name=name)


def _weighted_sum(t: ad.Tensor, rng) -> ad.Tensor:
    """Random linear functional of ``t`` so every output entry matters."""
    w = ad.Tensor(rng.normal(size=t.shape))
    return ad.sum_(t * w)


def _store_params(store: nn.ParamStore) -> dict:
    return dict(store.tensors)


def _perturb(store: nn.ParamStore, rng, scale=0.5) -> None:
    # zero-initialized biases and unit BN scales would hide mistakes in their gradients
    for t in store.tensors.values():
        t.value = t.value + rng.normal(0.0, scale, size=t.shape) * 0.3


def check_mlp_bn(seed: int, train: bool) -> float:
    rng = np.random.default_rng(seed)
    store = nn.ParamStore(rng)
    mlp = nn.Mlp(store, "m", nn.MlpSpec((5, 7, 6, 2), batch_norm=True))
    _perturb(store, rng)
    for name in list(store.buffers):
        shape = store.buffers[name].shape
        store.buffers[name] = (rng.normal(size=shape) if name.endswith("mean")
                               else rng.uniform(0.5, 2.0, size=shape))
    x = _leaf(rng, 6, 5, name="x")
    wrng = np.random.default_rng(seed + 1000)
    w = ad.Tensor(wrng.normal(size=(6, 2)))

    def f():
        return ad.sum_(mlp(x, train=train) * w)

    params = {**_store_params(store), "x": x}
    return max(check_gradients(f, params).values())


def check_cell(seed: int, kind) -> float:
    rng = np.random.default_rng(seed)
    store = nn.ParamStore(rng)
    cell = nn.make_cell(kind, store, "c", 3, 4)
    _perturb(store, rng)
    steps, batch = 4, 2
    x = _leaf(rng, steps * batch, 3, name="x")
    dt = np.abs(rng.normal(size=(steps * batch, 2))) * 2.0
    w = ad.Tensor(rng.normal(size=(steps * batch, 4)))

    def f():
        outs = nn.run_sequence(cell, x, steps, batch, dt=dt)
        return ad.sum_(ad.concat(outs, axis=0) * w)

    return max(check_gradients(f, {**_store_params(store), "x": x}).values())


def check_attention(seed: int, kind: str) -> float:
    rng = np.random.default_rng(seed)
    store = nn.ParamStore(rng)
    scorer = nn.MlpScorer(store, "tau", 4) if kind == "mlp" else nn.InnerProductScorer()
    _perturb(store, rng)
    L, B = 3, 2
    keys = _leaf(rng, L * B, 4, name="keys")
    query = _leaf(rng, B, 4, name="query")
    W = _leaf(rng, 4, 4, scale=0.5, name="W")
    mask = np.ones((L, B))
    mask[2, 1] = 0.0
    w = ad.Tensor(rng.normal(size=(B, 4)))

    def f():
        v = ad.matmul(keys, W)
        q = ad.gather(query, np.tile(np.arange(B), L))
        scores = ad.reshape(scorer(v, q), (L, B))
        a = ad.softmax(scores, axis=0, mask=mask)
        pooled = ad.matmul(np.tile(np.eye(B), L), ad.expand(ad.reshape(a, (L * B, 1)), 4, axis=1) * keys)
        return ad.sum_(pooled * w)

    params = {**_store_params(store), "keys": keys, "query": query, "W": W}
    return max(check_gradients(f, params).values())


def check_contrastive(seed: int, kind: str) -> float:
    rng = np.random.default_rng(seed)
    vecs = {n: _leaf(rng, 3, 4, name=n) for n in ("u_l", "u_s", "p_l", "p_s")}

    def f():
        return ad.sum_(contrastive_loss(vecs["u_l"], vecs["u_s"], vecs["p_l"], vecs["p_s"], kind, margin=1.0))

    return max(check_gradients(f, vecs).values())


def _tiny_examples(rng, n_users=2, n_items=12, length=8, n_neg=2):
    out = []
    for u in range(n_users):
        items = rng.choice(n_items, size=length + 1, replace=False)
        times = np.cumsum(rng.integers(10, 5000, size=length + 1))
        out.append(TrainingExample(user=u, items=items[:length], times=times[:length],
                                   target_time=int(times[length]), positive=int(items[length]),
                                   negatives=np.setdiff1d(np.arange(n_items), items)[:n_neg]))
    return out


def tiny_model(seed: int, **overrides) -> ClsrModel:
    cfg = dict(d=4, k=2, l_t=5, beta=0.5, l2=1e-3, pred_hidden=(6, 5))
    cfg.update(overrides)
    model = ClsrModel(ClsrConfig(**cfg), n_users=2, n_items=12, seed=seed)
    _perturb(model.store, np.random.default_rng(seed + 77))
    return model


def check_fusion(seed: int) -> float:
    rng = np.random.default_rng(seed)
    model = tiny_model(seed)
    batch = make_batch(_tiny_examples(rng))
    u_l = _leaf(rng, 2, 4, name="u_l")
    u_s = _leaf(rng, 2, 4, name="u_s")
    w = ad.Tensor(rng.normal(size=(batch.size * batch.n_candidates, 4)))

    def f():
        seq = ad.gather(model.item_emb, batch.items)
        target = ad.gather(model.item_emb, batch.candidates.reshape(-1))
        _, u = model.fuse(u_l, u_s, seq, batch, target)
        return ad.sum_(u * w)

    names = [n for n in model.params if n.startswith(("tau_f", "fusion_gru", "item_emb"))]
    params = {n: model.params[n] for n in names}
    params.update(u_l=u_l, u_s=u_s)
    return max(check_gradients(f, params).values())


def check_prediction(seed: int) -> float:
    rng = np.random.default_rng(seed)
    model = tiny_model(seed)
    for name in list(model.store.buffers):
        shape = model.store.buffers[name].shape
        model.store.buffers[name] = (rng.normal(size=shape) if name.endswith("mean")
                                     else rng.uniform(0.5, 2.0, size=shape))
    u = _leaf(rng, 5, 4, name="u")
    target = _leaf(rng, 5, 4, name="target")

    def f():
        probs, _ = model.predict(u, target, train=False)
        return ad.sum_(ad.log(probs)) * -1.0

    params = {n: p for n, p in model.params.items() if n.startswith("pred")}
    params.update(u=u, target=target)
    return max(check_gradients(f, params).values())


def check_joint(seed: int, **overrides) -> float:
    rng = np.random.default_rng(seed)
    kinds = ("triplet", "bpr")
    overrides.setdefault("contrastive", kinds[seed % 2])
    model = tiny_model(seed, **overrides)
    batch = make_batch(_tiny_examples(rng))

    def f():
        loss, _, _ = model.joint_loss(batch, train=True)
        return loss

    return max(check_gradients(f, model.params, max_entries=3,
                               rng=np.random.default_rng(seed)).values())


LAYERS = {
    "mlp_bn_eval": lambda s: check_mlp_bn(s, train=False),
    "mlp_bn_train": lambda s: check_mlp_bn(s, train=True),
    "gru": lambda s: check_cell(s, "gru"),
    "lstm": lambda s: check_cell(s, "lstm"),
    "time_lstm": lambda s: check_cell(s, "time_lstm"),
    "attention_mlp": lambda s: check_attention(s, "mlp"),
    "attention_inner": lambda s: check_attention(s, "inner"),
    "contrastive_bpr": lambda s: check_contrastive(s, "bpr"),
    "contrastive_triplet": lambda s: check_contrastive(s, "triplet"),
    "fusion": check_fusion,
    "prediction": check_prediction,
    "joint_loss": check_joint,
}


def run_suite(seeds=range(10), layers=None) -> dict:
    """``{layer: worst relative error over seeds}``."""
    names = list(layers) if layers else list(LAYERS)
    return {name: max(LAYERS[name](s) for s in seeds) for name in names}
