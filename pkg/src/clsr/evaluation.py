"""Analysis suite: counterfactual protocols, one-side evaluation, fusion-weight studies, disentanglement."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .data import LONG, SHORT, TrainingExample, derive_rng
from .metrics import MetricsReport, auc, ranking_report
from .model import ClsrModel, make_batch


class Protocol(str, enum.Enum):
    NONE = "none"
    SHUFFLE = "shuffle"
    TRUNCATE = "truncate"


class Side(str, enum.Enum):
    LONG = "long"
    SHORT = "short"
    BOTH = "both"


SIDE_ALPHA = {Side.LONG: 1.0, Side.SHORT: 0.0, Side.BOTH: None}


@dataclass(frozen=True)
class ProtocolSpec:
    kind: Protocol = Protocol.NONE
    truncate_k: int = 0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "kind", Protocol(self.kind))
        if self.kind is Protocol.TRUNCATE and self.truncate_k < 1:
            raise ValueError("truncate protocol needs truncate_k >= 1")

    def label(self) -> str:
        if self.kind is Protocol.TRUNCATE:
            return f"truncate_k{self.truncate_k}"
        if self.kind is Protocol.SHUFFLE:
            return f"shuffle_s{self.seed}"
        return "none"


def apply_protocol(example: TrainingExample, spec: ProtocolSpec, index: int = 0) -> TrainingExample:
    """Rewrite the history of one example; candidates are never touched.

    SHUFFLE permutes the items over the original time slots, so interval
    features are those of the permuted order taken as real.  TRUNCATE keeps
    the most recent ``truncate_k`` items.  ``index`` seeds the per-example
    permutation stream.
    """
    if spec.kind is Protocol.NONE:
        return example
    if spec.kind is Protocol.TRUNCATE:
        if spec.truncate_k >= example.length:
            return example
        return replace(example, items=example.items[-spec.truncate_k:].copy(),
                       times=example.times[-spec.truncate_k:].copy())
    perm = derive_rng(spec.seed, "shuffle", index).permutation(example.length)
    return replace(example, items=example.items[perm].copy())


@dataclass
class Scores:
    probs: np.ndarray  # (n, N)
    alpha: np.ndarray  # (n, N)
    u_l: np.ndarray  # (n, d)
    u_s: np.ndarray
    p_l: np.ndarray
    p_s: np.ndarray
    active: np.ndarray  # (n,)
    users: np.ndarray


def score(model: ClsrModel, examples, protocol: ProtocolSpec | None = None, alpha=None,
          batch_size: int = 128) -> Scores:
    """Inference pass (batch norm in eval mode, no graph) over ``examples`` in order."""
    examples = list(examples)
    if protocol is not None and protocol.kind is not Protocol.NONE:
        examples = [apply_protocol(e, protocol, i) for i, e in enumerate(examples)]
    chunks = {k: [] for k in ("probs", "alpha", "u_l", "u_s", "p_l", "p_s", "active")}
    with ad.no_grad():
        for lo in range(0, len(examples), batch_size):
            batch = make_batch(examples[lo:lo + batch_size])
            out = model.forward(batch, train=False, alpha=alpha)
            B, N = batch.size, batch.n_candidates
            chunks["probs"].append(out.probs.value.reshape(B, N))
            chunks["alpha"].append(out.alpha.value.reshape(B, N))
            for key in ("u_l", "u_s", "p_l", "p_s"):
                chunks[key].append(getattr(out, key).value)
            chunks["active"].append(out.active)
    return Scores(**{k: np.concatenate(v) for k, v in chunks.items()},
                  users=np.array([e.user for e in examples]))


def _report(scores: Scores, examples, ks=(2, 10)) -> MetricsReport:
    extra = {
        "alpha_mean_all": float(scores.alpha.mean()),
        "alpha_mean_pos": float(scores.alpha[:, 0].mean()),
    }
    drivers = np.array([e.driver for e in examples], dtype=object)
    for tag in (LONG, SHORT):
        rows = drivers == tag
        if rows.any():
            extra[f"auc_{tag.lower()}_driven"] = stratum_auc(scores.probs[rows])
            extra[f"n_{tag.lower()}_driven"] = int(rows.sum())
    return ranking_report(scores.probs, scores.users, ks=ks, extra=extra)


def stratum_auc(probs: np.ndarray) -> float:
    """Pooled AUC over rows whose column 0 is the positive."""
    labels = np.zeros(probs.shape, dtype=np.int64)
    labels[:, 0] = 1
    return auc(probs.ravel(), labels.ravel())


def evaluate(model: ClsrModel, examples, protocol: ProtocolSpec | None = None,
             side=Side.BOTH, fixed_alpha: float | None = None) -> MetricsReport:
    """One evaluation cell.  ``fixed_alpha`` takes precedence over ``side``."""
    examples = list(examples)
    alpha = fixed_alpha if fixed_alpha is not None else SIDE_ALPHA[Side(side)]
    if alpha is not None and not 0.0 <= alpha <= 1.0:
        raise ValueError("fixed alpha must lie in [0, 1]")
    return _report(score(model, examples, protocol, alpha=alpha), examples)


def one_side_eval(model: ClsrModel, examples, side) -> MetricsReport:
    return evaluate(model, examples, side=side)


def alpha_stats(model: ClsrModel, examples, partition="driver", positives_only: bool = True) -> dict:
    """Mean/stddev of the fusion gate grouped by a tag of each example.

    ``partition`` is ``"driver"``, ``"behavior"`` or a callable on examples.
    With ``positives_only`` only the gate on the true target is used;
    otherwise the gate on every candidate.
    """
    examples = list(examples)
    if callable(partition):
        tags = [partition(e) for e in examples]
    elif partition in ("driver", "behavior"):
        tags = [getattr(e, partition) for e in examples]
    else:
        raise ValueError(f"unknown partition {partition!r}")
    if any(t is None for t in tags):
        raise ValueError(f"some examples carry no {partition!r} tag")
    alpha = score(model, examples).alpha
    vals = alpha[:, 0] if positives_only else alpha
    tags = np.array(tags, dtype=object)
    out = {}
    for tag in sorted(set(tags.tolist())):
        v = vals[tags == tag].ravel()
        out[tag] = {"mean": float(v.mean()), "std": float(v.std()), "n": int(v.size)}
    return out


def fixed_alpha_sweep(model: ClsrModel, examples, alphas) -> list:
    """``[(alpha, report), ...]`` for each fixed gate, then ``("adaptive", report)``."""
    examples = list(examples)
    out = []
    for a in alphas:
        if not 0.0 <= a <= 1.0:
            raise ValueError(f"alpha {a} outside [0, 1]")
        out.append((float(a), evaluate(model, examples, fixed_alpha=float(a))))
    out.append(("adaptive", evaluate(model, examples)))
    return out


def truncate_curve(model: ClsrModel, examples, ks, side=Side.BOTH) -> list:
    ks = list(ks)
    if not ks:
        raise ValueError("ks must be nonempty")
    examples = list(examples)
    return [(k, evaluate(model, examples, ProtocolSpec(Protocol.TRUNCATE, truncate_k=k), side=side))
            for k in ks]


def _rowwise_cos(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    den = np.where((na > 0) & (nb > 0), na * nb, 1.0)
    return np.clip((a * b).sum(axis=1) / den, -1.0, 1.0)


@dataclass
class DisentanglementReport:
    cos_ul_pl: float
    cos_ul_ps: float
    cos_us_ps: float
    cos_us_pl: float
    n_active: int
    alpha: dict = field(default_factory=dict)
    alpha_all_candidates: dict = field(default_factory=dict)
    one_side_auc: dict = field(default_factory=dict)
    driver_auc: dict = field(default_factory=dict)

    @property
    def long_gap(self) -> float:
        return self.cos_ul_pl - self.cos_ul_ps

    @property
    def short_gap(self) -> float:
        return self.cos_us_ps - self.cos_us_pl

    def flat(self) -> dict:
        out = {k: getattr(self, k) for k in ("cos_ul_pl", "cos_ul_ps", "cos_us_ps", "cos_us_pl", "n_active")}
        out["long_gap"], out["short_gap"] = self.long_gap, self.short_gap
        for name, table in (("alpha_pos", self.alpha), ("alpha_all", self.alpha_all_candidates)):
            for tag, st in table.items():
                for stat, v in st.items():
                    out[f"{name}.{tag}.{stat}"] = v
        for side, v in self.one_side_auc.items():
            out[f"one_side_auc.{side}"] = v
        for key, v in self.driver_auc.items():
            out[f"driver_auc.{key}"] = v
        return out


def disentanglement(model: ClsrModel, examples) -> DisentanglementReport:
    """Proxy similarities of both interests on histories long enough to have proxies, plus gate and one-side summaries."""
    examples = list(examples)
    s = score(model, examples)
    act = s.active
    if not act.any():
        raise ValueError("no example is long enough to have proxies")
    cos = {
        "cos_ul_pl": _rowwise_cos(s.u_l[act], s.p_l[act]).mean(),
        "cos_ul_ps": _rowwise_cos(s.u_l[act], s.p_s[act]).mean(),
        "cos_us_ps": _rowwise_cos(s.u_s[act], s.p_s[act]).mean(),
        "cos_us_pl": _rowwise_cos(s.u_s[act], s.p_l[act]).mean(),
    }
    rep = DisentanglementReport(**{k: float(v) for k, v in cos.items()}, n_active=int(act.sum()))
    part = "driver" if all(e.driver is not None for e in examples) else "behavior"
    tags = np.array([getattr(e, part) for e in examples], dtype=object)
    for tag in sorted(set(tags.tolist())):
        rows = tags == tag
        rep.alpha[tag] = {"mean": float(s.alpha[rows, 0].mean()), "std": float(s.alpha[rows, 0].std()),
                          "n": int(rows.sum())}
        rep.alpha_all_candidates[tag] = {"mean": float(s.alpha[rows].mean()),
                                         "std": float(s.alpha[rows].std()), "n": int(s.alpha[rows].size)}
    for side in Side:
        ss = s if side is Side.BOTH else score(model, examples, alpha=SIDE_ALPHA[side])
        rep.one_side_auc[side.value] = stratum_auc(ss.probs)
        if part == "driver":
            for tag in (LONG, SHORT):
                rows = tags == tag
                if rows.any():
                    rep.driver_auc[f"{side.value}.{tag.lower()}"] = stratum_auc(ss.probs[rows])
    return rep
