"""Neural building blocks: parameter store, MLP with batch norm, recurrent cells, attention scorers.

Row-vector convention throughout: a layer computes ``x @ W + b`` with ``x`` of
shape ``(batch, in)``.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

BN_EPS = 1e-5
BN_MOMENTUM = 0.99


class CellKind(str, enum.Enum):
    GRU = "gru"
    LSTM = "lstm"
    TIME_LSTM = "time_lstm"


class ParamStore:
    """Named trainable tensors plus the set of names that receive L2 decay."""

    def __init__(self, rng: np.random.Generator):
        self.rng = rng
        self.tensors: dict[str, Tensor] = {}
        self.decayed: set[str] = set()
        self.buffers: dict[str, np.ndarray] = {}

    def _register(self, name: str, value: np.ndarray, decay: bool) -> Tensor:
        if name in self.tensors:
            raise KeyError(f"duplicate parameter {name!r}")
        t = ad.parameter(value, name=name)
        self.tensors[name] = t
        if decay:
            self.decayed.add(name)
        return t

    def weight(self, name: str, fan_in: int, fan_out: int) -> Tensor:
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        return self._register(name, self.rng.uniform(-limit, limit, size=(fan_in, fan_out)), True)

    def bias(self, name: str, n: int) -> Tensor:
        return self._register(name, np.zeros((1, n)), False)

    def embedding(self, name: str, rows: int, dim: int) -> Tensor:
        limit = np.sqrt(6.0 / (rows + dim))
        return self._register(name, self.rng.uniform(-limit, limit, size=(rows, dim)), True)

    def constant_param(self, name: str, value: np.ndarray, decay: bool = False) -> Tensor:
        return self._register(name, np.array(value, dtype=np.float64), decay)

    def l2(self) -> Tensor:
        terms = [ad.sum_squares(self.tensors[n]) for n in sorted(self.decayed)]
        total = terms[0]
        for t in terms[1:]:
            total = total + t
        return total


def _bias_rows(b: Tensor, n: int) -> Tensor:
    return ad.expand(b, n, axis=0) if n != 1 else b


class Linear:
    def __init__(self, store: ParamStore, name: str, n_in: int, n_out: int, bias: bool = True):
        self.n_in, self.n_out = n_in, n_out
        self.W = store.weight(f"{name}.W", n_in, n_out)
        self.b = store.bias(f"{name}.b", n_out) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        if x.value.ndim != 2 or x.shape[1] != self.n_in:
            raise ad.ShapeError("linear", x.shape, self.W.shape)
        y = ad.matmul(x, self.W)
        if self.b is not None:
            y = y + _bias_rows(self.b, x.shape[0])
        return y


class BatchNorm:
    """Per-feature batch normalization with running statistics for inference."""

    def __init__(self, store: ParamStore, name: str, n: int):
        self.name = name
        self.gamma = store.constant_param(f"{name}.gamma", np.ones((1, n)))
        self.beta = store.constant_param(f"{name}.beta", np.zeros((1, n)))
        self.store = store
        store.buffers[f"{name}.running_mean"] = np.zeros((1, n))
        store.buffers[f"{name}.running_var"] = np.ones((1, n))

    @property
    def running_mean(self) -> np.ndarray:
        return self.store.buffers[f"{self.name}.running_mean"]

    @property
    def running_var(self) -> np.ndarray:
        return self.store.buffers[f"{self.name}.running_var"]

    def __call__(self, x: Tensor, train: bool) -> Tensor:
        if not train:
            return ad.batch_norm(x, self.gamma, self.beta, BN_EPS,
                                 mean_=self.running_mean, var=self.running_var)
        if x.shape[0] < 2:
            raise ValueError("batch norm in train mode needs a batch of at least 2 rows")
        xv = x.value
        mu = xv.mean(axis=0, keepdims=True)
        var = xv.var(axis=0, keepdims=True)
        buf = self.store.buffers
        buf[f"{self.name}.running_mean"] = BN_MOMENTUM * self.running_mean + (1 - BN_MOMENTUM) * mu
        buf[f"{self.name}.running_var"] = BN_MOMENTUM * self.running_var + (1 - BN_MOMENTUM) * var
        return ad.batch_norm(x, self.gamma, self.beta, BN_EPS)


@dataclass(frozen=True)
class MlpSpec:
    widths: tuple  # input width, hidden widths..., output width
    activation: str = "relu"
    batch_norm: bool = False

    def __post_init__(self):
        if len(self.widths) < 2 or any(int(w) <= 0 for w in self.widths):
            raise ValueError(f"MLP needs >= 1 layer with positive widths, got {self.widths}")


_ACTIVATIONS = {"relu": ad.relu, "tanh": ad.tanh, "sigmoid": ad.sigmoid}


class Mlp:
    """affine -> [batch norm] -> activation for each hidden layer; the last layer is affine only."""

    def __init__(self, store: ParamStore, name: str, spec: MlpSpec):
        self.spec = spec
        w = spec.widths
        self.layers = [Linear(store, f"{name}.{i}", w[i], w[i + 1]) for i in range(len(w) - 1)]
        self.norms = ([BatchNorm(store, f"{name}.bn{i}", w[i + 1]) for i in range(len(w) - 2)]
                      if spec.batch_norm else None)
        self.act = _ACTIVATIONS[spec.activation]

    def __call__(self, x: Tensor, train: bool = False) -> Tensor:
        if x.shape[0] == 0:
            raise ValueError("MLP input batch is empty")
        for i, layer in enumerate(self.layers[:-1]):
            x = layer(x)
            if self.norms is not None:
                x = self.norms[i](x, train)
            x = self.act(x)
        return self.layers[-1](x)


def mlp_forward(x: Tensor, mlp: Mlp, train: bool = False) -> Tensor:
    return mlp(x, train=train)


# ---------------------------------------------------------------------------
# recurrent cells


class GRUCell:
    """GRU with the update convention

    z = sigmoid(W_z [x, h] + b_z)
    r = sigmoid(W_r [x, h] + b_r)
    h~ = tanh(W_h [x, r * h] + b_h)
    h' = (1 - z) * h + z * h~

    Each ``W_*`` is stored split into an input part (``in x H``) and a
    recurrent part (``H x H``) so a whole sequence can be projected up front.
    """

    kind = CellKind.GRU
    n_gates = 3

    def __init__(self, store: ParamStore, name: str, n_in: int, n_hidden: int):
        self.n_in, self.n_hidden = n_in, n_hidden
        self.Wx = [store.weight(f"{name}.Wx_{g}", n_in, n_hidden) for g in "zrh"]
        self.Wh = [store.weight(f"{name}.Wh_{g}", n_hidden, n_hidden) for g in "zrh"]
        self.b = [store.bias(f"{name}.b_{g}", n_hidden) for g in "zrh"]

    def zero_state(self, batch: int):
        return ad.Tensor(np.zeros((batch, self.n_hidden)))

    def project(self, x: Tensor) -> list:
        """Input projections plus biases, one ``(n, H)`` tensor per gate."""
        n = x.shape[0]
        return [ad.matmul(x, W) + _bias_rows(b, n) for W, b in zip(self.Wx, self.b)]

    def step_projected(self, gx: list, h: Tensor, dt=None) -> Tensor:
        z = ad.sigmoid(gx[0] + ad.matmul(h, self.Wh[0]))
        r = ad.sigmoid(gx[1] + ad.matmul(h, self.Wh[1]))
        cand = ad.tanh(gx[2] + ad.matmul(r * h, self.Wh[2]))
        return h + z * (cand - h)

    def step(self, x: Tensor, h: Tensor, dt=None) -> Tensor:
        _check_width("gru_step", x, self.n_in, h, self.n_hidden)
        return self.step_projected(self.project(x), h)

    @staticmethod
    def output(state) -> Tensor:
        return state


class LSTMCell:
    """LSTM with gates i, f, o and candidate g, each ``act(W_* [x, h] + b_*)``:

    c' = f * c + i * g
    h' = o * tanh(c')

    State is the pair ``(h, c)``.
    """

    kind = CellKind.LSTM
    gate_names = "ifog"

    def __init__(self, store: ParamStore, name: str, n_in: int, n_hidden: int):
        self.n_in, self.n_hidden = n_in, n_hidden
        self.Wx = [store.weight(f"{name}.Wx_{g}", n_in, n_hidden) for g in self.gate_names]
        # time gates (TimeLSTMCell) have no recurrent part
        self.Wh = [store.weight(f"{name}.Wh_{g}", n_hidden, n_hidden) for g in "ifog"]
        self.b = [store.bias(f"{name}.b_{g}", n_hidden) for g in self.gate_names]

    def zero_state(self, batch: int):
        z = np.zeros((batch, self.n_hidden))
        return ad.Tensor(z), ad.Tensor(z.copy())

    def project(self, x: Tensor) -> list:
        n = x.shape[0]
        return [ad.matmul(x, W) + _bias_rows(b, n) for W, b in zip(self.Wx, self.b)]

    def _gates(self, gx: list, h: Tensor):
        i = ad.sigmoid(gx[0] + ad.matmul(h, self.Wh[0]))
        f = ad.sigmoid(gx[1] + ad.matmul(h, self.Wh[1]))
        o = ad.sigmoid(gx[2] + ad.matmul(h, self.Wh[2]))
        g = ad.tanh(gx[3] + ad.matmul(h, self.Wh[3]))
        return i, f, o, g

    def step_projected(self, gx: list, state, dt=None):
        h, c = state
        i, f, o, g = self._gates(gx, h)
        c_new = f * c + i * g
        return o * ad.tanh(c_new), c_new

    def step(self, x: Tensor, state, dt=None):
        _check_width("lstm_step", x, self.n_in, state[0], self.n_hidden)
        return self.step_projected(self.project(x), state)

    @staticmethod
    def output(state) -> Tensor:
        return state[0]


class TimeLSTMCell(LSTMCell):
    """LSTM with two time gates driven by interval features ``dt1, dt2 >= 0``.

    T1 = sigmoid(W_t1 x + sigmoid(V_t1 dt1) + b_t1)
    T2 = sigmoid(W_t2 x + sigmoid(V_t2 dt2) + b_t2)
    c' = T2 * f * c + T1 * i * g
    h' = o * tanh(c')

    ``dt1`` is the log gap since the previous interaction and ``dt2`` the log
    gap until the prediction target.  T1 gates what is written, T2 gates what
    is carried over.  This gate layout is a stand-in: the reference cell
    equations are not reproduced here.
    """

    kind = CellKind.TIME_LSTM
    gate_names = "ifogTU"  # T = time gate 1, U = time gate 2

    def __init__(self, store: ParamStore, name: str, n_in: int, n_hidden: int):
        super().__init__(store, name, n_in, n_hidden)
        self.V1 = store.weight(f"{name}.V_t1", 1, n_hidden)
        self.V2 = store.weight(f"{name}.V_t2", 1, n_hidden)

    def step_projected(self, gx: list, state, dt=None):
        if dt is None:
            raise ValueError("time_lstm_step needs interval features")
        h, c = state
        d1, d2 = dt
        i, f, o, g = self._gates(gx, h)
        t1 = ad.sigmoid(gx[4] + ad.sigmoid(ad.matmul(d1, self.V1)))
        t2 = ad.sigmoid(gx[5] + ad.sigmoid(ad.matmul(d2, self.V2)))
        c_new = t2 * f * c + t1 * i * g
        return o * ad.tanh(c_new), c_new

    def step(self, x: Tensor, state, dt=None):
        _check_width("time_lstm_step", x, self.n_in, state[0], self.n_hidden)
        if dt is None:
            raise ValueError("time_lstm_step needs interval features")
        d = np.asarray(dt.value if isinstance(dt, Tensor) else dt, dtype=np.float64)
        d = d.reshape(x.shape[0], 2)
        if np.any(d < 0):
            raise ValueError("time interval features must be nonnegative")
        dts = (ad.Tensor(d[:, :1]), ad.Tensor(d[:, 1:]))
        return self.step_projected(self.project(x), state, dts)


def _check_width(op: str, x: Tensor, n_in: int, h: Tensor, n_hidden: int) -> None:
    if x.value.ndim != 2 or x.shape[1] != n_in:
        raise ad.ShapeError(op, x.shape, (x.shape[0], n_in), "input width")
    if h.shape != (x.shape[0], n_hidden):
        raise ad.ShapeError(op, h.shape, (x.shape[0], n_hidden), "hidden width")


def make_cell(kind, store: ParamStore, name: str, n_in: int, n_hidden: int):
    kind = CellKind(kind)
    cls = {CellKind.GRU: GRUCell, CellKind.LSTM: LSTMCell, CellKind.TIME_LSTM: TimeLSTMCell}[kind]
    return cls(store, name, n_in, n_hidden)


def gru_step(cell: GRUCell, x: Tensor, h: Tensor) -> Tensor:
    return cell.step(x, h)


def lstm_step(cell: LSTMCell, x: Tensor, state):
    return cell.step(x, state)


def time_lstm_step(cell: TimeLSTMCell, x: Tensor, dt, state):
    return cell.step(x, state, dt)


def run_sequence(cell, x_seq: Tensor, steps: int, batch: int, dt: np.ndarray | None = None) -> list:
    """Run ``cell`` over a time-major stacked input ``(steps * batch, in)``.

    Row ``t * batch + b`` holds step ``t`` of sequence ``b``.  Returns the list
    of per-step outputs, each ``(batch, H)``.  Padded tail steps are computed
    but callers select outputs by length, so they never leak into results.
    """
    if x_seq.shape[0] != steps * batch:
        raise ad.ShapeError("run_sequence", x_seq.shape, (steps * batch, cell.n_in))
    gx = cell.project(x_seq)
    if dt is not None and np.any(dt < 0):
        raise ValueError("time interval features must be nonnegative")
    state = cell.zero_state(batch)
    outputs = []
    for t in range(steps):
        lo, hi = t * batch, (t + 1) * batch
        gx_t = [g[lo:hi] for g in gx]
        dt_t = None
        if cell.kind is CellKind.TIME_LSTM:
            dt_t = (ad.Tensor(dt[lo:hi, :1]), ad.Tensor(dt[lo:hi, 1:]))
        state = cell.step_projected(gx_t, state, dt_t)
        outputs.append(cell.output(state))
    return outputs


# ---------------------------------------------------------------------------
# attention scorers


class MlpScorer:
    """Scores ``tau(k || q || k - q || k * q)`` with a one-hidden-layer ReLU MLP."""

    def __init__(self, store: ParamStore, name: str, dim: int, hidden: int | None = None):
        self.mlp = Mlp(store, name, MlpSpec((4 * dim, hidden or dim, 1)))

    def __call__(self, keys: Tensor, queries: Tensor) -> Tensor:
        if keys.shape != queries.shape:
            raise ad.ShapeError("attention", keys.shape, queries.shape)
        feats = ad.concat([keys, queries, keys - queries, keys * queries], axis=1)
        return self.mlp(feats)


class InnerProductScorer:
    """Scores ``<k, q>``; has no parameters."""

    def __call__(self, keys: Tensor, queries: Tensor) -> Tensor:
        return ad.inner(keys, queries)
