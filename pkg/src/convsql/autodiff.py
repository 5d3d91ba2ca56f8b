"""Minimal reverse-mode automatic differentiation over dense numpy arrays.

Tensors are 0-d scalars, 1-d vectors (layer-norm gains/biases) or 2-d
matrices; everything is float64 unless a store is created with float32.
The graph is the implicit DAG of ``_parents`` references; ``backward``
walks it once in reverse topological order (iteratively, so teacher-forced
decoder chains hundreds of steps deep are fine).

Set ``CONVSQL_CHECK_FINITE=1`` to assert that every op output is finite.
"""

import os
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import ConfigError, ShapeError

_CHECK_FINITE = os.environ.get("CONVSQL_CHECK_FINITE", "") == "1"


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_bwd", "name")

    def __init__(self, data, requires_grad=False, parents=(), bwd=None, name=None):
        self.data = np.asarray(data, dtype=np.float64) if not isinstance(data, np.ndarray) else data
        if _CHECK_FINITE and not np.all(np.isfinite(self.data)):
            raise FloatingPointError(f"non-finite values in tensor {name or '<anon>'}")
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = parents
        self._bwd = bwd
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.data.shape}")
        return float(self.data.reshape(()))

    def backward(self):
        backward(self)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other)))

    def __rsub__(self, other):
        return add(_as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}{tag})"


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def _track(out_data, parents, bwd, name=None) -> Tensor:
    needs = any(p.requires_grad or p._parents for p in parents)
    if not needs:
        return Tensor(out_data, name=name)
    return Tensor(out_data, parents=tuple(parents), bwd=bwd, name=name)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum grad down to `shape` (reverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# primitive ops


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data + b.data

    def bwd(g, acc):
        acc(a, _unbroadcast(g, a.data.shape))
        acc(b, _unbroadcast(g, b.data.shape))

    return _track(out, (a, b), bwd)


def neg(a) -> Tensor:
    a = _as_tensor(a)

    def bwd(g, acc):
        acc(a, -g)

    return _track(-a.data, (a,), bwd)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data * b.data

    def bwd(g, acc):
        acc(a, _unbroadcast(g * b.data, a.data.shape))
        acc(b, _unbroadcast(g * a.data, b.data.shape))

    return _track(out, (a, b), bwd)


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data / b.data

    def bwd(g, acc):
        acc(a, _unbroadcast(g / b.data, a.data.shape))
        acc(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _track(out, (a, b), bwd)


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul expects 2-d operands, got {a.data.shape} @ {b.data.shape}")
    out = a.data @ b.data

    def bwd(g, acc):
        acc(a, g @ b.data.T)
        acc(b, a.data.T @ g)

    return _track(out, (a, b), bwd)


def transpose(a) -> Tensor:
    a = _as_tensor(a)

    def bwd(g, acc):
        acc(a, g.T)

    return _track(a.data.T, (a,), bwd)


def concat(tensors, axis=1) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]

    def bwd(g, acc):
        offset = 0
        for t, size in zip(tensors, sizes):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(offset, offset + size)
            acc(t, g[tuple(idx)])
            offset += size

    return _track(out, tuple(tensors), bwd)


def slice_cols(a, start, stop) -> Tensor:
    a = _as_tensor(a)
    out = a.data[:, start:stop]

    def bwd(g, acc):
        full = np.zeros_like(a.data)
        full[:, start:stop] = g
        acc(a, full)

    return _track(out, (a,), bwd)


def gather_rows(a, index) -> Tensor:
    """Select rows of `a` by an integer array; backward scatter-adds."""
    a = _as_tensor(a)
    idx = np.asarray(index, dtype=np.int64)
    out = a.data[idx]

    def bwd(g, acc):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        acc(a, full)

    return _track(out, (a,), bwd)


def pick(a, row, col) -> Tensor:
    """Single entry of a 2-d tensor as a 0-d scalar."""
    a = _as_tensor(a)
    out = np.asarray(a.data[row, col])

    def bwd(g, acc):
        full = np.zeros_like(a.data)
        full[row, col] = g
        acc(a, full)

    return _track(out, (a,), bwd)


def tsum(a) -> Tensor:
    a = _as_tensor(a)
    out = np.asarray(a.data.sum())

    def bwd(g, acc):
        acc(a, np.broadcast_to(g, a.data.shape).copy())

    return _track(out, (a,), bwd)


def tmean(a) -> Tensor:
    a = _as_tensor(a)
    n = a.data.size
    out = np.asarray(a.data.sum() / n)

    def bwd(g, acc):
        acc(a, np.broadcast_to(g / n, a.data.shape).copy())

    return _track(out, (a,), bwd)


def relu(a) -> Tensor:
    a = _as_tensor(a)
    out = np.maximum(a.data, 0.0)

    def bwd(g, acc):
        acc(a, g * (a.data > 0.0))

    return _track(out, (a,), bwd)


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    out = np.tanh(a.data)

    def bwd(g, acc):
        acc(a, g * (1.0 - out * out))

    return _track(out, (a,), bwd)


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    out = 1.0 / (1.0 + np.exp(-a.data))

    def bwd(g, acc):
        acc(a, g * out * (1.0 - out))

    return _track(out, (a,), bwd)


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.data)

    def bwd(g, acc):
        acc(a, g * out)

    return _track(out, (a,), bwd)


def log(a) -> Tensor:
    a = _as_tensor(a)
    out = np.log(a.data)

    def bwd(g, acc):
        acc(a, g / a.data)

    return _track(out, (a,), bwd)


def clamp_min(a, floor: float) -> Tensor:
    a = _as_tensor(a)
    out = np.maximum(a.data, floor)

    def bwd(g, acc):
        acc(a, g * (a.data > floor))

    return _track(out, (a,), bwd)


def softmax(a, axis=-1) -> Tensor:
    a = _as_tensor(a)
    data = a.data
    if data.ndim == 1:
        data2, restore = data[None, :], True
        if axis not in (-1, 0):
            raise ShapeError(f"bad softmax axis {axis} for 1-d input")
        ax = -1
    else:
        if data.ndim != 2:
            raise ShapeError("softmax supports 1-d and 2-d tensors")
        ax = axis if axis >= 0 else data.ndim + axis
        restore = False
        data2 = data if ax == 1 else data.T
    if data2.shape[-1] == 0:
        raise ShapeError("degenerate softmax: empty axis")
    out2 = kernels.softmax_fwd(np.ascontiguousarray(data2))
    out = out2[0] if restore else (out2 if ax == 1 or data.ndim == 1 else out2.T)

    def bwd(g, acc):
        g2 = g[None, :] if restore else (g if ax == 1 or g.ndim == 1 else np.ascontiguousarray(g.T))
        gx2 = kernels.softmax_bwd(out2, np.ascontiguousarray(g2))
        acc(a, gx2[0] if restore else (gx2 if ax == 1 else gx2.T))

    return _track(out, (a,), bwd)


def layer_norm(a, gain, bias, eps: float = 1e-5) -> Tensor:
    a, gain, bias = _as_tensor(a), _as_tensor(gain), _as_tensor(bias)
    if a.data.ndim != 2:
        raise ShapeError("layer_norm expects a 2-d tensor")
    n = a.data.shape[-1]
    if gain.data.shape != (n,) or bias.data.shape != (n,):
        raise ShapeError("layer_norm gain/bias must match the last axis extent")
    if n == 1 and eps == 0.0:
        raise ShapeError("layer_norm on extent-1 axis with eps=0 divides by zero")
    x = np.ascontiguousarray(a.data)
    out, mean, rstd = kernels.layernorm_fwd(x, gain.data, bias.data, eps)

    def bwd(g, acc):
        gx, ggain, gbias = kernels.layernorm_bwd(x, gain.data, mean, rstd, np.ascontiguousarray(g))
        acc(a, gx)
        acc(gain, ggain)
        acc(bias, gbias)

    return _track(out, (a, gain, bias), bwd)


def rel_scores(q, rel, labels) -> Tensor:
    """s[i, j] = q[i] . rel[labels[i, j]] (relation-aware attention logits)."""
    q, rel = _as_tensor(q), _as_tensor(rel)
    lab = np.ascontiguousarray(labels, dtype=np.int64)
    out = kernels.rel_scores_fwd(np.ascontiguousarray(q.data), np.ascontiguousarray(rel.data), lab)

    def bwd(g, acc):
        gq, grel = kernels.rel_scores_bwd(
            np.ascontiguousarray(g), np.ascontiguousarray(q.data), np.ascontiguousarray(rel.data), lab
        )
        acc(q, gq)
        acc(rel, grel)

    return _track(out, (q, rel), bwd)


def rel_ctx(e, rel, labels) -> Tensor:
    """c[i] = sum_j e[i, j] * rel[labels[i, j]] (relation-aware values)."""
    e, rel = _as_tensor(e), _as_tensor(rel)
    lab = np.ascontiguousarray(labels, dtype=np.int64)
    out = kernels.rel_ctx_fwd(np.ascontiguousarray(e.data), np.ascontiguousarray(rel.data), lab)

    def bwd(g, acc):
        ge, grel = kernels.rel_ctx_bwd(
            np.ascontiguousarray(g), np.ascontiguousarray(e.data), np.ascontiguousarray(rel.data), lab
        )
        acc(e, ge)
        acc(rel, grel)

    return _track(out, (e, rel), bwd)


def dropout(a, rate: float, rng: np.random.Generator, train: bool) -> Tensor:
    a = _as_tensor(a)
    if not train or rate <= 0.0:
        return a
    mask = (rng.random(a.data.shape) >= rate) / (1.0 - rate)
    out = a.data * mask

    def bwd(g, acc):
        acc(a, g * mask)

    return _track(out, (a,), bwd)


# ---------------------------------------------------------------------------
# composites from the op inventory


def kl_div(p, q, eps: float = 1e-8) -> Tensor:
    """KL(p || q) with entries clamped to >= eps then renormalized before the logs.

    Renormalizing after the clamp keeps the Gibbs bound, so the result is
    >= 0 up to float rounding even for hard (one-hot) inputs.
    """
    p, q = _as_tensor(p), _as_tensor(q)
    if p.data.shape != q.data.shape:
        raise ShapeError(f"kl_div shape mismatch: {p.data.shape} vs {q.data.shape}")
    for name, t in (("p", p), ("q", q)):
        total = float(t.data.sum())
        if abs(total - 1.0) > 1e-6:
            raise ShapeError(f"kl_div: {name} sums to {total}, not a distribution")
    pc = clamp_min(p, eps)
    pc = div(pc, tsum(pc))
    qc = clamp_min(q, eps)
    qc = div(qc, tsum(qc))
    return tsum(mul(pc, add(log(pc), neg(log(qc)))))


def sym_kl(p, q, eps: float = 1e-8) -> Tensor:
    """KL(p||q) + KL(q||p) with the same clamp+renormalize rule as kl_div,
    fused into a single node with an analytic backward."""
    p, q = _as_tensor(p), _as_tensor(q)
    if p.data.shape != q.data.shape:
        raise ShapeError(f"sym_kl shape mismatch: {p.data.shape} vs {q.data.shape}")
    pc = np.maximum(p.data, eps)
    qc = np.maximum(q.data, eps)
    sp = pc.sum()
    sq = qc.sum()
    if abs(sp - 1.0) > 2e-6 or abs(sq - 1.0) > 2e-6:
        raise ShapeError("sym_kl inputs must be distributions (sum to 1 within tolerance)")
    P = pc / sp
    Q = qc / sq
    logdiff = np.log(P) - np.log(Q)
    out = np.asarray((P * logdiff).sum() - (Q * logdiff).sum())

    def bwd(g, acc):
        gP = logdiff + 1.0 - Q / P
        gQ = -logdiff + 1.0 - P / Q
        gpc = (gP - (gP * P).sum()) / sp
        gqc = (gQ - (gQ * Q).sum()) / sq
        acc(p, g * gpc * (p.data > eps))
        acc(q, g * gqc * (q.data > eps))

    return _track(out, (p, q), bwd)


def lstm_cell(x, c, h, wx, wh, b):
    """Standard gated LSTM update; gate order i, f, g, o along the weight columns.

    Fused into two graph nodes (new cell, new hidden) with a shared analytic
    backward; the cell chain through many decode steps stays cheap.
    """
    x, c, h = _as_tensor(x), _as_tensor(c), _as_tensor(h)
    d = c.data.shape[-1]
    if wx.data.shape != (x.data.shape[-1], 4 * d) or wh.data.shape != (d, 4 * d):
        raise ShapeError(
            f"lstm_cell weight shapes {wx.data.shape}/{wh.data.shape} inconsistent with "
            f"input {x.data.shape} and state {c.data.shape}"
        )
    gates = x.data @ wx.data + h.data @ wh.data + b.data
    si = 1.0 / (1.0 + np.exp(-gates[:, :d]))
    sf = 1.0 / (1.0 + np.exp(-gates[:, d : 2 * d]))
    tg = np.tanh(gates[:, 2 * d : 3 * d])
    so = 1.0 / (1.0 + np.exp(-gates[:, 3 * d :]))
    c_new = sf * c.data + si * tg
    th = np.tanh(c_new)
    h_new = so * th

    parents = (x, c, h, wx, wh, b)

    def _push_gate_grads(gc2, gso, acc):
        # gc2: grad wrt the pre-tanh cell value; gso: grad wrt the output gate
        gi = (gc2 * tg) * si * (1.0 - si)
        gf = (gc2 * c.data) * sf * (1.0 - sf)
        gg = (gc2 * si) * (1.0 - tg * tg)
        go = gso * so * (1.0 - so)
        ggates = np.concatenate([gi, gf, gg, go], axis=1)
        acc(x, ggates @ wx.data.T)
        acc(c, gc2 * sf)
        acc(h, ggates @ wh.data.T)
        acc(wx, x.data.T @ ggates)
        acc(wh, h.data.T @ ggates)
        acc(b, ggates)

    def bwd_c(g, acc):
        _push_gate_grads(g, np.zeros_like(g), acc)

    def bwd_h(g, acc):
        _push_gate_grads(g * so * (1.0 - th * th), g * th, acc)

    return _track(c_new, parents, bwd_c), _track(h_new, parents, bwd_h)


# ---------------------------------------------------------------------------
# backward pass


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(param) into .grad of every requires_grad tensor.

    Visits each graph node exactly once in reverse topological order.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward expects a scalar loss, got shape {loss.data.shape}")

    topo: list[Tensor] = []
    state: dict[int, int] = {}  # 0 = discovered, 1 = done
    stack = [loss]
    while stack:
        node = stack[-1]
        nid = id(node)
        if nid not in state:
            state[nid] = 0
            for p in node._parents:
                if id(p) not in state:
                    stack.append(p)
            continue
        stack.pop()
        if state[nid] == 0:
            state[nid] = 1
            topo.append(node)

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}

    def acc(t: Tensor, g: np.ndarray) -> None:
        if not (t.requires_grad or t._parents):
            return
        tid = id(t)
        if tid in grads:
            grads[tid] = grads[tid] + g
        else:
            grads[tid] = g

    for node in reversed(topo):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.requires_grad:
            node.grad = g.copy() if node.grad is None else node.grad + g
        if node._bwd is not None:
            node._bwd(g, acc)


# ---------------------------------------------------------------------------
# parameter store


class ParamStore:
    """Named trainable tensors with seeded init and immutable shapes."""

    def __init__(self, seed: int, dtype=np.float64):
        self.seed = int(seed)
        self.dtype = dtype
        self._rng = np.random.default_rng(self.seed)
        self._params: dict[str, Tensor] = {}
        self._trainable: dict[str, bool] = {}

    def add(self, name: str, shape, init: str = "uniform", trainable: bool = True) -> Tensor:
        if name in self._params:
            raise ConfigError(f"duplicate parameter name {name!r}")
        shape = tuple(int(s) for s in shape)
        if init == "uniform":
            fan_in = shape[0] if len(shape) > 1 else shape[0]
            bound = 1.0 / np.sqrt(fan_in)
            data = self._rng.uniform(-bound, bound, size=shape).astype(self.dtype)
        elif init == "zeros":
            data = np.zeros(shape, dtype=self.dtype)
        elif init == "ones":
            data = np.ones(shape, dtype=self.dtype)
        else:
            raise ConfigError(f"unknown init {init!r}")
        t = Tensor(data, requires_grad=trainable, name=name)
        self._params[name] = t
        self._trainable[name] = trainable
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def names(self) -> list[str]:
        return list(self._params)

    def trainable(self) -> list[tuple[str, Tensor]]:
        return [(n, t) for n, t in self._params.items() if self._trainable[n]]

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def snapshot(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self._params.items()}

    def load_snapshot(self, snap: dict[str, np.ndarray]) -> None:
        for n, arr in snap.items():
            t = self._params[n]
            if t.data.shape != arr.shape:
                raise ShapeError(f"snapshot shape mismatch for {n!r}: {arr.shape} vs {t.data.shape}")
            t.data = arr.astype(self.dtype, copy=True)

    def set_trainable(self, name: str, flag: bool) -> None:
        self._trainable[name] = flag
        self._params[name].requires_grad = flag


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckEntry:
    param: str
    index: tuple
    analytic: float
    numeric: float
    rel_err: float


@dataclass
class GradCheckReport:
    tolerance: float
    entries: list = field(default_factory=list)

    @property
    def max_rel_err(self) -> float:
        return max((e.rel_err for e in self.entries), default=0.0)

    @property
    def worst(self):
        return max(self.entries, key=lambda e: e.rel_err, default=None) if self.entries else None

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tolerance

    def summary(self) -> str:
        w = self.worst
        head = f"grad check: {len(self.entries)} entries, max rel err {self.max_rel_err:.3e}, "
        head += "PASS" if self.passed else f"FAIL (tolerance {self.tolerance:.1e})"
        if w is not None:
            head += f"; worst {w.param}{list(w.index)}: analytic {w.analytic:.6e} vs numeric {w.numeric:.6e}"
        return head


def grad_check(
    loss_fn,
    params: ParamStore,
    step: float = 1e-6,
    tolerance: float = 1e-6,
    max_entries_per_param: int | None = None,
    sample_seed: int = 0,
    denom_floor: float = 1e-4,
) -> GradCheckReport:
    """Compare analytic gradients of loss_fn() against central differences.

    Relative error uses max(|analytic|, |numeric|, denom_floor) as the
    denominator, so near-zero gradient pairs are compared absolutely.
    """
    if params.dtype != np.float64:
        raise ConfigError("grad_check requires a float64 ParamStore")
    params.zero_grad()
    loss = loss_fn()
    base = loss.item()
    if not np.isfinite(base):
        raise FloatingPointError(f"non-finite loss {base} in grad_check")
    backward(loss)

    rng = np.random.default_rng(sample_seed)
    report = GradCheckReport(tolerance=tolerance)
    for name, t in params.trainable():
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        total = t.data.size
        if max_entries_per_param is not None and total > max_entries_per_param:
            flat_ids = rng.choice(total, size=max_entries_per_param, replace=False)
        else:
            flat_ids = np.arange(total)
        flat = t.data.reshape(-1)
        for fid in flat_ids:
            orig = flat[fid]
            flat[fid] = orig + step
            hi = loss_fn().item()
            flat[fid] = orig - step
            lo = loss_fn().item()
            flat[fid] = orig
            numeric = (hi - lo) / (2.0 * step)
            a = float(analytic.reshape(-1)[fid])
            denom = max(abs(a), abs(numeric), denom_floor)
            idx = np.unravel_index(int(fid), t.data.shape)
            report.entries.append(GradCheckEntry(name, tuple(int(i) for i in idx), a, numeric, abs(a - numeric) / denom))
    return report
