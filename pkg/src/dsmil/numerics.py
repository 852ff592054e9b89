"""Dense 2-D reverse-mode autodiff and SGD with momentum.

Every tensor is a 2-D float64 array. Operations record themselves on the
active :class:`Tape` (entered with ``with Tape() as tape:``) whenever one of
their operands requires a gradient; outside a tape they are plain numpy
computations.

Several operations take a ``group`` argument. A stacked matrix of ``B`` bags
with ``group`` rows each is treated as ``B`` independent blocks, which lets
a whole dataset of equally sized bags run through one call.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

EPS = 1e-7


class ShapeError(ValueError):
    """Operand dimensions are incompatible."""


class TapeError(RuntimeError):
    """Backward was requested for something the tape never produced."""


class OptimizerError(RuntimeError):
    """A parameter reached the optimizer without a gradient."""


class Tensor:
    __slots__ = ("value", "grad", "requires_grad", "name")

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        arr = np.array(value, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        elif arr.ndim != 2:
            raise ShapeError(f"tensors are 2-D, got {arr.ndim}-D input")
        self.value = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    @property
    def rows(self) -> int:
        return self.value.shape[0]

    @property
    def cols(self) -> int:
        return self.value.shape[1]

    def item(self) -> float:
        if self.value.size != 1:
            raise ShapeError(f"item() needs a 1x1 tensor, got {self.shape}")
        return float(self.value[0, 0])

    def numpy(self) -> np.ndarray:
        return self.value

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class _Record:
    output: Tensor
    inputs: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


_ACTIVE: list["Tape"] = []


class Tape:
    """Ordered record of operations, replayed in reverse by :func:`backward`."""

    def __init__(self) -> None:
        self.records: list[_Record] = []

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.remove(self)

    def __len__(self) -> int:
        return len(self.records)


def _result(value: np.ndarray, inputs: tuple[Tensor, ...], grad_fn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.value = value
    out.grad = None
    out.name = None
    out.requires_grad = False
    if _ACTIVE and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        _ACTIVE[-1].records.append(_Record(out, inputs, grad_fn))
    return out


def backward(tape: Tape, loss: Tensor) -> None:
    """Populate ``.grad`` of every gradient-requiring tensor that feeds ``loss``.

    Leaf gradients accumulate; call :func:`zero_grads` (or take an optimizer
    step) between independent backward passes.
    """
    if loss.shape != (1, 1):
        raise TapeError(f"loss must be 1x1, got {loss.shape}")
    end = None
    for i in range(len(tape.records) - 1, -1, -1):
        if tape.records[i].output is loss:
            end = i
            break
    if end is None:
        raise TapeError("loss was not produced on this tape")
    for rec in tape.records[: end + 1]:
        rec.output.grad = None
    loss.grad = np.ones((1, 1))
    for rec in reversed(tape.records[: end + 1]):
        g = rec.output.grad
        if g is None:
            continue
        for t, gi in zip(rec.inputs, rec.backward(g)):
            if gi is None or not t.requires_grad:
                continue
            if t.grad is None:
                t.grad = gi
            else:
                t.grad = t.grad + gi


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


# ---------------------------------------------------------------- basic ops


def _check_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.cols != b.rows:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape} (inner dims {a.cols} != {b.rows})")
    av, bv = a.value, b.value
    return _result(av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g))


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "add")
    return _result(a.value + b.value, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "sub")
    return _result(a.value - b.value, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "mul")
    av, bv = a.value, b.value
    return _result(av * bv, (a, b), lambda g: (g * bv, g * av))


def scale(a: Tensor, s: float) -> Tensor:
    return _result(a.value * s, (a,), lambda g: (g * s,))


def add_row(a: Tensor, bias: Tensor) -> Tensor:
    """``a + bias`` with a 1 x cols bias broadcast down the rows."""
    if bias.shape != (1, a.cols):
        raise ShapeError(f"add_row: bias {bias.shape} does not fit {a.shape}")
    return _result(a.value + bias.value, (a, bias), lambda g: (g, g.sum(axis=0, keepdims=True)))


def transpose(a: Tensor) -> Tensor:
    return _result(a.value.T.copy(), (a,), lambda g: (g.T,))


def detach(a: Tensor) -> Tensor:
    return Tensor(a.value)


def total(a: Tensor) -> Tensor:
    """Sum of all entries as a 1x1 tensor."""
    shape = a.shape
    return _result(np.array([[a.value.sum()]]), (a,), lambda g: (np.full(shape, g[0, 0]),))


def mean(a: Tensor) -> Tensor:
    n = a.value.size
    if n == 0:
        raise ShapeError("mean of an empty tensor")
    return scale(total(a), 1.0 / n)


def sigmoid(x: Tensor) -> Tensor:
    v = x.value
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)
    return _result(out, (x,), lambda g: (g * out * (1.0 - out),))


def relu(x: Tensor) -> Tensor:
    mask = x.value > 0
    return _result(x.value * mask, (x,), lambda g: (g * mask,))


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    v = x.value
    inside = (v >= lo) & (v <= hi)
    return _result(np.clip(v, lo, hi), (x,), lambda g: (g * inside,))


def log(x: Tensor) -> Tensor:
    v = x.value
    return _result(np.log(v), (x,), lambda g: (g / v,))


def _softmax_np(v: np.ndarray, axis: int) -> np.ndarray:
    z = v - v.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_rows(x: Tensor) -> Tensor:
    """Row-wise softmax, stabilized by subtracting each row's maximum."""
    if x.value.size == 0:
        raise ShapeError("softmax_rows: empty tensor")
    s = _softmax_np(x.value, axis=1)

    def grad(g):
        return (s * (g - (g * s).sum(axis=1, keepdims=True)),)

    return _result(s, (x,), grad)


def _blocks(x: Tensor, group: int, op: str) -> int:
    if group < 1 or x.rows % group:
        raise ShapeError(f"{op}: {x.rows} rows do not split into groups of {group}")
    return x.rows // group


def softmax_groups(x: Tensor, group: int) -> Tensor:
    """Softmax down each column within every block of ``group`` rows."""
    if x.value.size == 0:
        raise ShapeError("softmax_groups: empty tensor")
    b = _blocks(x, group, "softmax_groups")
    cols = x.cols
    s3 = _softmax_np(x.value.reshape(b, group, cols), axis=1)

    def grad(g):
        g3 = g.reshape(b, group, cols)
        return ((s3 * (g3 - (g3 * s3).sum(axis=1, keepdims=True))).reshape(-1, cols),)

    return _result(s3.reshape(-1, cols), (x,), grad)


def sum_groups(x: Tensor, group: int) -> Tensor:
    """Column sums of every block of ``group`` rows: (B*group, c) -> (B, c)."""
    b = _blocks(x, group, "sum_groups")
    cols = x.cols
    out = x.value.reshape(b, group, cols).sum(axis=1)

    def grad(g):
        return (np.repeat(g, group, axis=0),)

    return _result(out, (x,), grad)


def gram_groups(e: Tensor, group: int) -> Tensor:
    """Inner products within each block: row ``b*group+m`` holds ``e_m . e_n`` for n in the block."""
    b = _blocks(e, group, "gram_groups")
    e3 = e.value.reshape(b, group, e.cols)
    out = np.matmul(e3, e3.transpose(0, 2, 1))

    def grad(g):
        g3 = g.reshape(b, group, group)
        return (np.matmul(g3 + g3.transpose(0, 2, 1), e3).reshape(-1, e.cols),)

    return _result(out.reshape(-1, group), (e,), grad)


def mix_groups(w: Tensor, v: Tensor, group: int) -> Tensor:
    """Per-block ``W_b @ V_b`` for stacked (B*group, group) weights and (B*group, d) values."""
    b = _blocks(v, group, "mix_groups")
    if w.shape != (v.rows, group):
        raise ShapeError(f"mix_groups: weights {w.shape} do not fit values {v.shape} in groups of {group}")
    w3 = w.value.reshape(b, group, group)
    v3 = v.value.reshape(b, group, v.cols)
    out = np.matmul(w3, v3).reshape(-1, v.cols)

    def grad(g):
        g3 = g.reshape(b, group, v.cols)
        gw = np.matmul(g3, v3.transpose(0, 2, 1)).reshape(-1, group)
        gv = np.matmul(w3.transpose(0, 2, 1), g3).reshape(-1, v.cols)
        return gw, gv

    return _result(out, (w, v), grad)


def smooth_l1_elementwise(x: Tensor) -> Tensor:
    v = x.value
    a = np.abs(v)
    small = a < 1.0
    out = np.where(small, 0.5 * v * v, a - 0.5)
    return _result(out, (x,), lambda g: (g * np.where(small, v, np.sign(v)),))


def pick(x: Tensor, columns: np.ndarray) -> Tensor:
    """Gather ``x[i, columns[i]]`` into an (rows, 1) tensor."""
    cols = np.asarray(columns, dtype=np.int64)
    if cols.shape != (x.rows,):
        raise ShapeError(f"pick: {cols.shape[0] if cols.ndim else 0} indices for {x.rows} rows")
    idx = np.arange(x.rows)
    shape = x.shape

    def grad(g):
        out = np.zeros(shape)
        out[idx, cols] = g[:, 0]
        return (out,)

    return _result(x.value[idx, cols].reshape(-1, 1), (x,), grad)


def bce(p: Tensor, target, weights=None) -> Tensor:
    """Mean binary cross-entropy with ``p`` clamped to ``[EPS, 1 - EPS]``."""
    t = as_tensor(target)
    _check_same(p, t, "bce")
    pc = clamp(p, EPS, 1.0 - EPS)
    one = Tensor(np.ones(p.shape))
    ll = add(mul(t, log(pc)), mul(sub(one, t), log(sub(one, pc))))
    if weights is not None:
        ll = mul(ll, as_tensor(weights))
    return scale(mean(ll), -1.0)


# ------------------------------------------------------------- parameters


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int, name: str | None = None) -> Tensor:
    a = math.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-a, a, size=(fan_in, fan_out)), requires_grad=True, name=name)


def zeros_param(rows: int, cols: int, name: str | None = None) -> Tensor:
    return Tensor(np.zeros((rows, cols)), requires_grad=True, name=name)


@dataclass
class SgdConfig:
    learning_rate: float = 0.001
    momentum: float = 0.9
    weight_decay: float = 0.0005
    decay_factor: float = 10.0
    decay_steps: list[int] = field(default_factory=list)

    def __post_init__(self) -> None:
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if self.decay_factor <= 0:
            raise ValueError("decay_factor must be > 0")

    def lr_at(self, iteration: int) -> float:
        passed = sum(1 for s in self.decay_steps if iteration >= s)
        return self.learning_rate / self.decay_factor**passed


class Sgd:
    """Momentum SGD holding one velocity buffer per parameter."""

    def __init__(self, params: Sequence[Tensor], config: SgdConfig):
        self.params = list(params)
        self.config = config
        self.velocity = [np.zeros_like(p.value) for p in self.params]

    def step(self, iteration: int, allow_missing: bool = False) -> float:
        """Update every parameter; with ``allow_missing`` those without a grad stay frozen."""
        cfg = self.config
        lr = cfg.lr_at(iteration)
        for p, v in zip(self.params, self.velocity):
            if p.grad is None:
                if not allow_missing:
                    raise OptimizerError(f"parameter {p.name or p!r} has no gradient")
                continue
            v *= cfg.momentum
            v -= lr * (p.grad + cfg.weight_decay * p.value)
            p.value += v
            p.grad = None
        return lr


def sgd_step(params, config: SgdConfig, iteration: int, optimizer: Sgd | None = None) -> float:
    """One SGD update of ``params``; returns the learning rate used.

    Without an ``optimizer`` the update starts from zero velocity.
    """
    opt = optimizer if optimizer is not None else Sgd(list(params), config)
    return opt.step(iteration)
