"""Dense float64 tensors with tape-based reverse-mode autodiff.

The engine is deliberately small: a flat tape of recorded nodes, a handful of
primitives sufficient for an encoder-decoder transformer, and a ParamGroup
container that tracks which named parameters an optimizer may touch. Values
are immutable once produced by an op; only ParamGroup entries are updated in
place (via masked_update) between steps.
"""

from __future__ import annotations

import hashlib
import math
from collections.abc import Callable, Sequence
from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np
from scipy.special import erf

from .errors import ContractError, DomainError, OracleError, ShapeError

_INV_SQRT2 = 0.7071067811865476
_INV_SQRT2PI = 0.3989422804014327


class Tensor:
    """A dense float64 array with an optional gradient slot."""

    __slots__ = ("values", "grad", "requires_grad")

    def __init__(self, values, requires_grad: bool = False):
        arr = np.asarray(values, dtype=np.float64)
        if _check_finite and arr.size and not math.isfinite(float(arr.sum())):
            raise DomainError("tensor initialized with non-finite values")
        self.values = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def size(self) -> int:
        return self.values.size

    def item(self) -> float:
        if self.values.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.values.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.values.copy())

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


# Tape node: (output, inputs, vjp). vjp maps the output gradient to one
# gradient array per input, aligned with the inputs tuple.
_TapeNode = tuple[Tensor, tuple[Tensor, ...], Callable[[np.ndarray], list[np.ndarray]]]
_tape: list[_TapeNode] = []
_grad_enabled: bool = True
_check_finite: bool = True


@contextmanager
def no_grad():
    """Disable tape recording (inference / numeric probing)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def tape_size() -> int:
    return len(_tape)


def clear_tape() -> None:
    _tape.clear()


def _finite(arr: np.ndarray, op: str) -> np.ndarray:
    # A single scalar reduction: any NaN/Inf propagates into the sum.
    if _check_finite and not math.isfinite(float(arr.sum())):
        raise DomainError(f"{op} produced non-finite values")
    return arr


def _make(values: np.ndarray, inputs: tuple[Tensor, ...], vjp, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.values = _finite(values, op)
    out.grad = None
    out.requires_grad = False
    if _grad_enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        _tape.append((out, inputs, vjp))
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum grad over axes that were broadcast to reach grad.shape."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# Primitives
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        values = a.values + b.values
    except ValueError as exc:
        raise ShapeError(f"add: {a.shape} vs {b.shape}") from exc

    def vjp(g):
        return [_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)]

    return _make(values, (a, b), vjp, "add")


def mul(a: Tensor, b: Tensor) -> Tensor:
    try:
        values = a.values * b.values
    except ValueError as exc:
        raise ShapeError(f"mul: {a.shape} vs {b.shape}") from exc

    def vjp(g):
        return [_unbroadcast(g * b.values, a.shape),
                _unbroadcast(g * a.values, b.shape)]

    return _make(values, (a, b), vjp, "mul")


def scale(a: Tensor, factor: float) -> Tensor:
    factor = float(factor)

    def vjp(g):
        return [g * factor]

    return _make(a.values * factor, (a,), vjp, "scale")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D or leading-batched matrix product (numpy matmul semantics)."""
    if a.values.ndim < 2 or b.values.ndim < 2:
        raise ShapeError(f"matmul needs >=2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    values = a.values @ b.values

    def vjp(g):
        ga = g @ b.values.swapaxes(-1, -2)
        gb = a.values.swapaxes(-1, -2) @ g
        return [_unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)]

    return _make(values, (a, b), vjp, "matmul")


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    if a.values.ndim == 0 or a.values.shape[axis] == 0:
        raise DomainError("softmax over an empty axis")
    shifted = a.values - a.values.max(axis=axis, keepdims=True)
    exp = np.exp(shifted)
    values = exp / exp.sum(axis=axis, keepdims=True)

    def vjp(g):
        dot = (g * values).sum(axis=axis, keepdims=True)
        return [values * (g - dot)]

    return _make(values, (a,), vjp, "softmax")


def layer_norm(a: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance (no affine terms).

    Zero-variance rows are well defined through the eps term and map to zeros.
    """
    mean = a.values.mean(axis=-1, keepdims=True)
    var = a.values.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (a.values - mean) * inv

    def vjp(g):
        gm = g.mean(axis=-1, keepdims=True)
        gx = (g * xhat).mean(axis=-1, keepdims=True)
        return [inv * (g - gm - xhat * gx)]

    return _make(xhat, (a,), vjp, "layer_norm")


def gelu(a: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    cdf = 0.5 * (1.0 + erf(a.values * _INV_SQRT2))
    values = a.values * cdf

    def vjp(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * a.values * a.values)
        return [g * (cdf + a.values * pdf)]

    return _make(values, (a,), vjp, "gelu")


def embedding_lookup(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if table.values.ndim != 2:
        raise ShapeError(f"embedding table must be 2-D, got {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ContractError("embedding id outside table")
    values = table.values[ids]

    def vjp(g):
        gt = np.zeros_like(table.values)
        np.add.at(gt, ids, g)
        return [gt]

    return _make(values, (table,), vjp, "embedding_lookup")


def concat_seq(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate along the sequence (first) axis; empty parts are dropped."""
    kept = tuple(p for p in parts if p.values.shape[0] > 0)
    if not kept:
        raise ShapeError("concat_seq of no non-empty parts")
    trailing = {p.values.shape[1:] for p in kept}
    if len(trailing) > 1:
        raise ShapeError(f"concat_seq trailing shapes differ: {sorted(trailing)}")
    values = np.concatenate([p.values for p in kept], axis=0)
    lengths = [p.values.shape[0] for p in kept]

    def vjp(g):
        grads, offset = [], 0
        for n in lengths:
            grads.append(g[offset:offset + n])
            offset += n
        return grads

    return _make(values, kept, vjp, "concat_seq")


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    values = a.values.reshape(tuple(shape))

    def vjp(g):
        return [g.reshape(a.shape)]

    return _make(values, (a,), vjp, "reshape")


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(int(i) for i in np.argsort(axes))
    values = a.values.transpose(axes)

    def vjp(g):
        return [g.transpose(inverse)]

    return _make(values, (a,), vjp, "transpose")


def sum_all(a: Tensor) -> Tensor:
    def vjp(g):
        return [np.full(a.shape, float(g))]

    return _make(np.asarray(a.values.sum()), (a,), vjp, "sum_all")


def mean_all(a: Tensor) -> Tensor:
    n = a.values.size

    def vjp(g):
        return [np.full(a.shape, float(g) / n)]

    return _make(np.asarray(a.values.mean()), (a,), vjp, "mean_all")


def softmax_cross_entropy(logits: Tensor, target_ids) -> Tensor:
    """Mean negative log-likelihood of target_ids under softmax(logits).

    logits: [V] for a single position or [T, V]; target_ids: int or [T].
    """
    ids = np.atleast_1d(np.asarray(target_ids, dtype=np.int64))
    mat = logits.values.reshape(-1, logits.shape[-1])
    if ids.shape[0] != mat.shape[0]:
        raise ShapeError(f"{ids.shape[0]} targets for {mat.shape[0]} positions")
    if ids.size and (ids.min() < 0 or ids.max() >= mat.shape[1]):
        raise ContractError("target id outside vocabulary")
    shifted = mat - mat.max(axis=-1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=-1))
    rows = np.arange(mat.shape[0])
    nll = logz - shifted[rows, ids]
    t = mat.shape[0]

    def vjp(g):
        probs = np.exp(shifted - logz[:, None])
        probs[rows, ids] -= 1.0
        out = (float(g) / t) * probs
        probs[rows, ids] += 1.0  # leave closure state reusable
        return [out.reshape(logits.shape)]

    return _make(np.asarray(nll.mean()), (logits,), vjp, "softmax_cross_entropy")


_PRIMITIVES: dict[str, Callable] = {
    "matmul": lambda inputs, attrs: matmul(*inputs),
    "add": lambda inputs, attrs: add(*inputs),
    "softmax": lambda inputs, attrs: softmax(inputs[0], axis=attrs.get("axis", -1)),
    "layer_norm": lambda inputs, attrs: layer_norm(inputs[0], eps=attrs.get("eps", 1e-5)),
    "embedding_lookup": lambda inputs, attrs: embedding_lookup(inputs[0], attrs["ids"]),
    "gelu": lambda inputs, attrs: gelu(inputs[0]),
    "scale": lambda inputs, attrs: scale(inputs[0], attrs["factor"]),
    "concat_seq": lambda inputs, attrs: concat_seq(inputs),
}

PRIMITIVE_KINDS = tuple(sorted(_PRIMITIVES))


def primitive_forward(op_kind: str, inputs: Sequence[Tensor], attrs: dict | None = None) -> Tensor:
    """Dispatch a forward primitive by name, recording it on the tape."""
    if op_kind not in _PRIMITIVES:
        raise ContractError(f"unknown op_kind {op_kind!r}")
    return _PRIMITIVES[op_kind](list(inputs), attrs or {})


def backward(loss: Tensor) -> None:
    """Reverse sweep from a scalar loss; accumulates .grad on requires_grad leaves.

    Leaf = a tensor that appears as an op input but never as an op output.
    The tape is cleared afterwards, success or not.
    """
    try:
        if loss.values.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        if not loss.requires_grad:
            raise ContractError("loss is not connected to the tape")
        produced = {id(out) for out, _, _ in _tape}
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.values)}
        leaves: dict[int, Tensor] = {}
        for out, inputs, vjp in reversed(_tape):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            contribs = vjp(g)
            for inp, contrib in zip(inputs, contribs):
                if not inp.requires_grad:
                    continue
                _finite(contrib, "backward")
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + contrib
                else:
                    grads[key] = contrib
                if key not in produced:
                    leaves[key] = inp
        committed: set[int] = set()
        for key, leaf in leaves.items():
            g = grads.get(key)
            if g is None:
                continue
            # Copy views / arrays shared with another leaf so each .grad is owned.
            if g.base is not None or id(g) in committed:
                g = g.copy()
            committed.add(id(g))
            leaf.grad = g if leaf.grad is None else leaf.grad + g
    finally:
        clear_tape()


# ---------------------------------------------------------------------------
# Parameter containers
# ---------------------------------------------------------------------------

class ParamGroup:
    """Ordered, named parameter tensors with a per-entry trainable flag."""

    def __init__(self):
        self.entries: dict[str, Tensor] = {}
        self.trainable: dict[str, bool] = {}

    def add(self, name: str, tensor: Tensor, trainable: bool = True) -> None:
        if name in self.entries:
            raise ContractError(f"duplicate parameter name {name!r}")
        tensor.requires_grad = True
        self.entries[name] = tensor
        self.trainable[name] = bool(trainable)

    def __getitem__(self, name: str) -> Tensor:
        return self.entries[name]

    def __contains__(self, name: str) -> bool:
        return name in self.entries

    def names(self) -> list[str]:
        return list(self.entries)

    def set_trainable(self, predicate: Callable[[str], bool]) -> None:
        for name in self.entries:
            self.trainable[name] = bool(predicate(name))

    def trainable_names(self) -> list[str]:
        return [n for n, t in self.trainable.items() if t]

    def num_params(self, names: Sequence[str] | None = None) -> int:
        names = self.names() if names is None else list(names)
        return sum(self.entries[n].size for n in names)

    def zero_grad(self) -> None:
        for t in self.entries.values():
            t.grad = None

    def checksum(self, names: Sequence[str] | None = None) -> str:
        """SHA-256 over the serialized bytes of the named entries, in name order."""
        names = self.names() if names is None else list(names)
        h = hashlib.sha256()
        for n in sorted(names):
            h.update(n.encode())
            h.update(np.ascontiguousarray(self.entries[n].values).tobytes())
        return h.hexdigest()

    def clone(self) -> "ParamGroup":
        other = ParamGroup()
        for name, t in self.entries.items():
            other.add(name, Tensor(t.values.copy()), self.trainable[name])
        return other


def masked_update(params: ParamGroup, updates: dict[str, np.ndarray | Tensor]) -> None:
    """Add each update to its parameter, skipping frozen entries entirely.

    Frozen entries are byte-identical before and after, even when an update
    is supplied for them.
    """
    for name, upd in updates.items():
        if name not in params.entries:
            raise ContractError(f"update for unknown parameter {name!r}")
        arr = upd.values if isinstance(upd, Tensor) else np.asarray(upd, dtype=np.float64)
        target = params.entries[name]
        if arr.shape != target.values.shape:
            raise ShapeError(f"update shape {arr.shape} != param shape {target.values.shape} for {name!r}")
        if not params.trainable[name]:
            continue
        _finite(arr, "masked_update")
        target.values = target.values + arr


# ---------------------------------------------------------------------------
# Gradient verification
# ---------------------------------------------------------------------------

@dataclass
class CheckReport:
    max_rel_err: float
    passed: bool
    worst_param: str = ""


def finite_diff_check(
    f: Callable[[ParamGroup], Tensor],
    params: ParamGroup,
    epsilon: float = 1e-5,
    tolerance: float = 1e-4,
    grad_transform: Callable[[str, np.ndarray], np.ndarray] | None = None,
) -> CheckReport:
    """Compare analytic gradients of f against central finite differences.

    Every element of every trainable entry is perturbed. grad_transform, when
    given, post-processes the analytic gradient (used by negative-control
    tests); it must default to identity behaviour.
    """
    if not 0.0 < epsilon <= 1e-2:
        raise ContractError(f"epsilon {epsilon} outside (0, 1e-2]")
    with no_grad():
        base_a = f(params).item()
        base_b = f(params).item()
    if base_a != base_b:
        raise OracleError("objective is not deterministic: two evaluations differ")

    params.zero_grad()
    loss = f(params)
    backward(loss)

    max_rel = 0.0
    worst = ""
    for name in params.trainable_names():
        tensor = params.entries[name]
        analytic = np.zeros_like(tensor.values) if tensor.grad is None else tensor.grad
        if grad_transform is not None:
            analytic = grad_transform(name, analytic)
        flat = tensor.values.reshape(-1)
        aflat = analytic.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            with no_grad():
                flat[i] = orig + epsilon
                plus = f(params).item()
                flat[i] = orig - epsilon
                minus = f(params).item()
                flat[i] = orig
            numeric = (plus - minus) / (2.0 * epsilon)
            rel = abs(aflat[i] - numeric) / max(1.0, abs(aflat[i]), abs(numeric))
            if rel > max_rel:
                max_rel = rel
                worst = name
    params.zero_grad()
    max_rel = float(max_rel)
    return CheckReport(max_rel_err=max_rel, passed=bool(max_rel <= tolerance), worst_param=worst)
