"""Reverse-mode autodiff over dense float64 arrays.

A :class:`Tape` records primitive ops as they execute. Calling
:meth:`Tape.backward` on the recorded scalar loss walks the record in
reverse and returns a fresh gradient :class:`ParamStore` laid out exactly
like the parameters that were read through the tape.

Tensors are plain ``numpy.ndarray`` objects with dtype float64. Every
primitive has an analytic backward; there is no higher-order support.
"""

from __future__ import annotations

import math
from collections.abc import Iterable, Iterator, Sequence
from typing import Callable

import numpy as np

DTYPE = np.float64

ParamKey = tuple[str, str]


class ShapeError(ValueError):
    """Operands of a primitive have incompatible shapes."""


class NumericError(FloatingPointError):
    """A forward or backward pass produced NaN or Inf."""


class TapeUsageError(RuntimeError):
    """The tape was used out of order (e.g. backward before forward)."""


class UnknownLayerError(KeyError):
    pass


class ParamStore:
    """Ordered ``(layer_id, name) -> ndarray`` mapping.

    The same class holds parameters and gradients; a gradient store is made
    with :meth:`zeros_like` so the two layouts always match pairwise.
    """

    def __init__(self, items: Iterable[tuple[ParamKey, np.ndarray]] = ()):
        self._data: dict[ParamKey, np.ndarray] = {}
        for key, value in items:
            self.add(key[0], key[1], value)

    def add(self, layer: str, name: str, value: np.ndarray) -> None:
        key = (layer, name)
        if key in self._data:
            raise KeyError(f"duplicate parameter {layer}/{name}")
        self._data[key] = np.ascontiguousarray(value, dtype=DTYPE)

    def __getitem__(self, key: ParamKey) -> np.ndarray:
        return self._data[key]

    def __setitem__(self, key: ParamKey, value: np.ndarray) -> None:
        if key not in self._data:
            raise KeyError(f"unknown parameter {key[0]}/{key[1]}")
        if np.shape(value) != self._data[key].shape:
            raise ShapeError(
                f"{key[0]}/{key[1]}: expected shape {self._data[key].shape}, got {np.shape(value)}"
            )
        self._data[key] = np.ascontiguousarray(value, dtype=DTYPE)

    def __contains__(self, key: object) -> bool:
        return key in self._data

    def __iter__(self) -> Iterator[ParamKey]:
        return iter(self._data)

    def __len__(self) -> int:
        return len(self._data)

    def items(self):
        return self._data.items()

    def keys(self):
        return self._data.keys()

    def values(self):
        return self._data.values()

    def layers(self) -> list[str]:
        """Layer ids in first-appearance order (the model's layer list)."""
        seen: dict[str, None] = {}
        for layer, _ in self._data:
            seen.setdefault(layer, None)
        return list(seen)

    def layer_items(self, layer: str) -> list[tuple[ParamKey, np.ndarray]]:
        out = [(k, v) for k, v in self._data.items() if k[0] == layer]
        if not out:
            raise UnknownLayerError(layer)
        return out

    def num_params(self) -> int:
        return int(sum(v.size for v in self._data.values()))

    def zeros_like(self) -> "ParamStore":
        return ParamStore((k, np.zeros_like(v)) for k, v in self._data.items())

    def copy(self) -> "ParamStore":
        return ParamStore((k, v.copy()) for k, v in self._data.items())

    def flat(self, layers: Iterable[str] | None = None) -> np.ndarray:
        """Concatenate selected layers into one vector (store order)."""
        selected = self._resolve_layers(layers)
        parts = [v.ravel() for (layer, _), v in self._data.items() if layer in selected]
        if not parts:
            return np.zeros(0, dtype=DTYPE)
        return np.concatenate(parts)

    def same_layout(self, other: "ParamStore") -> bool:
        if list(self._data) != list(other._data):
            return False
        return all(self._data[k].shape == other._data[k].shape for k in self._data)

    def tobytes(self) -> bytes:
        return b"".join(v.astype("<f8", copy=False).tobytes() for v in self._data.values())

    def _resolve_layers(self, layers: Iterable[str] | None) -> set[str]:
        known = self.layers()
        if layers is None:
            return set(known)
        selected = set(layers)
        unknown = selected.difference(known)
        if unknown:
            raise UnknownLayerError(f"unknown layer id(s): {sorted(unknown)}")
        return selected

    def scale_(self, c: float) -> "ParamStore":
        for v in self._data.values():
            v *= c
        return self

    def add_scaled_(self, other: "ParamStore", c: float = 1.0) -> "ParamStore":
        """In-place ``self += c * other``."""
        for k, v in self._data.items():
            if c == 1.0:
                v += other._data[k]
            else:
                v += c * other._data[k]
        return self


def grad_dot(a: ParamStore, b: ParamStore, layers: Iterable[str] | None = None) -> float:
    """Inner product of two gradient stores restricted to ``layers``.

    Sums per-layer partial products in model layer order, so the result over a
    union of disjoint layer sets is the sum of the per-set results.
    """
    if not a.same_layout(b):
        raise ShapeError("gradient stores have different layouts")
    selected = a._resolve_layers(layers)
    total = 0.0
    for layer in a.layers():
        if layer not in selected:
            continue
        part = 0.0
        for key, va in a.layer_items(layer):
            part += float(np.dot(va.ravel(), b[key].ravel()))
        total += part
    return total


# ---------------------------------------------------------------------------
# Tape and nodes
# ---------------------------------------------------------------------------


class Var:
    """A value produced on a tape."""

    __slots__ = ("tape", "value", "index", "param_key")

    def __init__(self, tape: "Tape", value: np.ndarray, index: int, param_key: ParamKey | None = None):
        self.tape = tape
        self.value = value
        self.index = index
        self.param_key = param_key

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __add__(self, other: "Var") -> "Var":
        return add(self, other)

    def __mul__(self, other: "Var | float") -> "Var":
        if isinstance(other, Var):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __matmul__(self, other: "Var") -> "Var":
        return matmul(self, other)

    def __repr__(self) -> str:
        return f"Var(shape={self.value.shape}, index={self.index})"


BackwardFn = Callable[[np.ndarray], Sequence[np.ndarray | None]]


class _Node:
    __slots__ = ("op", "inputs", "backward")

    def __init__(self, op: str, inputs: tuple[int, ...], backward: BackwardFn | None):
        self.op = op
        self.inputs = inputs
        self.backward = backward


class Tape:
    """Ordered record of primitive ops.

    Node ``i`` may only reference nodes with smaller indices, so the record is
    topologically sorted by construction.
    """

    def __init__(self, params: ParamStore | None = None):
        self.params = params
        self.nodes: list[_Node] = []
        self.vars: list[Var] = []
        self._param_vars: dict[ParamKey, Var] = {}
        self.loss: Var | None = None

    def _push(self, op: str, value: np.ndarray, inputs: tuple[Var, ...], backward: BackwardFn | None,
              param_key: ParamKey | None = None) -> Var:
        for v in inputs:
            if v.tape is not self:
                raise TapeUsageError("operands recorded on different tapes")
        var = Var(self, value, len(self.nodes), param_key)
        self.nodes.append(_Node(op, tuple(v.index for v in inputs), backward))
        self.vars.append(var)
        return var

    def param(self, layer: str, name: str) -> Var:
        """Leaf node reading a parameter from the bound store."""
        if self.params is None:
            raise TapeUsageError("tape has no ParamStore bound")
        key = (layer, name)
        var = self._param_vars.get(key)
        if var is None:
            var = self._push("param", self.params[key], (), None, param_key=key)
            self._param_vars[key] = var
        return var

    def constant(self, value: np.ndarray | float) -> Var:
        return self._push("const", np.asarray(value, dtype=DTYPE), (), None)

    def set_loss(self, loss: Var) -> Var:
        if loss.value.size != 1:
            raise ShapeError(f"loss must be scalar, got shape {loss.value.shape}")
        if not np.isfinite(loss.value).all():
            raise NumericError(f"non-finite loss {float(loss.value)}")
        self.loss = loss
        return loss

    def backward(self, loss: Var | None = None) -> ParamStore:
        """Gradients of the scalar loss for every parameter in the bound store.

        Parameters never read on this tape get exact zeros.
        """
        if loss is None:
            loss = self.loss
        if loss is None:
            raise TapeUsageError("backward called before forward recorded a loss")
        if self.params is None:
            raise TapeUsageError("tape has no ParamStore bound")
        grads: dict[int, np.ndarray] = {loss.index: np.ones_like(loss.value)}
        for i in range(loss.index, -1, -1):
            g = grads.pop(i, None)
            if g is None:
                continue
            node = self.nodes[i]
            if node.backward is None:
                grads[i] = g  # leaf: keep for collection below
                continue
            in_grads = node.backward(g)
            for j, gj in zip(node.inputs, in_grads):
                if gj is None:
                    continue
                prev = grads.get(j)
                grads[j] = gj if prev is None else prev + gj
        out = ParamStore()
        for key, value in self.params.items():
            var = self._param_vars.get(key)
            g = None if var is None else grads.get(var.index)
            if g is None:
                g = np.zeros_like(value)
            elif not np.isfinite(g).all():
                raise NumericError(f"non-finite gradient in {key[0]}/{key[1]}")
            else:
                g = g.copy()  # backward closures may hand the same array to several inputs
            out.add(key[0], key[1], g)
        return out


def forward(tape: Tape, fn: Callable[..., Var], *inputs) -> float:
    """Run ``fn(tape, *inputs)`` and record its scalar output as the loss."""
    loss = tape.set_loss(fn(tape, *inputs))
    return float(loss.value)


def backward(tape: Tape) -> ParamStore:
    return tape.backward()


# ---------------------------------------------------------------------------
# Primitives
# ---------------------------------------------------------------------------


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    nlead = g.ndim - len(shape)
    if nlead > 0:
        g = g.sum(axis=tuple(range(nlead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _broadcast_shape(a: np.ndarray, b: np.ndarray, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeError(f"{op}: cannot broadcast {a.shape} with {b.shape}") from exc


def add(a: Var, b: Var) -> Var:
    _broadcast_shape(a.value, b.value, "add")
    sa, sb = a.value.shape, b.value.shape
    return a.tape._push("add", a.value + b.value, (a, b),
                        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def mul(a: Var, b: Var) -> Var:
    _broadcast_shape(a.value, b.value, "mul")
    av, bv = a.value, b.value
    return a.tape._push("mul", av * bv, (a, b),
                        lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def scale(a: Var, c: float) -> Var:
    return a.tape._push("scale", a.value * c, (a,), lambda g: (g * c,))


def matmul(a: Var, b: Var) -> Var:
    """``a @ b``; ``b`` may be a 2-D weight shared across ``a``'s leading dims."""
    av, bv = a.value, b.value
    if av.ndim < 2 or bv.ndim < 2 or av.shape[-1] != bv.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {av.shape} @ {bv.shape}")
    out = av @ bv
    if bv.ndim == 2:
        k, n = bv.shape

        def bw(g):
            ga = g @ bv.T
            gb = av.reshape(-1, k).T @ g.reshape(-1, n)
            return ga, gb
    else:
        def bw(g):
            ga = _unbroadcast(g @ np.swapaxes(bv, -1, -2), av.shape)
            gb = _unbroadcast(np.swapaxes(av, -1, -2) @ g, bv.shape)
            return ga, gb
    return a.tape._push("matmul", out, (a, b), bw)


def reshape(a: Var, shape: tuple[int, ...]) -> Var:
    src = a.value.shape
    try:
        out = a.value.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: {src} -> {shape}") from exc
    return a.tape._push("reshape", out, (a,), lambda g: (g.reshape(src),))


def transpose(a: Var, axes: tuple[int, ...]) -> Var:
    inv = tuple(np.argsort(axes))
    return a.tape._push("transpose", np.ascontiguousarray(a.value.transpose(axes)), (a,),
                        lambda g: (g.transpose(inv),))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Var) -> Var:
    """tanh-approximated GELU (smooth, so finite differences stay clean)."""
    x = a.value
    x2 = x * x
    inner = _GELU_C * x * (1.0 + 0.044715 * x2)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return a.tape._push("gelu", out, (a,), bw)


def tanh(a: Var) -> Var:
    out = np.tanh(a.value)
    return a.tape._push("tanh", out, (a,), lambda g: (g * (1.0 - out * out),))


def embedding(table: Var, ids: np.ndarray) -> Var:
    """Row gather ``table[ids]``."""
    ids = np.asarray(ids)
    tv = table.value
    if ids.size and (ids.min() < 0 or ids.max() >= tv.shape[0]):
        raise ShapeError(f"embedding: ids out of range [0, {tv.shape[0]})")
    flat = ids.ravel()

    def bw(g):
        gt = np.zeros_like(tv)
        np.add.at(gt, flat, g.reshape(flat.size, -1))
        return (gt,)

    return table.tape._push("embedding", tv[ids], (table,), bw)


def layer_norm(x: Var, gain: Var, bias: Var, eps: float = 1e-6) -> Var:
    xv = x.value
    d = xv.shape[-1]
    if gain.value.shape != (d,) or bias.value.shape != (d,):
        raise ShapeError(f"layer_norm: gain/bias must have shape ({d},)")
    mu = xv.mean(axis=-1, keepdims=True)
    xc = xv - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    gv = gain.value

    def bw(g):
        gg = _unbroadcast(g * xhat, (d,))
        gb = _unbroadcast(g, (d,))
        gx_hat = g * gv
        gx = rstd * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                     - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        return gx, gg, gb

    return x.tape._push("layer_norm", xhat * gv + bias.value, (x, gain, bias), bw)


def masked_softmax(a: Var, mask: np.ndarray | None = None) -> Var:
    """Softmax over the last axis; ``mask`` False entries get probability 0."""
    s = a.value
    if mask is not None:
        s = np.where(mask, s, -np.inf)
    m = s.max(axis=-1, keepdims=True)
    e = np.exp(s - m)
    y = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return a.tape._push("softmax", y, (a,), bw)


def softmax_cross_entropy(logits: Var, targets: np.ndarray, weights: np.ndarray) -> Var:
    """``sum_t weights[t] * -log softmax(logits[t])[targets[t]]``.

    ``weights`` has the shape of ``targets``; it carries masking and whatever
    averaging the caller wants (token mean, per-sample mean, ...).
    """
    lv = logits.value
    targets = np.asarray(targets)
    if lv.shape[:-1] != targets.shape or weights.shape != targets.shape:
        raise ShapeError(
            f"cross-entropy: logits {lv.shape}, targets {targets.shape}, weights {weights.shape}"
        )
    vocab = lv.shape[-1]
    if targets.size and (targets.min() < 0 or targets.max() >= vocab):
        raise ShapeError(f"cross-entropy: target ids out of range [0, {vocab})")
    m = lv.max(axis=-1, keepdims=True)
    z = lv - m
    lse = np.log(np.exp(z).sum(axis=-1))
    picked = np.take_along_axis(z, targets[..., None], axis=-1)[..., 0]
    nll = lse - picked
    loss = np.array(float((weights * nll).sum()))

    def bw(g):
        p = np.exp(z - lse[..., None])
        np.put_along_axis(p, targets[..., None],
                          np.take_along_axis(p, targets[..., None], axis=-1) - 1.0, axis=-1)
        return (p * (weights * float(g))[..., None],)

    return logits.tape._push("softmax_xent", loss, (logits,), bw)


def dot_self(a: Var) -> Var:
    """``sum(a * a)`` as a scalar."""
    av = a.value
    return a.tape._push("dot_self", np.array(float(np.dot(av.ravel(), av.ravel()))), (a,),
                        lambda g: (2.0 * float(g) * av,))


def sum_all(a: Var) -> Var:
    shape = a.value.shape
    return a.tape._push("sum", np.array(float(a.value.sum())), (a,),
                        lambda g: (np.full(shape, float(g)),))
