"""Dense float32 tensors with reverse-mode autodiff on a recorded graph.

Only the operations needed by the quantization pipeline are implemented.
Broadcasting is deliberately restricted to three cases: equal shapes, a
(1, C) row vector against a (T, C) matrix, and a (T, 1) column vector
against a (T, C) matrix.  Python scalars are accepted anywhere.

Rounding uses half-away-from-zero ties everywhere (see round_half_away);
round_ste passes gradients through unchanged, clamp passes them only
inside the clamp interval.
"""

from __future__ import annotations

import numpy as np

from .errors import DegenerateScaleError, DimensionError, KvqError, NumericError

EPS_DIV = 1e-12


def round_half_away(x: np.ndarray) -> np.ndarray:
    """Round to nearest integer, ties away from zero (deterministic across platforms)."""
    return np.copysign(np.floor(np.abs(x) + 0.5), x).astype(np.float32)


def _as_array(x) -> np.ndarray:
    a = np.asarray(x, dtype=np.float32)
    # note: np.ascontiguousarray would promote 0-d scalars to shape (1,)
    if a.ndim and not a.flags["C_CONTIGUOUS"]:
        a = np.ascontiguousarray(a)
    return a


def _check_broadcast(sa: tuple, sb: tuple) -> None:
    if sa == sb or sa == () or sb == ():
        return
    if len(sa) == 2 and len(sb) == 2:
        if sb == (1, sa[1]) or sb == (sa[0], 1):
            return
        if sa == (1, sb[1]) or sa == (sb[0], 1):
            return
    if len(sa) == 1 and len(sb) == 1 and (sa[0] == 1 or sb[0] == 1):
        return
    raise DimensionError(f"incompatible shapes for elementwise op: {sa} vs {sb}")


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum grad down to `shape` (inverse of the restricted broadcast)."""
    if grad.shape == shape:
        return grad
    if shape == ():
        return grad.sum()
    g = grad
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


class Tensor:
    """A float32 array plus an optional autodiff record."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_array(data)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple = ()
        self._backward = None

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def _from_op(data: np.ndarray, parents, backward) -> "Tensor":
        out = Tensor(data)
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        return out

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- elementwise arithmetic -----------------------------------------------

    def _coerce(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return other
        return Tensor(other)

    def __add__(self, other):
        b = self._coerce(other)
        _check_broadcast(self.shape, b.shape)
        out_data = self.data + b.data

        def backward(g, a=self, b=b):
            if a.requires_grad:
                a._accum(_unbroadcast(g, a.shape))
            if b.requires_grad:
                b._accum(_unbroadcast(g, b.shape))

        return Tensor._from_op(out_data, (self, b), backward)

    __radd__ = __add__

    def __sub__(self, other):
        b = self._coerce(other)
        _check_broadcast(self.shape, b.shape)
        out_data = self.data - b.data

        def backward(g, a=self, b=b):
            if a.requires_grad:
                a._accum(_unbroadcast(g, a.shape))
            if b.requires_grad:
                b._accum(_unbroadcast(-g, b.shape))

        return Tensor._from_op(out_data, (self, b), backward)

    def __rsub__(self, other):
        return self._coerce(other) - self

    def __mul__(self, other):
        b = self._coerce(other)
        _check_broadcast(self.shape, b.shape)
        out_data = self.data * b.data

        def backward(g, a=self, b=b):
            if a.requires_grad:
                a._accum(_unbroadcast(g * b.data, a.shape))
            if b.requires_grad:
                b._accum(_unbroadcast(g * a.data, b.shape))

        return Tensor._from_op(out_data, (self, b), backward)

    __rmul__ = __mul__

    def __truediv__(self, other):
        b = self._coerce(other)
        _check_broadcast(self.shape, b.shape)
        if np.min(np.abs(b.data)) < EPS_DIV:
            raise DegenerateScaleError(
                f"division by near-zero value (|divisor| < {EPS_DIV})"
            )
        out_data = self.data / b.data

        def backward(g, a=self, b=b):
            if a.requires_grad:
                a._accum(_unbroadcast(g / b.data, a.shape))
            if b.requires_grad:
                b._accum(_unbroadcast(-g * a.data / (b.data * b.data), b.shape))

        return Tensor._from_op(out_data, (self, b), backward)

    def __rtruediv__(self, other):
        return self._coerce(other) / self

    def __neg__(self):
        def backward(g, a=self):
            if a.requires_grad:
                a._accum(-g)

        return Tensor._from_op(-self.data, (self,), backward)

    def abs(self):
        out_data = np.abs(self.data)

        def backward(g, a=self):
            if a.requires_grad:
                a._accum(g * np.sign(a.data))

        return Tensor._from_op(out_data, (self,), backward)

    def exp(self):
        out_data = np.exp(self.data)

        def backward(g, a=self, od=None):
            if a.requires_grad:
                a._accum(g * np.exp(a.data))

        return Tensor._from_op(out_data, (self,), backward)

    def log(self):
        out_data = np.log(self.data)

        def backward(g, a=self):
            if a.requires_grad:
                a._accum(g / a.data)

        return Tensor._from_op(out_data, (self,), backward)

    def sqrt(self):
        out_data = np.sqrt(self.data)

        def backward(g, a=self):
            if a.requires_grad:
                a._accum(g * 0.5 / np.sqrt(a.data))

        return Tensor._from_op(out_data, (self,), backward)

    def silu(self):
        s = 1.0 / (1.0 + np.exp(-self.data))
        out_data = self.data * s

        def backward(g, a=self, s=s):
            if a.requires_grad:
                a._accum(g * (s * (1.0 + a.data * (1.0 - s))))

        return Tensor._from_op(out_data, (self,), backward)

    def clamp(self, lo: float, hi: float):
        """Clamp to [lo, hi]; gradient passes only where the input lies inside."""
        out_data = np.clip(self.data, lo, hi)

        def backward(g, a=self, lo=lo, hi=hi):
            if a.requires_grad:
                inside = (a.data >= lo) & (a.data <= hi)
                a._accum(g * inside)

        return Tensor._from_op(out_data, (self,), backward)

    def round_ste(self):
        """Half-away-from-zero rounding; straight-through gradient."""
        out_data = round_half_away(self.data)

        def backward(g, a=self):
            if a.requires_grad:
                a._accum(g)

        return Tensor._from_op(out_data, (self,), backward)

    def maximum(self, other):
        b = self._coerce(other)
        _check_broadcast(self.shape, b.shape)
        out_data = np.maximum(self.data, b.data)

        def backward(g, a=self, b=b):
            take_a = a.data >= b.data
            if a.requires_grad:
                a._accum(_unbroadcast(g * take_a, a.shape))
            if b.requires_grad:
                b._accum(_unbroadcast(g * ~take_a, b.shape))

        return Tensor._from_op(out_data, (self, b), backward)

    # -- reductions -----------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False):
        out_data = self.data.sum(axis=axis, keepdims=keepdims)

        def backward(g, a=self, axis=axis, keepdims=keepdims):
            if a.requires_grad:
                g = np.asarray(g)
                if axis is not None and not keepdims:
                    g = np.expand_dims(g, axis)
                a._accum(np.broadcast_to(g, a.shape).astype(np.float32))

        return Tensor._from_op(out_data, (self,), backward)

    def mean(self, axis=None, keepdims: bool = False):
        out_data = self.data.mean(axis=axis, keepdims=keepdims)
        if axis is None:
            count = self.data.size
        else:
            count = self.data.shape[axis]

        def backward(g, a=self, axis=axis, keepdims=keepdims, count=count):
            if a.requires_grad:
                g = np.asarray(g)
                if axis is not None and not keepdims:
                    g = np.expand_dims(g, axis)
                a._accum((np.broadcast_to(g, a.shape) / count).astype(np.float32))

        return Tensor._from_op(out_data, (self,), backward)

    def max(self, axis=None, keepdims: bool = False):
        """Max reduction; subgradient routed to the first attaining element."""
        out_data = self.data.max(axis=axis, keepdims=keepdims)

        def backward(g, a=self, axis=axis, keepdims=keepdims):
            if not a.requires_grad:
                return
            g = np.asarray(g)
            full = self.data.max(axis=axis, keepdims=True)
            hit = a.data == full
            # route to the first max along the reduced axis
            if axis is None:
                flat = hit.ravel()
                first = np.zeros_like(flat)
                first[np.argmax(flat)] = 1.0
                mask = first.reshape(a.shape)
                a._accum((mask * g).astype(np.float32))
            else:
                idx = np.argmax(hit, axis=axis)
                mask = np.zeros_like(a.data)
                np.put_along_axis(mask, np.expand_dims(idx, axis), 1.0, axis=axis)
                if not keepdims:
                    g = np.expand_dims(g, axis)
                a._accum((mask * g).astype(np.float32))

        return Tensor._from_op(out_data, (self,), backward)

    def min(self, axis=None, keepdims: bool = False):
        return -((-self).max(axis=axis, keepdims=keepdims))

    # -- linear algebra / structure -------------------------------------------

    def matmul(self, other: "Tensor"):
        b = self._coerce(other)
        if self.ndim != 2 or b.ndim != 2 or self.shape[1] != b.shape[0]:
            raise DimensionError(
                f"matmul shape mismatch: {self.shape} x {b.shape}"
            )
        out_data = self.data @ b.data

        def backward(g, a=self, b=b):
            if a.requires_grad:
                a._accum(g @ b.data.T)
            if b.requires_grad:
                b._accum(a.data.T @ g)

        return Tensor._from_op(out_data, (self, b), backward)

    __matmul__ = matmul

    def transpose(self):
        def backward(g, a=self):
            if a.requires_grad:
                a._accum(g.T)

        return Tensor._from_op(self.data.T.copy(), (self,), backward)

    def slice_cols(self, start: int, stop: int):
        out_data = self.data[:, start:stop].copy()

        def backward(g, a=self, start=start, stop=stop):
            if a.requires_grad:
                full = np.zeros_like(a.data)
                full[:, start:stop] = g
                a._accum(full)

        return Tensor._from_op(out_data, (self,), backward)

    def slice_rows(self, start: int, stop: int):
        out_data = self.data[start:stop, :].copy()

        def backward(g, a=self, start=start, stop=stop):
            if a.requires_grad:
                full = np.zeros_like(a.data)
                full[start:stop, :] = g
                a._accum(full)

        return Tensor._from_op(out_data, (self,), backward)

    def reshape(self, *shape):
        out_data = self.data.reshape(*shape)

        def backward(g, a=self):
            if a.requires_grad:
                a._accum(g.reshape(a.shape))

        return Tensor._from_op(out_data, (self,), backward)

    # -- autodiff driver ------------------------------------------------------

    def _accum(self, g: np.ndarray) -> None:
        g = np.asarray(g, dtype=np.float32)
        if self.grad is None:
            self.grad = g.copy().reshape(self.shape)
        else:
            self.grad = self.grad + g.reshape(self.shape)

    def backward(self) -> None:
        """Reverse sweep from a scalar loss; clears the recorded graph."""
        if self.shape != ():
            raise KvqError(f"backward() requires a scalar loss, got shape {self.shape}")
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.asarray(1.0, dtype=np.float32)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
        # release the graph so a tape is never reused
        for node in order:
            node._parents = ()
            node._backward = None


# -- transformer primitives ---------------------------------------------------


def _check_finite(name: str, x: np.ndarray) -> None:
    if not np.all(np.isfinite(x)):
        raise NumericError(f"{name}: non-finite input")


def concat_cols(parts: list[Tensor]) -> Tensor:
    out_data = np.concatenate([p.data for p in parts], axis=1)
    widths = [p.shape[1] for p in parts]

    def backward(g, parts=parts, widths=widths):
        off = 0
        for p, w in zip(parts, widths):
            if p.requires_grad:
                p._accum(g[:, off : off + w])
            off += w

    return Tensor._from_op(out_data, tuple(parts), backward)


def concat_rows(parts: list[Tensor]) -> Tensor:
    out_data = np.concatenate([p.data for p in parts], axis=0)
    heights = [p.shape[0] for p in parts]

    def backward(g, parts=parts, heights=heights):
        off = 0
        for p, h in zip(parts, heights):
            if p.requires_grad:
                p._accum(g[off : off + h, :])
            off += h

    return Tensor._from_op(out_data, tuple(parts), backward)


def softmax_causal(scores: Tensor, offset: int = 0) -> Tensor:
    """Row-wise softmax over the last axis with a causal mask.

    Query row i (absolute position offset + i) may attend key columns
    j <= offset + i; masked entries are exactly zero in the output.
    """
    _check_finite("softmax_causal", scores.data)
    t, s = scores.shape
    cols = np.arange(s)[None, :]
    rows = np.arange(t)[:, None] + offset
    mask = cols <= rows
    masked = np.where(mask, scores.data, -np.inf)
    m = masked.max(axis=1, keepdims=True)
    e = np.exp(masked - m)
    e = np.where(mask, e, 0.0)
    out_data = (e / e.sum(axis=1, keepdims=True)).astype(np.float32)

    def backward(g, a=scores, p=out_data):
        if a.requires_grad:
            dot = (g * p).sum(axis=1, keepdims=True)
            a._accum(p * (g - dot))

    return Tensor._from_op(out_data, (scores,), backward)


def rms_norm(x: Tensor, gain: Tensor, eps: float = 1e-6) -> Tensor:
    """RMS normalization over the channel axis with a learnable gain row."""
    _check_finite("rms_norm", x.data)
    ms = (x * x).mean(axis=1, keepdims=True)
    inv = (ms + Tensor(np.full((x.shape[0], 1), eps, dtype=np.float32))).sqrt()
    return (x / inv) * gain


def rope(x: Tensor, positions: np.ndarray, base: float = 10000.0) -> Tensor:
    """Rotary position embedding on a (T, head_dim) tensor (rotate-half layout)."""
    _check_finite("rope", x.data)
    t, d = x.shape
    if d % 2 != 0:
        raise DimensionError(f"rope requires an even head_dim, got {d}")
    half = d // 2
    inv_freq = base ** (-np.arange(half, dtype=np.float64) * 2.0 / d)
    ang = np.asarray(positions, dtype=np.float64)[:, None] * inv_freq[None, :]
    cos = np.cos(ang).astype(np.float32)
    sin = np.sin(ang).astype(np.float32)
    x1 = x.data[:, :half]
    x2 = x.data[:, half:]
    out_data = np.concatenate([x1 * cos - x2 * sin, x1 * sin + x2 * cos], axis=1)

    def backward(g, a=x, cos=cos, sin=sin, half=half):
        if a.requires_grad:
            g1 = g[:, :half]
            g2 = g[:, half:]
            a._accum(
                np.concatenate([g1 * cos + g2 * sin, -g1 * sin + g2 * cos], axis=1)
            )

    return Tensor._from_op(out_data, (x,), backward)


def rope_array(x: np.ndarray, positions: np.ndarray, base: float = 10000.0) -> np.ndarray:
    """rope() on a plain array (used on dequantized cache reads)."""
    return rope(Tensor(x), positions, base).data


def cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer targets under row-wise softmax."""
    _check_finite("cross_entropy", logits.data)
    t = logits.shape[0]
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)
    nll = -np.log(np.maximum(p[np.arange(t), targets], 1e-30))
    out_data = np.asarray(nll.mean(), dtype=np.float32)

    def backward(g, a=logits, p=p, targets=targets, t=t):
        if a.requires_grad:
            d = p.copy()
            d[np.arange(t), targets] -= 1.0
            a._accum(g * d / t)

    return Tensor._from_op(out_data, (logits,), backward)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row gather from an embedding table; backward scatter-adds."""
    ids = np.asarray(ids, dtype=np.int64)
    out_data = table.data[ids]

    def backward(g, a=table, ids=ids):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            np.add.at(full, ids, g)
            a._accum(full)

    return Tensor._from_op(out_data, (table,), backward)
