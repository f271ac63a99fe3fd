"""Dense float64 tensors with tape-based reverse-mode differentiation.

Design constraints:

- float64 only; the verification story rests on tight finite-difference
  tolerances that float32 cannot meet.
- Define-by-run: ops executed while a ``Tape`` is active are recorded in
  forward order (which is already a topological order); ``backward`` replays
  the tape once, in reverse, and then the tape is spent.
- No tape active means inference mode: nothing is recorded and no tensor
  created inside requires grad.
- Every op checks its output for NaN/Inf (cheap sum-based probe) and raises
  ``NonFiniteError`` on the first bad value.

The op set is exactly what a tiny encoder-decoder transformer with bottleneck
adapters needs; there is deliberately no broadcasting cleverness beyond bias
adds and mask products.
"""

from __future__ import annotations

from typing import Callable, Iterable, Optional, Sequence

import numpy as np


class NonFiniteError(FloatingPointError):
    """A forward result contained NaN or Inf."""


# Finite checking is on by default; the probe is a reduction, so a non-finite
# anywhere surfaces as a non-finite sum (sums of finite fp64 cannot overflow
# at this library's scales).
CHECK_FINITE = True


def _assert_finite(data: np.ndarray, op: str) -> None:
    if CHECK_FINITE:
        with np.errstate(over="ignore", invalid="ignore"):
            total = np.sum(data)
        if not np.isfinite(total):
            raise NonFiniteError(f"non-finite values in output of {op}")


_TAPE_STACK: list["Tape"] = []


class Tape:
    """Ordered record of one forward pass.

    Entries are ``(output tensor, backward closure)`` pairs appended in
    execution order. ``backward`` may run exactly once per tape.
    """

    __slots__ = ("_entries", "consumed")

    def __init__(self):
        self._entries: list[tuple[Tensor, Callable[[np.ndarray], None]]] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPE_STACK.pop()

    def __len__(self) -> int:
        return len(self._entries)


def _active_tape() -> Optional[Tape]:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


class Tensor:
    """Shape-carrying float64 array plus an optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad", "_tape", "_grad_owned")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        _assert_finite(arr, "tensor construction")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._tape: Optional[Tape] = None
        self._grad_owned = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def _accumulate(self, g: np.ndarray) -> None:
        # First contribution is held by reference (closures hand over fresh
        # arrays); a second contribution allocates, so shared buffers are
        # never mutated in place.
        if self.grad is None:
            self.grad = g if g.shape == self.data.shape else \
                np.broadcast_to(g, self.data.shape).copy()
            self._grad_owned = False
        elif self._grad_owned:
            self.grad += g
        else:
            self.grad = self.grad + g
            self._grad_owned = True

    def backward(self) -> None:
        backward(self)

    # operator sugar
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def relu(self):
        return relu(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes=None):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(out: Tensor, inputs: Sequence[Tensor],
            bwd: Callable[[np.ndarray], None]) -> Tensor:
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._tape = tape
        tape._entries.append((out, bwd))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum g down to `shape` (inverse of numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, dim in enumerate(shape):
        if dim == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data + b.data)
    _assert_finite(out.data, "add")

    def bwd(g: np.ndarray) -> None:
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.data.shape))

    return _record(out, (a, b), bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data - b.data)
    _assert_finite(out.data, "sub")

    def bwd(g: np.ndarray) -> None:
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.data.shape))

    return _record(out, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product with numpy broadcasting."""
    out = Tensor(a.data * b.data)
    _assert_finite(out.data, "mul")

    def bwd(g: np.ndarray) -> None:
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.data.shape))

    return _record(out, (a, b), bwd)


def scale(a: Tensor, c: float) -> Tensor:
    out = Tensor(a.data * c)
    _assert_finite(out.data, "scale")

    def bwd(g: np.ndarray) -> None:
        a._accumulate(g * c)

    return _record(out, (a,), bwd)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product.

    Supported shapes: (m,k)@(k,n), batched (...,m,k)@(...,k,n) with equal
    leading dims, and (...,m,k)@(k,n). Anything else is a shape error, as is
    an inner-dimension mismatch.
    """
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise ValueError(f"matmul needs >=2-d operands, got {ad.shape} @ {bd.shape}")
    if ad.shape[-1] != bd.shape[-2]:
        raise ValueError(f"matmul inner dims disagree: {ad.shape} @ {bd.shape}")
    if bd.ndim != 2 and ad.shape[:-2] != bd.shape[:-2]:
        raise ValueError(f"matmul batch dims disagree: {ad.shape} @ {bd.shape}")
    out = Tensor(np.matmul(ad, bd))
    _assert_finite(out.data, "matmul")

    def bwd(g: np.ndarray) -> None:
        if a.requires_grad:
            a._accumulate(np.matmul(g, bd.swapaxes(-1, -2)))
        if b.requires_grad:
            if bd.ndim == 2 and ad.ndim > 2:
                k, n = bd.shape
                gb = np.matmul(ad.reshape(-1, k).T, g.reshape(-1, n))
            else:
                gb = np.matmul(ad.swapaxes(-1, -2), g)
            b._accumulate(gb)

    return _record(out, (a, b), bwd)


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.data.ndim)))
    axes = tuple(axes)
    out = Tensor(np.transpose(a.data, axes))

    inv = np.argsort(axes)

    def bwd(g: np.ndarray) -> None:
        a._accumulate(np.transpose(g, inv))

    return _record(out, (a,), bwd)


def swap_axes(a: Tensor, ax1: int, ax2: int) -> Tensor:
    axes = list(range(a.data.ndim))
    axes[ax1], axes[ax2] = axes[ax2], axes[ax1]
    return transpose(a, axes)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.data.shape
    out = Tensor(a.data.reshape(shape))

    def bwd(g: np.ndarray) -> None:
        a._accumulate(g.reshape(old))

    return _record(out, (a,), bwd)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ValueError("concat of empty list")
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g: np.ndarray) -> None:
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                t._accumulate(g[tuple(idx)])

    return _record(out, tensors, bwd)


def relu(a: Tensor) -> Tensor:
    out = Tensor(np.maximum(a.data, 0.0))
    mask = a.data > 0.0

    def bwd(g: np.ndarray) -> None:
        a._accumulate(g * mask)

    return _record(out, (a,), bwd)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = Tensor(np.sum(a.data, axis=axis, keepdims=keepdims))
    _assert_finite(out.data, "sum")
    in_shape = a.data.shape

    def bwd(g: np.ndarray) -> None:
        gg = g
        if axis is not None and not keepdims:
            gg = np.expand_dims(gg, axis)
        a._accumulate(np.broadcast_to(gg, in_shape).copy() if np.ndim(gg) else
                      np.full(in_shape, float(gg)))

    return _record(out, (a,), bwd)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else a.data.shape[axis]
    return scale(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Stable softmax along `axis` (max-subtraction before exp)."""
    if not -a.data.ndim <= axis < a.data.ndim:
        raise ValueError(f"softmax axis {axis} invalid for shape {a.data.shape}")
    shifted = a.data - np.max(a.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / np.sum(e, axis=axis, keepdims=True)
    out = Tensor(s)
    _assert_finite(out.data, "softmax")

    def bwd(g: np.ndarray) -> None:
        dot = np.sum(g * s, axis=axis, keepdims=True)
        a._accumulate((g - dot) * s)

    return _record(out, (a,), bwd)


def layernorm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    d = x.data.shape[-1]
    if gain.data.shape != (d,) or bias.data.shape != (d,):
        raise ValueError("layernorm gain/bias must match the normalized axis")
    mu = np.mean(x.data, axis=-1, keepdims=True)
    var = np.mean((x.data - mu) ** 2, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = Tensor(xhat * gain.data + bias.data)
    _assert_finite(out.data, "layernorm")

    def bwd(g: np.ndarray) -> None:
        if gain.requires_grad:
            gain._accumulate(np.sum(g * xhat, axis=tuple(range(g.ndim - 1))))
        if bias.requires_grad:
            bias._accumulate(np.sum(g, axis=tuple(range(g.ndim - 1))))
        if x.requires_grad:
            gx = g * gain.data
            m1 = np.mean(gx, axis=-1, keepdims=True)
            m2 = np.mean(gx * xhat, axis=-1, keepdims=True)
            x._accumulate((gx - m1 - xhat * m2) * inv)

    return _record(out, (x, gain, bias), bwd)


def cross_entropy(logits: Tensor, targets: np.ndarray,
                  ignore_index: int = -100) -> Tensor:
    """Mean negative log-likelihood over positions not equal to ignore_index.

    `logits` is (n, V); `targets` is an int vector of length n with entries
    in [0, V) or ignore_index.
    """
    if logits.data.ndim != 2:
        raise ValueError("cross_entropy expects 2-d logits")
    targets = np.asarray(targets)
    n, v = logits.data.shape
    if targets.shape != (n,):
        raise ValueError("targets length must match logits rows")
    valid = targets != ignore_index
    n_valid = int(np.count_nonzero(valid))
    if n_valid == 0:
        raise ValueError("cross_entropy: all positions ignored")
    tv = targets[valid]
    if tv.min() < 0 or tv.max() >= v:
        raise ValueError("target index out of range")

    m = np.max(logits.data, axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.sum(np.exp(logits.data - m), axis=1))
    nll = lse[valid] - logits.data[valid, tv]
    out = Tensor(np.sum(nll) / n_valid)
    _assert_finite(out.data, "cross_entropy")

    def bwd(g: np.ndarray) -> None:
        p = np.exp(logits.data - lse[:, None])
        p[~valid] = 0.0
        rows = np.nonzero(valid)[0]
        p[rows, tv] -= 1.0
        logits._accumulate(p * (float(g) / n_valid))

    return _record(out, (logits,), bwd)


def mse(a: Tensor, b: Tensor) -> Tensor:
    """Mean of squared elementwise differences; shapes must match exactly."""
    if a.data.shape != b.data.shape:
        raise ValueError(f"mse shape mismatch: {a.data.shape} vs {b.data.shape}")
    diff = a.data - b.data
    out = Tensor(np.mean(diff * diff))
    _assert_finite(out.data, "mse")
    n = a.data.size

    def bwd(g: np.ndarray) -> None:
        coeff = 2.0 * float(g) / n
        if a.requires_grad:
            a._accumulate(coeff * diff)
        if b.requires_grad:
            b._accumulate(-coeff * diff)

    return _record(out, (a, b), bwd)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row gather: out[..., :] = table[ids[...], :]."""
    ids = np.asarray(ids)
    v = table.data.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= v):
        raise ValueError("vocabulary index out of range")
    out = Tensor(table.data[ids])

    def bwd(g: np.ndarray) -> None:
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.data.shape[1]))
        table._accumulate(gt)

    return _record(out, (table,), bwd)


def dropout(a: Tensor, rate: float, rng) -> Tensor:
    """Inverted dropout; identity when rate == 0."""
    if not 0.0 <= rate < 1.0:
        raise ValueError("dropout rate must be in [0, 1)")
    if rate == 0.0:
        return a
    keep = (rng.uniform(a.data.shape) >= rate) / (1.0 - rate)
    out = Tensor(a.data * keep)

    def bwd(g: np.ndarray) -> None:
        a._accumulate(g * keep)

    return _record(out, (a,), bwd)


# ---------------------------------------------------------------------------
# fused primitives
#
# The transformer runs thousands of op applications per step; fusing the hot
# compositions keeps the tape short. Every fused backward here is covered by
# the finite-difference suite and checked against the composed ops.
# ---------------------------------------------------------------------------

def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """y = x @ w + b over the last axis; x may have any leading shape."""
    din, dout = w.data.shape
    if x.data.shape[-1] != din:
        raise ValueError(f"linear expects last dim {din}, got {x.data.shape}")
    lead = x.data.shape[:-1]
    xf = x.data.reshape(-1, din)
    out = Tensor((xf @ w.data + b.data).reshape(lead + (dout,)))
    _assert_finite(out.data, "linear")

    def bwd(g: np.ndarray) -> None:
        gf = g.reshape(-1, dout)
        if x.requires_grad:
            x._accumulate((gf @ w.data.T).reshape(x.data.shape))
        if w.requires_grad:
            w._accumulate(xf.T @ gf)
        if b.requires_grad:
            b._accumulate(gf.sum(axis=0))

    return _record(out, (x, w, b), bwd)


def ffn_relu(x: Tensor, w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor) -> Tensor:
    """Two-layer MLP with relu: (relu(x@w1+b1))@w2 + b2."""
    din = w1.data.shape[0]
    dout = w2.data.shape[1]
    lead = x.data.shape[:-1]
    xf = x.data.reshape(-1, din)
    h = np.maximum(xf @ w1.data + b1.data, 0.0)
    out = Tensor((h @ w2.data + b2.data).reshape(lead + (dout,)))
    _assert_finite(out.data, "ffn_relu")

    def bwd(g: np.ndarray) -> None:
        gf = g.reshape(-1, dout)
        gh = (gf @ w2.data.T) * (h > 0.0)
        if w2.requires_grad:
            w2._accumulate(h.T @ gf)
        if b2.requires_grad:
            b2._accumulate(gf.sum(axis=0))
        if w1.requires_grad:
            w1._accumulate(xf.T @ gh)
        if b1.requires_grad:
            b1._accumulate(gh.sum(axis=0))
        if x.requires_grad:
            x._accumulate((gh @ w1.data.T).reshape(x.data.shape))

    return _record(out, (x, w1, b1, w2, b2), bwd)


def multihead_attention(xq: Tensor, xkv: Tensor,
                        wq: Tensor, bq: Tensor, wk: Tensor, bk: Tensor,
                        wv: Tensor, bv: Tensor, wo: Tensor, bo: Tensor,
                        n_heads: int, bias: Optional[np.ndarray] = None) -> Tensor:
    """Scaled dot-product multi-head attention with an additive score bias.

    xq is (B, Sq, d), xkv is (B, Sk, d); bias broadcasts to (B, h, Sq, Sk).
    """
    bsz, sq, d = xq.data.shape
    sk = xkv.data.shape[1]
    if d % n_heads != 0:
        raise ValueError("model width not divisible by head count")
    dh = d // n_heads
    scale_f = 1.0 / np.sqrt(dh)

    def heads(y: np.ndarray, s: int) -> np.ndarray:
        return y.reshape(bsz, s, n_heads, dh).transpose(0, 2, 1, 3)

    xqf = xq.data.reshape(-1, d)
    xkf = xkv.data.reshape(-1, d)
    q = heads(xqf @ wq.data + bq.data, sq)
    k = heads(xkf @ wk.data + bk.data, sk)
    v = heads(xkf @ wv.data + bv.data, sk)
    scores = np.matmul(q, k.swapaxes(-1, -2)) * scale_f
    if bias is not None:
        scores = scores + bias
    scores -= scores.max(axis=-1, keepdims=True)
    e = np.exp(scores)
    attn = e / e.sum(axis=-1, keepdims=True)
    ctx = np.matmul(attn, v)                                   # (B,h,Sq,dh)
    cf = ctx.transpose(0, 2, 1, 3).reshape(-1, d)              # (B*Sq, d)
    out = Tensor((cf @ wo.data + bo.data).reshape(bsz, sq, d))
    _assert_finite(out.data, "multihead_attention")

    def bwd(g: np.ndarray) -> None:
        gf = g.reshape(-1, d)
        if wo.requires_grad:
            wo._accumulate(cf.T @ gf)
        if bo.requires_grad:
            bo._accumulate(gf.sum(axis=0))
        gctx = heads(gf @ wo.data.T, sq)
        gattn = np.matmul(gctx, v.swapaxes(-1, -2))
        gv4 = np.matmul(attn.swapaxes(-1, -2), gctx)
        gscores = (gattn - np.sum(gattn * attn, axis=-1, keepdims=True)) * attn
        gq4 = np.matmul(gscores, k) * scale_f
        gk4 = np.matmul(gscores.swapaxes(-1, -2), q) * scale_f

        def merge(y4: np.ndarray, s: int) -> np.ndarray:
            return y4.transpose(0, 2, 1, 3).reshape(-1, d)

        gqf, gkf, gvf = merge(gq4, sq), merge(gk4, sk), merge(gv4, sk)
        if wq.requires_grad:
            wq._accumulate(xqf.T @ gqf)
        if bq.requires_grad:
            bq._accumulate(gqf.sum(axis=0))
        if wk.requires_grad:
            wk._accumulate(xkf.T @ gkf)
        if bk.requires_grad:
            bk._accumulate(gkf.sum(axis=0))
        if wv.requires_grad:
            wv._accumulate(xkf.T @ gvf)
        if bv.requires_grad:
            bv._accumulate(gvf.sum(axis=0))
        if xq.requires_grad:
            xq._accumulate((gqf @ wq.data.T).reshape(xq.data.shape))
        if xkv.requires_grad:
            gx = gkf @ wk.data.T + gvf @ wv.data.T
            xkv._accumulate(gx.reshape(xkv.data.shape))

    return _record(out, (xq, xkv, wq, bq, wk, bk, wv, bv, wo, bo), bwd)


def bottleneck_residual(x: Tensor, down_w: Tensor, down_b: Tensor,
                        up_w: Tensor, up_b: Tensor) -> Tensor:
    """x + relu(x@down_w + down_b)@up_w + up_b (the adapter block)."""
    d, r = down_w.data.shape
    if x.data.shape[-1] != d:
        raise ValueError(f"bottleneck expects last dim {d}, got {x.data.shape}")
    xf = x.data.reshape(-1, d)
    h = np.maximum(xf @ down_w.data + down_b.data, 0.0)
    out = Tensor(x.data + (h @ up_w.data + up_b.data).reshape(x.data.shape))
    _assert_finite(out.data, "bottleneck_residual")

    def bwd(g: np.ndarray) -> None:
        gf = g.reshape(-1, d)
        gh = (gf @ up_w.data.T) * (h > 0.0)
        if up_w.requires_grad:
            up_w._accumulate(h.T @ gf)
        if up_b.requires_grad:
            up_b._accumulate(gf.sum(axis=0))
        if down_w.requires_grad:
            down_w._accumulate(xf.T @ gh)
        if down_b.requires_grad:
            down_b._accumulate(gh.sum(axis=0))
        if x.requires_grad:
            x._accumulate(g + (gh @ down_w.data.T).reshape(x.data.shape))

    return _record(out, (x, down_w, down_b, up_w, up_b), bwd)


def fusion_attention(x: Tensor, adapter_outs: Sequence[Tensor],
                     q_w: Tensor, k_w: Tensor, v_w: Tensor):
    """Per-position attention where the query comes from x and keys/values
    from each adapter's output. Returns (output, weights ndarray)."""
    outs = list(adapter_outs)
    if not outs:
        raise ValueError("fusion over an empty adapter list")
    d = q_w.data.shape[0]
    if x.data.shape[-1] != d:
        raise ValueError("fusion input last dim mismatch")
    for o in outs:
        if o.data.shape != x.data.shape:
            raise ValueError("adapter outputs must share the input shape")
    kk = len(outs)
    scale_f = 1.0 / np.sqrt(d)
    xf = x.data.reshape(-1, d)
    n = xf.shape[0]
    a = np.empty((kk, n, d))                                   # (k, N, d)
    for i, o in enumerate(outs):
        a[i] = o.data.reshape(-1, d)
    af = a.reshape(-1, d)
    q = xf @ q_w.data                                          # (N, d)
    keys = (af @ k_w.data).reshape(kk, n, d)
    vals = (af @ v_w.data).reshape(kk, n, d)
    s = (keys * q).sum(axis=-1).T * scale_f                    # (N, k)
    s -= s.max(axis=1, keepdims=True)
    e = np.exp(s)
    alpha = e / e.sum(axis=1, keepdims=True)
    y = (alpha.T[:, :, None] * vals).sum(axis=0)               # (N, d)
    out = Tensor(y.reshape(x.data.shape))
    _assert_finite(out.data, "fusion_attention")

    def bwd(g: np.ndarray) -> None:
        gf = g.reshape(-1, d)                                  # (N, d)
        gvals = alpha.T[:, :, None] * gf[None, :, :]           # (k, N, d)
        galpha = (vals * gf).sum(axis=-1).T                    # (N, k)
        gs = (galpha - np.sum(galpha * alpha, axis=1, keepdims=True)) * alpha
        gs *= scale_f
        gq = (gs.T[:, :, None] * keys).sum(axis=0)             # (N, d)
        gkeys = gs.T[:, :, None] * q[None, :, :]               # (k, N, d)
        gkf = gkeys.reshape(-1, d)
        gvf = gvals.reshape(-1, d)
        ga = gkf @ k_w.data.T + gvf @ v_w.data.T
        if q_w.requires_grad:
            q_w._accumulate(xf.T @ gq)
        if k_w.requires_grad:
            k_w._accumulate(af.T @ gkf)
        if v_w.requires_grad:
            v_w._accumulate(af.T @ gvf)
        ga = ga.reshape(kk, n, d)
        for i, o in enumerate(outs):
            if o.requires_grad:
                o._accumulate(ga[i].reshape(o.data.shape))
        if x.requires_grad:
            x._accumulate((gq @ q_w.data.T).reshape(x.data.shape))

    return _record(out, [x, q_w, k_w, v_w] + outs, bwd), alpha.reshape(
        x.data.shape[:-1] + (kk,))


def backward(loss: Tensor) -> None:
    """Reverse-replay the tape that recorded `loss`; the tape is then spent.

    `loss` must be a scalar recorded on a live tape. Every tensor with
    requires_grad reachable from the loss gets its `.grad` populated.
    """
    if loss.data.size != 1:
        raise ValueError("backward requires a scalar loss")
    tape = loss._tape
    if tape is None:
        raise RuntimeError("loss was not recorded on a tape")
    if tape.consumed:
        raise RuntimeError("tape already consumed by a previous backward")
    tape.consumed = True
    loss.grad = np.ones_like(loss.data)
    for out, bwd in reversed(tape._entries):
        if out.grad is not None:
            bwd(out.grad)
    tape._entries.clear()


def parameter(data, rng=None, std: float = 0.02, shape=None) -> Tensor:
    """Trainable tensor; with `rng` given, fresh Normal(0, std^2) of `shape`."""
    if rng is not None:
        data = rng.normal(shape, std)
    return Tensor(data, requires_grad=True)


def zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


def freeze(tensors: Iterable[Tensor]) -> None:
    """Make tensors non-trainable and their buffers read-only (hard freeze)."""
    for t in tensors:
        t.requires_grad = False
        t.grad = None
        t.data.setflags(write=False)
