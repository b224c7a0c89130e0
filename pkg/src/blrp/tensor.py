"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations act on the last two axes ("rows" and columns); any leading axes
are batch axes. Broadcasting is limited to a right operand whose shape is a
suffix of the left operand's shape (row-vector biases, shared tables added
onto a batch).

Recording happens only inside an active :class:`Tape`::

    with Tape() as tape:
        loss = cross_entropy(model_logits, labels)
    grads = tape.backward(loss, params)

Outside a tape the same functions compute values without bookkeeping.
"""
from contextlib import contextmanager

import numpy as np

from . import _kernels
from .errors import DimensionError, MaskError, RankError

LN_EPS = 1e-12


class MemoryTracker:
    """High-water mark of bytes held by live tensors and pending gradients.

    Views (transposes, reshapes that do not copy) are not counted, so the
    figure tracks owned buffers only.
    """

    def __init__(self):
        self.live = 0
        self.peak = 0

    def alloc(self, n):
        self.live += n
        if self.live > self.peak:
            self.peak = self.live

    def free(self, n):
        self.live -= n

    def reset_peak(self):
        self.peak = self.live


TRACKER = MemoryTracker()


class Tensor:
    __slots__ = ("data", "requires_grad", "node", "_tape", "_nbytes", "__weakref__")

    def __init__(self, data, requires_grad=False):
        data = np.asarray(data, dtype=np.float64)
        self.data = data
        self.requires_grad = requires_grad
        self.node = None
        self._tape = None
        self._nbytes = data.nbytes if data.flags.owndata else 0
        TRACKER.alloc(self._nbytes)

    def __del__(self):
        TRACKER.free(self._nbytes)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data.item()

    def __repr__(self):
        tag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{tag})"

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# tape
# ---------------------------------------------------------------------------

class _Node:
    __slots__ = ("op", "parents", "vjp")

    def __init__(self, op, parents, vjp):
        self.op = op
        self.parents = parents
        self.vjp = vjp


_ACTIVE = []


def current_tape():
    return _ACTIVE[-1] if _ACTIVE else None


class Tape:
    """Append-only record of differentiable operations.

    Nodes are appended as operations execute, so parents always precede
    children and reverse iteration is a valid reverse-topological order.
    A tape is single-owner; use one tape per concurrent forward pass.
    """

    def __init__(self):
        self.nodes = []

    def __enter__(self):
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE.remove(self)
        return False

    def record(self, op, out, parents, vjp):
        out.node = len(self.nodes)
        out._tape = self
        out.requires_grad = True
        self.nodes.append(_Node(op, parents, vjp))

    def backward(self, loss, params=None, retain=False):
        """Accumulate d(loss)/d(param) for every param.

        ``params`` may be a mapping name -> Tensor (returns name -> ndarray)
        or a sequence of tensors (returns a list). Parameters that the loss
        does not reach get zero gradients. Unless ``retain`` is set, the tape
        is cleared afterwards so saved activations can be released.
        """
        if loss.size != 1:
            raise RankError(f"backward() needs a scalar loss, got shape {loss.shape}")
        if loss._tape is not self:
            raise RankError("loss was not recorded on this tape")
        pending = {loss.node: np.ones_like(loss.data)}
        TRACKER.alloc(loss.data.nbytes)
        leaf = {}
        nodes = self.nodes
        for i in range(loss.node, -1, -1):
            g = pending.pop(i, None)
            if g is None:
                continue
            node = nodes[i]
            for p, gp in zip(node.parents, node.vjp(g)):
                if gp is None or not p.requires_grad:
                    continue
                if p._tape is self:
                    k = p.node
                    if k in pending:
                        pending[k] = pending[k] + gp
                    else:
                        TRACKER.alloc(gp.nbytes)
                        pending[k] = gp
                else:
                    key = id(p)
                    if key in leaf:
                        leaf[key][1] += gp
                    else:
                        TRACKER.alloc(gp.nbytes)
                        leaf[key] = [p, np.array(gp, dtype=np.float64, copy=True)]
            TRACKER.free(g.nbytes)
        for p, gp in leaf.values():
            TRACKER.free(gp.nbytes)
        if not retain:
            self.nodes = []
        if params is None:
            return {k: v[1] for k, v in leaf.items()}

        def grad_of(p):
            hit = leaf.get(id(p))
            return hit[1] if hit is not None else np.zeros_like(p.data)

        if isinstance(params, dict):
            return {name: grad_of(p) for name, p in params.items()}
        return [grad_of(p) for p in params]


def backward(loss, params=None):
    """Backpropagate through the tape that recorded ``loss``."""
    if loss.size != 1:
        raise RankError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if loss._tape is None:
        raise RankError("loss was computed outside any tape")
    return loss._tape.backward(loss, params)


def _make(op, data, parents, vjp):
    out = Tensor(data)
    tape = current_tape()
    if tape is not None:
        for p in parents:
            if p.requires_grad:
                tape.record(op, out, parents, vjp)
                break
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead > 0:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_suffix(a, b, op):
    sa, sb = a.shape, b.shape
    if sa == sb:
        return
    if len(sb) <= len(sa) and sa[len(sa) - len(sb):] == sb:
        return
    raise DimensionError(f"{op}: shapes {sa} and {sb} are incompatible")


# ---------------------------------------------------------------------------
# operations
# ---------------------------------------------------------------------------

def matmul(a, b, transpose_b=False):
    """Batched matrix product over the last two axes, optionally with b^T."""
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise DimensionError(f"matmul needs rank >= 2 operands, got {ad.shape} and {bd.shape}")
    bm = np.swapaxes(bd, -1, -2) if transpose_b else bd
    if ad.shape[-1] != bm.shape[-2]:
        raise DimensionError(
            f"matmul inner dimensions differ: {ad.shape} x {bd.shape}"
            + (" (b transposed)" if transpose_b else "")
        )
    k = ad.shape[-1]
    n = bm.shape[-1]
    flat = bm.ndim == 2
    if flat:
        # one BLAS call over all leading axes
        out = (ad.reshape(-1, k) @ bm).reshape(ad.shape[:-1] + (n,))
    else:
        try:
            out = np.matmul(ad, bm)
        except ValueError as e:
            raise DimensionError(f"matmul batch dimensions differ: {ad.shape} x {bd.shape}") from e

    def vjp(g):
        ga = gb = None
        if flat:
            g2 = g.reshape(-1, n)
            if a.requires_grad:
                ga = (g2 @ bm.T).reshape(ad.shape)
            if b.requires_grad:
                gbm = ad.reshape(-1, k).T @ g2
                gb = gbm.T if transpose_b else gbm
            return ga, gb
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(bm, -1, -2)), ad.shape)
        if b.requires_grad:
            gbm = _unbroadcast(np.matmul(np.swapaxes(ad, -1, -2), g), bm.shape)
            gb = np.swapaxes(gbm, -1, -2) if transpose_b else gbm
        return ga, gb

    return _make("matmul", out, (a, b), vjp)


def add(a, b):
    _check_suffix(a, b, "add")
    sb = b.shape

    def vjp(g):
        return g, _unbroadcast(g, sb)

    return _make("add", a.data + b.data, (a, b), vjp)


def mul(a, b):
    _check_suffix(a, b, "mul")
    ad, bd = a.data, b.data

    def vjp(g):
        return (g * bd if a.requires_grad else None,
                _unbroadcast(g * ad, bd.shape) if b.requires_grad else None)

    return _make("mul", ad * bd, (a, b), vjp)


def scale(a, c):
    c = float(c)
    return _make("scale", a.data * c, (a,), lambda g: (g * c,))


def total(a):
    """Sum of all entries, as a scalar tensor."""
    shape = a.shape
    return _make("sum", np.asarray(a.data.sum()), (a,),
                 lambda g: (np.broadcast_to(g, shape).copy(),))


def concat_rows(parts):
    """Stack along the row axis; every part keeps its column count."""
    parts = list(parts)
    if not parts:
        raise DimensionError("concat_rows needs at least one tensor")
    lead = parts[0].shape[:-2]
    d = parts[0].shape[-1]
    for p in parts:
        if p.ndim < 2 or p.shape[-1] != d or p.shape[:-2] != lead:
            raise DimensionError(
                f"concat_rows: shapes {[q.shape for q in parts]} do not share leading/column dims")
    sizes = [p.shape[-2] for p in parts]
    out = np.concatenate([p.data for p in parts], axis=-2)
    bounds = np.cumsum([0] + sizes)

    def vjp(g):
        return tuple(g[..., bounds[i]:bounds[i + 1], :] for i in range(len(parts)))

    return _make("concat_rows", out, tuple(parts), vjp)


def slice_rows(a, start, stop):
    n = a.shape[-2]
    if not 0 <= start < stop <= n:
        raise DimensionError(f"slice_rows [{start}:{stop}] out of range for {a.shape}")
    shape = a.shape

    def vjp(g):
        full = np.zeros(shape)
        full[..., start:stop, :] = g
        return (full,)

    return _make("slice_rows", a.data[..., start:stop, :].copy(), (a,), vjp)


def mean_rows(a):
    """Mean over the row axis, keeping it as a length-1 axis."""
    n = a.shape[-2]
    shape = a.shape

    def vjp(g):
        return (np.broadcast_to(g / n, shape).copy(),)

    return _make("mean_rows", a.data.mean(axis=-2, keepdims=True), (a,), vjp)


def transpose(a):
    """Swap the last two axes."""
    out = np.ascontiguousarray(np.swapaxes(a.data, -1, -2))
    return _make("transpose", out, (a,), lambda g: (np.swapaxes(g, -1, -2),))


def expand_batch(a, batch):
    """Repeat ``a`` along a new leading axis of size ``batch``."""
    out = np.broadcast_to(a.data, (batch,) + a.shape).copy()
    return _make("expand_batch", out, (a,), lambda g: (g.sum(axis=0),))


def squeeze_batch(a):
    """Drop a leading batch axis of size 1."""
    if a.ndim < 3 or a.shape[0] != 1:
        raise DimensionError(f"squeeze_batch needs a leading axis of size 1, got {a.shape}")
    shape = a.shape
    return _make("squeeze_batch", a.data[0], (a,), lambda g: (g.reshape(shape),))


def embedding(table, ids):
    """Row gather ``table[ids]``; ``ids`` is an integer array of any shape."""
    ids = np.asarray(ids, dtype=np.int64)
    shape = table.shape

    def vjp(g):
        full = np.zeros(shape)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, shape[-1]))
        return (full,)

    return _make("embedding", table.data[ids], (table,), vjp)


def _rows(x):
    return x.reshape(-1, x.shape[-1])


def gelu(a):
    x = a.data
    y, cdf = _kernels.gelu_fwd(np.ascontiguousarray(_rows(x)))
    y = y.reshape(x.shape)

    def vjp(g):
        return (_kernels.gelu_bwd(_rows(x), cdf, np.ascontiguousarray(_rows(g))).reshape(x.shape),)

    return _make("gelu", y, (a,), vjp)


relu_or_gelu = gelu


def layer_norm_rows(a, gamma=None, beta=None, eps=LN_EPS):
    """Normalise each row to zero mean and unit variance, then apply gain/bias."""
    x = a.data
    d = x.shape[-1]
    for p in (gamma, beta):
        if p is not None and p.shape != (d,):
            raise DimensionError(f"layer_norm_rows: affine shape {p.shape} != ({d},)")
    xhat, rstd = _kernels.layer_norm_fwd(np.ascontiguousarray(_rows(x)), eps)
    y = xhat
    if gamma is not None:
        y = y * gamma.data
    if beta is not None:
        y = y + beta.data
    y = y.reshape(x.shape)

    def vjp(g):
        g2 = _rows(g)
        dgamma = (g2 * xhat).sum(axis=0) if gamma is not None else None
        dbeta = g2.sum(axis=0) if beta is not None else None
        dxhat = g2 * gamma.data if gamma is not None else np.ascontiguousarray(g2)
        dx = _kernels.layer_norm_bwd(dxhat, xhat, rstd).reshape(x.shape)
        return dx, dgamma, dbeta

    parents = (a, gamma if gamma is not None else _NOGRAD, beta if beta is not None else _NOGRAD)
    return _make("layer_norm_rows", y, parents, vjp)


def softmax_rows(a, mask=None):
    """Row softmax with optional boolean mask (False = excluded key).

    ``mask`` must broadcast against ``a``. Excluded entries are treated as
    -inf logits, so they come out exactly zero.
    """
    x = a.data
    m = x.shape[-1]
    if mask is None:
        live = np.ones((1, m), dtype=np.bool_)
        flat_live = np.ones(_rows(x).shape, dtype=np.bool_)
    else:
        live = np.asarray(mask, dtype=np.bool_)
        try:
            flat_live = np.ascontiguousarray(np.broadcast_to(live, x.shape)).reshape(-1, m)
        except ValueError as e:
            raise DimensionError(f"mask shape {live.shape} does not fit scores {x.shape}") from e
        if not live.any(axis=-1).all():
            raise MaskError("softmax_rows: a row has no unmasked entry")
    y = _kernels.softmax_fwd(np.ascontiguousarray(_rows(x)), flat_live).reshape(x.shape)

    def vjp(g):
        return (_kernels.softmax_bwd(_rows(y), np.ascontiguousarray(_rows(g))).reshape(x.shape),)

    return _make("softmax_rows", y, (a,), vjp)


def split_heads(a, heads):
    """[..., n, d] -> [..., heads, n, d/heads]."""
    *lead, n, d = a.shape
    if d % heads:
        raise DimensionError(f"width {d} not divisible by {heads} heads")
    dh = d // heads
    out = np.ascontiguousarray(
        np.swapaxes(a.data.reshape(*lead, n, heads, dh), -2, -3))

    def vjp(g):
        return (np.swapaxes(g, -2, -3).reshape(*lead, n, d),)

    return _make("split_heads", out, (a,), vjp)


def merge_heads(a):
    """[..., heads, n, dh] -> [..., n, heads*dh]."""
    *lead, h, n, dh = a.shape
    out = np.swapaxes(a.data, -2, -3).reshape(*lead, n, h * dh)

    def vjp(g):
        return (np.ascontiguousarray(np.swapaxes(g.reshape(*lead, n, h, dh), -2, -3)),)

    return _make("merge_heads", out, (a,), vjp)


def cross_entropy(logits, labels):
    """Mean negative log-likelihood of integer ``labels`` under row logits."""
    z = logits.data
    c = z.shape[-1]
    z2 = z.reshape(-1, c)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.shape[0] != z2.shape[0]:
        raise DimensionError(f"{labels.shape[0]} labels for {z2.shape[0]} logit rows")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise DimensionError(f"label outside [0, {c})")
    shifted = z2 - z2.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(z2.shape[0])
    loss = np.mean(lse - shifted[rows, labels])

    def vjp(g):
        p = np.exp(shifted - lse[:, None])
        p[rows, labels] -= 1.0
        return ((float(g) / z2.shape[0]) * p.reshape(z.shape),)

    return _make("cross_entropy", np.asarray(loss), (logits,), vjp)


_NOGRAD = Tensor(np.zeros(1))


@contextmanager
def no_tape():
    """Temporarily suspend recording (e.g. for evaluation inside training)."""
    saved = list(_ACTIVE)
    _ACTIVE.clear()
    try:
        yield
    finally:
        _ACTIVE.extend(saved)
