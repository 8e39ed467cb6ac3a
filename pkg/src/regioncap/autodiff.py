"""Tape-based reverse-mode automatic differentiation over dense numpy arrays.

A ``Tensor`` wraps an immutable numpy float array.  Primitives executed while
a ``Tape`` is active are recorded in execution order; ``Tape.backward`` replays
the record once in reverse, accumulating gradients additively across fan-out.

Conventions fixed here (they make every gradient test deterministic):
  * relu'(0) = 0
  * maxpool ties route the gradient to the first cell in row-major window scan
  * dropout is "inverted": survivors are scaled by 1/(1-p) at train time

Two precisions are supported: float64 ("wide", used by all gradient checks)
and float32 ("narrow", used for training speed).  Ops preserve the input
dtype.  With ``set_checked(True)`` every primitive validates that its outputs
are finite and raises :class:`NumericError` otherwise.
"""

from __future__ import annotations

import threading
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import ContractViolation, NumericError, TapeConsumed

_FLOAT_DTYPES = (np.float32, np.float64)

_checked = False


def set_checked(flag: bool) -> None:
    """Globally enable/disable post-op finiteness checks."""
    global _checked
    _checked = bool(flag)


def is_checked() -> bool:
    return _checked


class Tensor:
    """Dense n-dimensional float array, the substrate of all model math.

    The wrapped array must be treated as read-only; ops never mutate their
    inputs and always allocate fresh outputs (or safe views).  ``requires_grad``
    marks leaves whose gradients the caller wants; derived tensors inherit it.
    """

    __slots__ = ("data", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: Optional[str] = None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractViolation(f"item() on non-scalar tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def sum(self) -> "Tensor":
        return sum_(self)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return add(self, scale(other, -1.0))
        return add(self, -float(other))

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{tag})"


# ---------------------------------------------------------------------------
# Tape machinery


class Gradients:
    """Result of a backward pass: maps recorded tensors to gradient arrays.

    Tensors that never influenced the loss report a zero gradient, matching
    the convention that unused tensors have gradient zero.
    """

    def __init__(self, grads: dict):
        self._grads = grads

    def __getitem__(self, t: Tensor) -> np.ndarray:
        g = self._grads.get(id(t))
        if g is None:
            return np.zeros_like(t.data)
        return g

    def __contains__(self, t: Tensor) -> bool:
        return id(t) in self._grads


_tls = threading.local()


def _tape_stack():
    stack = getattr(_tls, "stack", None)
    if stack is None:
        stack = []
        _tls.stack = stack
    return stack


def active_tape() -> Optional["Tape"]:
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Ordered record of executed primitives; single-owner, one backward pass.

    Execution order is a topological order of the data-flow graph, so walking
    the record once in reverse visits every node after all of its consumers.
    """

    def __init__(self):
        self._nodes = []  # (outputs, parents, backward_fn)
        self._recorded = set()  # ids of output tensors
        self._consumed = False

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _tape_stack().pop()
        assert popped is self, "tapes must unwind in LIFO order"
        return False

    def _record(self, outputs, parents, backward_fn) -> None:
        self._nodes.append((outputs, parents, backward_fn))
        for o in outputs:
            self._recorded.add(id(o))

    def __len__(self) -> int:
        return len(self._nodes)

    def backward(self, loss: Tensor) -> Gradients:
        """Accumulate d(loss)/d(tensor) for every tensor recorded on this tape."""
        if self._consumed:
            raise TapeConsumed("tape already consumed by a previous backward pass")
        if loss.size != 1:
            raise ContractViolation(f"backward requires a scalar loss, got shape {loss.shape}")
        if id(loss) not in self._recorded:
            raise ContractViolation("loss was not produced on this tape")
        self._consumed = True

        grads: dict = {id(loss): np.ones_like(loss.data)}
        for outputs, parents, backward_fn in reversed(self._nodes):
            gouts = [grads.get(id(o)) for o in outputs]
            if all(g is None for g in gouts):
                continue
            gouts = [
                g if g is not None else np.zeros_like(o.data)
                for g, o in zip(gouts, outputs)
            ]
            pgrads = backward_fn(*gouts)
            for p, pg in zip(parents, pgrads):
                if pg is None or not p.requires_grad:
                    continue
                acc = grads.get(id(p))
                # never accumulate in place: backward fns may return views
                grads[id(p)] = pg if acc is None else acc + pg
        return Gradients(grads)


def backward(loss: Tensor, tape: Optional[Tape] = None) -> Gradients:
    """Run the backward pass of the active (or given) tape from ``loss``."""
    tape = tape or active_tape()
    if tape is None:
        raise ContractViolation("no active tape to backpropagate through")
    return tape.backward(loss)


def _apply(parents: Sequence[Tensor], out_data, backward_fn) -> Tensor:
    outs = _apply_multi(parents, (out_data,), backward_fn)
    return outs[0]


def _apply_multi(parents: Sequence[Tensor], out_datas, backward_fn):
    """Wrap op outputs as Tensors and record the node if a tape is active.

    ``backward_fn(*grads_out)`` must return one gradient array (or None) per
    parent, freshly allocated or a view it does not later mutate.
    """
    if _checked:
        for d in out_datas:
            if not np.all(np.isfinite(d)):
                raise NumericError("non-finite value produced by a primitive op")
    tape = active_tape()
    track = tape is not None and any(p.requires_grad for p in parents)
    outs = tuple(Tensor(d, requires_grad=track) for d in out_datas)
    if track:
        tape._record(outs, tuple(parents), backward_fn)
    return outs


def as_tensor(x, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


# ---------------------------------------------------------------------------
# Elementwise and shape primitives


def add(a: Tensor, b) -> Tensor:
    if isinstance(b, Tensor):
        if a.shape != b.shape:
            raise ContractViolation(f"add shape mismatch: {a.shape} vs {b.shape}")
        return _apply((a, b), a.data + b.data, lambda g: (g, g))
    c = float(b)
    return _apply((a,), a.data + c, lambda g: (g,))


def mul(a: Tensor, b) -> Tensor:
    if isinstance(b, Tensor):
        if a.shape != b.shape:
            raise ContractViolation(f"mul shape mismatch: {a.shape} vs {b.shape}")
        return _apply((a, b), a.data * b.data, lambda g: (g * b.data, g * a.data))
    c = float(b)
    return _apply((a,), a.data * c, lambda g: (g * c,))


def scale(a: Tensor, c: float) -> Tensor:
    return mul(a, float(c))


def sum_(a: Tensor) -> Tensor:
    def bw(g):
        return (np.full_like(a.data, float(g.reshape(()))),)

    return _apply((a,), np.asarray(a.data.sum(), dtype=a.dtype), bw)


def mean_(a: Tensor) -> Tensor:
    n = a.size

    def bw(g):
        return (np.full_like(a.data, float(g.reshape(())) / n),)

    return _apply((a,), np.asarray(a.data.mean(), dtype=a.dtype), bw)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    return _apply((a,), a.data.reshape(shape), lambda g: (g.reshape(a.shape),))


def permute(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _apply((a,), np.ascontiguousarray(a.data.transpose(axes)),
                  lambda g: (g.transpose(inv),))


def getitem(a: Tensor, key) -> Tensor:
    """Basic slicing (no fancy indexing); gradient scatters back into zeros."""
    out = a.data[key]

    def bw(g):
        ga = np.zeros_like(a.data)
        ga[key] = g
        return (ga,)

    return _apply((a,), np.ascontiguousarray(out), bw)


def gather_rows(a: Tensor, idx) -> Tensor:
    """Select rows along axis 0; duplicate indices accumulate gradient."""
    idx = np.asarray(idx, dtype=np.intp)

    def bw(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, idx, g)
        return (ga,)

    return _apply((a,), a.data[idx].copy(), bw)


def concat0(parts: Iterable[Tensor]) -> Tensor:
    parts = list(parts)
    if not parts:
        raise ContractViolation("concat0 of zero tensors")
    sizes = [p.shape[0] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        return tuple(g[offsets[i]:offsets[i + 1]] for i in range(len(parts)))

    return _apply(tuple(parts), np.concatenate([p.data for p in parts], axis=0), bw)


# ---------------------------------------------------------------------------
# Activations


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _apply((a,), np.where(mask, a.data, 0.0), lambda g: (g * mask,))


def sigmoid(a: Tensor) -> Tensor:
    # stable both tails: sigma(x) = exp(-softplus(-x))
    out = np.empty_like(a.data)
    pos = a.data >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a.data[pos]))
    ex = np.exp(a.data[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _apply((a,), out, lambda g: (g * out * (1.0 - out),))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _apply((a,), out, lambda g: (g * (1.0 - out * out),))


def dropout(a: Tensor, p: float, train: bool, rng: Optional[np.random.Generator] = None) -> Tensor:
    """Inverted dropout: train mode zeroes with prob. p and rescales survivors."""
    if not 0.0 <= p < 1.0:
        raise ContractViolation(f"dropout probability must be in [0, 1), got {p}")
    if not train or p == 0.0:
        return a
    if rng is None:
        raise ContractViolation("train-mode dropout requires an rng")
    mask = (rng.random(a.shape) >= p).astype(a.dtype) / (1.0 - p)
    return _apply((a,), a.data * mask, lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# Linear algebra


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Affine map: (N,A) @ (A,B) + (B,) -> (N,B)."""
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ContractViolation(f"linear shape mismatch: x{x.shape} w{w.shape}")
    if b.shape != (w.shape[1],):
        raise ContractViolation(f"linear bias shape {b.shape} != ({w.shape[1]},)")
    out = x.data @ w.data + b.data

    def bw(g):
        return (g @ w.data.T, x.data.T @ g, g.sum(axis=0))

    return _apply((x, w, b), out, bw)


# ---------------------------------------------------------------------------
# Convolution / pooling


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int):
    """(C,Hp,Wp) -> (C*kh*kw, Ho*Wo) patch matrix."""
    c = xp.shape[0]
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    win = win[:, ::stride, ::stride]  # (C, Ho, Wo, kh, kw)
    ho, wo = win.shape[1], win.shape[2]
    cols = win.transpose(0, 3, 4, 1, 2).reshape(c * kh * kw, ho * wo)
    return np.ascontiguousarray(cols), ho, wo


def _col2im_indices(c: int, hp: int, wp: int, kh: int, kw: int, ho: int, wo: int, stride: int):
    ci, dy, dx = np.meshgrid(np.arange(c), np.arange(kh), np.arange(kw), indexing="ij")
    oy, ox = np.meshgrid(np.arange(ho), np.arange(wo), indexing="ij")
    rows = dy.reshape(-1, 1) + (oy.reshape(1, -1) * stride)
    cols = dx.reshape(-1, 1) + (ox.reshape(1, -1) * stride)
    chan = np.broadcast_to(ci.reshape(-1, 1), rows.shape)
    return ((chan * hp + rows) * wp + cols).reshape(-1)


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation of (Cin,H,W) with (Cout,Cin,kh,kw) plus bias.

    Output extents are floor((H + 2*pad - kh)/stride) + 1 (same for W).
    Gradients are defined w.r.t. input, weight, and bias.
    """
    if x.ndim != 3 or w.ndim != 4:
        raise ContractViolation(f"conv2d expects 3-d input and 4-d weight, got {x.shape}, {w.shape}")
    cin, h, wd = x.shape
    cout, cin2, kh, kw = w.shape
    if cin != cin2:
        raise ContractViolation(f"conv2d channel mismatch: input {cin} vs weight {cin2}")
    if b.shape != (cout,):
        raise ContractViolation(f"conv2d bias shape {b.shape} != ({cout},)")
    if stride < 1 or pad < 0 or kh < 1 or kw < 1:
        raise ContractViolation("conv2d requires stride >= 1, pad >= 0, kh,kw >= 1")
    if h + 2 * pad < kh or wd + 2 * pad < kw:
        raise ContractViolation("conv2d kernel larger than padded input")

    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad))) if pad else x.data
    hp, wp = xp.shape[1], xp.shape[2]
    cols, ho, wo = _im2col(xp, kh, kw, stride)
    wmat = w.data.reshape(cout, -1)
    out = (wmat @ cols + b.data[:, None]).reshape(cout, ho, wo)

    def bw(g):
        gmat = g.reshape(cout, -1)
        gw = (gmat @ cols.T).reshape(w.shape)
        gb = gmat.sum(axis=1)
        if stride == 1:
            # transposed conv: pad grad by (k-1), correlate with flipped kernel
            gp = np.pad(g, ((0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1)))
            gcols, gh, gw2 = _im2col(gp, kh, kw, 1)
            wflip = w.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(cin, -1)
            gxp = (wflip @ gcols).reshape(cin, gh, gw2)
        else:
            gcols = wmat.T @ gmat
            gxp = np.zeros((cin, hp, wp), dtype=g.dtype)
            flat = _col2im_indices(cin, hp, wp, kh, kw, ho, wo, stride)
            np.add.at(gxp.reshape(-1), flat, gcols.reshape(-1))
        gx = gxp[:, pad:pad + h, pad:pad + wd] if pad else gxp
        return (np.ascontiguousarray(gx), gw, gb)

    return _apply((x, w, b), out, bw)


def maxpool2d(x: Tensor, window: int = 2, stride: int = 2) -> Tensor:
    """Max pooling; gradient routes to the argmax cell, first index on ties."""
    if x.ndim != 3:
        raise ContractViolation(f"maxpool2d expects (C,H,W), got {x.shape}")
    c, h, w = x.shape
    if h < window or w < window or (h - window) % stride or (w - window) % stride:
        raise ContractViolation(
            f"maxpool2d extents ({h},{w}) not divisible for window={window} stride={stride}")
    win = np.lib.stride_tricks.sliding_window_view(x.data, (window, window), axis=(1, 2))
    win = win[:, ::stride, ::stride]  # (C, Ho, Wo, window, window)
    ho, wo = win.shape[1], win.shape[2]
    flat = win.reshape(c, ho, wo, window * window)
    am = flat.argmax(axis=-1)  # first occurrence = row-major window scan
    out = np.take_along_axis(flat, am[..., None], axis=-1)[..., 0]

    def bw(g):
        gx = np.zeros_like(x.data)
        dy, dx = am // window, am % window
        ci = np.broadcast_to(np.arange(c)[:, None, None], am.shape)
        oy = np.broadcast_to(np.arange(ho)[None, :, None], am.shape)
        ox = np.broadcast_to(np.arange(wo)[None, None, :], am.shape)
        np.add.at(gx, (ci, oy * stride + dy, ox * stride + dx), g)
        return (gx,)

    return _apply((x,), np.ascontiguousarray(out), bw)


# ---------------------------------------------------------------------------
# Recurrent cell


def lstm_step(x: Tensor, h_prev: Tensor, c_prev: Tensor,
              wx: Tensor, wh: Tensor, b: Tensor):
    """One LSTM step over a batch: (N,Din),(N,Dh),(N,Dh) -> (h,c) each (N,Dh).

    Gate layout along the 4*Dh axis is [input, forget, output, candidate].
    """
    n, din = x.shape
    dh = h_prev.shape[1]
    if h_prev.shape != (n, dh) or c_prev.shape != (n, dh):
        raise ContractViolation("lstm_step state shapes inconsistent with batch")
    if wx.shape != (din, 4 * dh) or wh.shape != (dh, 4 * dh) or b.shape != (4 * dh,):
        raise ContractViolation(
            f"lstm_step parameter shapes inconsistent: wx{wx.shape} wh{wh.shape} b{b.shape}")

    a = x.data @ wx.data + h_prev.data @ wh.data + b.data
    ai, af, ao, ag = a[:, :dh], a[:, dh:2 * dh], a[:, 2 * dh:3 * dh], a[:, 3 * dh:]

    def _sig(z):
        out = np.empty_like(z)
        p = z >= 0
        out[p] = 1.0 / (1.0 + np.exp(-z[p]))
        e = np.exp(z[~p])
        out[~p] = e / (1.0 + e)
        return out

    i, f, o = _sig(ai), _sig(af), _sig(ao)
    g = np.tanh(ag)
    c = f * c_prev.data + i * g
    tc = np.tanh(c)
    h = o * tc

    def bw(gh, gc):
        dc = gc + gh * o * (1.0 - tc * tc)
        do = gh * tc
        di, df, dg = dc * g, dc * c_prev.data, dc * i
        da = np.concatenate(
            [di * i * (1 - i), df * f * (1 - f), do * o * (1 - o), dg * (1 - g * g)],
            axis=1)
        gx = da @ wx.data.T
        ghp = da @ wh.data.T
        gcp = dc * f
        gwx = x.data.T @ da
        gwh = h_prev.data.T @ da
        gb = da.sum(axis=0)
        return (gx, ghp, gcp, gwx, gwh, gb)

    return _apply_multi((x, h_prev, c_prev, wx, wh, b), (h, c), bw)


# ---------------------------------------------------------------------------
# Losses


def _log_softmax(z: np.ndarray) -> np.ndarray:
    zs = z - z.max(axis=1, keepdims=True)
    return zs - np.log(np.exp(zs).sum(axis=1, keepdims=True))


def log_softmax_np(z: np.ndarray) -> np.ndarray:
    """Numerically stabilized log-softmax over axis 1 (plain numpy helper)."""
    return _log_softmax(np.asarray(z))


def weighted_softmax_cross_entropy(logits: Tensor, targets, weights) -> Tensor:
    """sum_i w_i * (-log softmax(logits_i)[target_i]); grad via (p - onehot)*w."""
    targets = np.asarray(targets, dtype=np.intp)
    weights = np.asarray(weights, dtype=logits.dtype)
    n, k = logits.shape
    if targets.shape != (n,) or weights.shape != (n,):
        raise ContractViolation("targets/weights must be 1-d of the batch length")
    if targets.size and (targets.min() < 0 or targets.max() >= k):
        raise ContractViolation(f"target index out of range [0, {k})")
    logp = _log_softmax(logits.data)
    loss = -(weights * logp[np.arange(n), targets]).sum()

    def bw(g):
        p = np.exp(logp)
        p[np.arange(n), targets] -= 1.0
        return (p * (weights * float(g.reshape(())))[:, None],)

    return _apply((logits,), np.asarray(loss, dtype=logits.dtype), bw)


def softmax_cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean over the batch of -log softmax(logits)[target]."""
    n = logits.shape[0]
    w = np.full(n, 1.0 / n, dtype=logits.dtype)
    return weighted_softmax_cross_entropy(logits, targets, w)


def binary_logistic_loss(logits: Tensor, labels) -> Tensor:
    """Mean binary logistic loss on raw logits, in log-sum-exp-stable form."""
    y = np.asarray(labels, dtype=logits.dtype)
    if y.shape != logits.shape:
        raise ContractViolation(f"labels shape {y.shape} != logits shape {logits.shape}")
    x = logits.data
    softplus = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    n = x.size
    loss = (softplus - x * y).sum() / n

    def bw(g):
        s = np.empty_like(x)
        p = x >= 0
        s[p] = 1.0 / (1.0 + np.exp(-x[p]))
        e = np.exp(x[~p])
        s[~p] = e / (1.0 + e)
        return ((s - y) * (float(g.reshape(())) / n),)

    return _apply((logits,), np.asarray(loss, dtype=logits.dtype), bw)
