"""Reverse-mode autodiff over float64 numpy arrays.

Covers what the semantic-communication classifier needs: dense and valid
(unpadded) convolution layers, leaky ReLU, softmax cross-entropy, and a few
elementwise/shape ops. Operations whose inputs depend on a tape variable are
appended to that tape; ``Tape.backward`` and ``Tape.grad_of`` walk it in
reverse. A tape is built fresh for every forward pass.

Parameter gradients can optionally be kept per sample (leading batch axis),
which is what the empirical Fisher diagonal needs.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError, DimensionError, ParameterError


class Tensor:
    __slots__ = ("data", "tape", "requires_grad", "is_param", "name")

    def __init__(self, data, tape=None, requires_grad=False, name=None, is_param=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.tape = tape
        self.requires_grad = requires_grad
        self.is_param = is_param
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data.item()

    def numpy(self):
        return self.data

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        n = self.data.size if axis is None else self.data.shape[axis]
        return mul(tsum(self, axis), 1.0 / n)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


class _Node:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out, inputs, backward):
        self.out = out
        self.inputs = inputs
        self.backward = backward


class Tape:
    """Ordered record of executed operations.

    Nodes are appended as operations execute, so the list is already in
    topological order.
    """

    def __init__(self):
        self.nodes = []
        self.params = {}

    def param(self, name, value):
        """Register a trainable parameter leaf."""
        if name in self.params:
            raise ContractError(f"parameter {name!r} registered twice")
        t = Tensor(value, tape=self, requires_grad=True, name=name, is_param=True)
        if not np.all(np.isfinite(t.data)):
            raise ContractError(f"parameter {name!r} has non-finite entries")
        self.params[name] = t
        return t

    def variable(self, value, name=None):
        """A differentiable leaf that is not a model parameter."""
        t = Tensor(value, tape=self, requires_grad=True, name=name)
        if not np.all(np.isfinite(t.data)):
            raise ContractError("tensor has non-finite entries")
        return t

    def _record(self, out_data, inputs, backward):
        out = Tensor(out_data, tape=self, requires_grad=True)
        self.nodes.append(_Node(out, inputs, backward))
        return out

    def _backprop(self, output, seed, per_sample):
        grads = {id(output): seed}
        for node in reversed(self.nodes):
            g = grads.get(id(node.out))
            if g is None:
                continue
            in_grads = node.backward(g, per_sample)
            for inp, gi in zip(node.inputs, in_grads):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                prev = grads.get(key)
                grads[key] = gi if prev is None else prev + gi
        return grads

    def _check_output(self, output):
        if not isinstance(output, Tensor) or output.tape is not self or not output.requires_grad:
            raise ContractError("output was not produced through this tape")
        if output.data.size != 1:
            raise ContractError(f"expected a scalar node, got shape {output.shape}")

    def backward(self, loss, per_sample=False, squared=False):
        """Gradients of a scalar ``loss`` for every registered parameter.

        With ``per_sample=True`` the loss must be a sum of independent
        per-sample terms over a leading batch axis; each parameter gradient
        then carries that batch axis first. ``squared=True`` (implies
        per-sample) returns the batch sum of squared per-sample gradients
        instead; it requires every parameter to feed exactly one operation.
        """
        self._check_output(loss)
        mode = "sq" if squared else ("batch" if per_sample else None)
        grads = self._backprop(loss, np.ones_like(loss.data), mode)
        out = {}
        batch = None
        for name, p in self.params.items():
            g = grads.get(id(p))
            out[name] = g
            if g is not None and mode == "batch":
                batch = g.shape[0]
        for name, p in self.params.items():
            if out[name] is None:
                out[name] = np.zeros(((batch or 1),) + p.shape if mode == "batch" else p.shape)
        return out

    def grad_of(self, output, wrt):
        """d(output)/d(wrt) for any tensor recorded on this tape."""
        self._check_output(output)
        if not isinstance(wrt, Tensor) or wrt.tape is not self or not wrt.requires_grad:
            raise ContractError("wrt is not a differentiable tensor on this tape")
        grads = self._backprop(output, np.ones_like(output.data), None)
        g = grads.get(id(wrt))
        if g is None:
            raise ContractError("output is not reachable from wrt")
        return g


def _tape_of(*tensors):
    tape = None
    for t in tensors:
        if t.requires_grad:
            if tape is None:
                tape = t.tape
            elif t.tape is not tape:
                raise ContractError("operands belong to different tapes")
    return tape


def _finish(out_data, inputs, backward):
    tape = _tape_of(*inputs)
    if tape is None:
        return Tensor(out_data)
    return tape._record(out_data, inputs, backward)


def _sum_to(g, shape, per_sample):
    """Reduce a broadcast gradient back to ``shape``.

    With ``per_sample`` the leading axis of ``g`` is kept as the batch axis.
    """
    shape = tuple(shape)
    if per_sample and g.ndim > len(shape):
        lead = g.ndim - len(shape)
        if lead > 1:
            g = g.sum(axis=tuple(range(1, lead)))
        for i, d in enumerate(shape):
            if d == 1 and g.shape[i + 1] != 1:
                g = g.sum(axis=i + 1, keepdims=True)
        return g.reshape((g.shape[0],) + shape)
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, d in enumerate(shape):
        if d == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    g = g.reshape(shape)
    if per_sample:
        g = g[None]
    return g


def _wants_batch(t, mode):
    return mode is not None and t.is_param


def _fold(gb, mode):
    """Per-sample gradients as requested: kept ("batch") or squared and summed ("sq")."""
    return np.square(gb).sum(axis=0) if mode == "sq" else gb


def _reduce_param(g, t, mode):
    if _wants_batch(t, mode):
        return _fold(_sum_to(g, t.shape, True), mode)
    return _sum_to(g, t.shape, False)


# ---------------------------------------------------------------------------
# elementwise and shape ops
# ---------------------------------------------------------------------------


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def backward(g, ps):
        return (
            _reduce_param(g, a, ps) if a.requires_grad else None,
            _reduce_param(g, b, ps) if b.requires_grad else None,
        )

    return _finish(a.data + b.data, (a, b), backward)


def neg(a):
    a = as_tensor(a)
    return _finish(-a.data, (a,), lambda g, ps: (-g,))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def backward(g, ps):
        return (
            _reduce_param(g * b.data, a, ps) if a.requires_grad else None,
            _reduce_param(g * a.data, b, ps) if b.requires_grad else None,
        )

    return _finish(a.data * b.data, (a, b), backward)


def tsum(a, axis=None):
    a = as_tensor(a)

    def backward(g, ps):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _finish(a.data.sum(axis=axis), (a,), backward)


def reshape(a, shape):
    a = as_tensor(a)
    return _finish(a.data.reshape(shape), (a,), lambda g, ps: (g.reshape(a.shape),))


def getitem(a, index):
    a = as_tensor(a)

    def backward(g, ps):
        out = np.zeros(a.shape)
        np.add.at(out, index, g)
        return (out,)

    return _finish(a.data[index], (a,), backward)


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------


def dense(x, weight, bias=None):
    """``x @ weight.T + bias`` over the last axis of ``x``; weight is [out, in]."""
    x, weight = as_tensor(x), as_tensor(weight)
    if weight.ndim != 2:
        raise DimensionError(f"dense weight must be 2-D, got shape {weight.shape}")
    n_out, n_in = weight.shape
    if x.ndim < 1 or x.shape[-1] != n_in:
        raise DimensionError(f"dense input last dimension {x.shape[-1:]} does not match weight {weight.shape}")
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (n_out,):
            raise DimensionError(f"dense bias shape {bias.shape} != ({n_out},)")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def backward(g, ps):
        gx = g @ weight.data if x.requires_grad else None
        gw = gb = None
        if weight.requires_grad:
            if ps == "sq" and weight.is_param and x.ndim == 2:
                # per-sample gradient is an outer product, so its square factorizes
                gw = np.square(g).T @ np.square(x.data)
            elif _wants_batch(weight, ps):
                xb = x.data.reshape(x.shape[0] if x.ndim > 1 else 1, -1, n_in)
                gbt = g.reshape(xb.shape[0], -1, n_out)
                gw = _fold(np.matmul(gbt.transpose(0, 2, 1), xb), ps)
            else:
                gw = g.reshape(-1, n_out).T @ x.data.reshape(-1, n_in)
        if bias is not None and bias.requires_grad:
            if _wants_batch(bias, ps):
                gb = _fold(g.reshape(x.shape[0] if x.ndim > 1 else 1, -1, n_out).sum(axis=1), ps)
            else:
                gb = g.reshape(-1, n_out).sum(axis=0)
        return (gx, gw, gb)

    return _finish(out, inputs, backward)


def conv2d(x, kernels, stride=1, bias=None):
    """Valid cross-correlation of [C,H,W] or [B,C,H,W] input with [K,C,kh,kw] kernels."""
    x, kernels = as_tensor(x), as_tensor(kernels)
    if stride < 1 or int(stride) != stride:
        raise ParameterError(f"stride must be a positive integer, got {stride}")
    stride = int(stride)
    if kernels.ndim != 4:
        raise DimensionError(f"kernels must be [K,C,kh,kw], got {kernels.shape}")
    unbatched = x.ndim == 3
    if x.ndim not in (3, 4):
        raise DimensionError(f"conv2d input must be [C,H,W] or [B,C,H,W], got {x.shape}")
    xd = x.data[None] if unbatched else x.data
    B, C, H, W = xd.shape
    K, Ck, kh, kw = kernels.shape
    if Ck != C:
        raise DimensionError(f"kernel channels {Ck} != input channels {C}")
    if kh > H or kw > W:
        raise DimensionError(f"kernel {kh}x{kw} larger than input {H}x{W}")
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (K,):
            raise DimensionError(f"conv bias shape {bias.shape} != ({K},)")
    Ho = (H - kh) // stride + 1
    Wo = (W - kw) // stride + 1
    cols = _im2col(xd.transpose(0, 2, 3, 1), kh, kw, stride).reshape(B * Ho * Wo, -1)
    kflat = kernels.data.transpose(0, 2, 3, 1).reshape(K, -1)  # (kh, kw, C) order like cols
    out = (cols @ kflat.T).reshape(B, Ho, Wo, K).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    if unbatched:
        out = out[0]
    inputs = (x, kernels) if bias is None else (x, kernels, bias)

    def backward(g, ps):
        gb4 = g[None] if unbatched else g
        g_last = gb4.transpose(0, 2, 3, 1)
        g2 = g_last.reshape(B * Ho * Wo, K)
        gx = gk = gbias = None
        if x.requires_grad:
            if stride == 1:
                gx = _full_correlation(g_last, kernels.data)
            else:
                dcols = (g2 @ kflat).reshape(B, Ho, Wo, kh, kw, C)
                gx = np.zeros((B, H, W, C))
                hspan = stride * (Ho - 1) + 1
                wspan = stride * (Wo - 1) + 1
                for i in range(kh):
                    for j in range(kw):
                        gx[:, i:i + hspan:stride, j:j + wspan:stride] += dcols[:, :, :, i, j]
            gx = gx.transpose(0, 3, 1, 2)
            if unbatched:
                gx = gx[0]
        if kernels.requires_grad:
            if _wants_batch(kernels, ps):
                gk = np.matmul(g2.reshape(B, Ho * Wo, K).transpose(0, 2, 1), cols.reshape(B, Ho * Wo, -1))
                gk = _fold(gk.reshape(B, K, kh, kw, C).transpose(0, 1, 4, 2, 3), ps)
            else:
                gk = (g2.T @ cols).reshape(K, kh, kw, C).transpose(0, 3, 1, 2)
        if bias is not None and bias.requires_grad:
            gbias = _fold(gb4.sum(axis=(2, 3)), ps) if _wants_batch(bias, ps) else gb4.sum(axis=(0, 2, 3))
        return (gx, gk, gbias)

    return _finish(out, inputs, backward)


def _im2col(x_last, kh, kw, stride):
    """[B,H,W,C] channel-last input to [B,Ho,Wo,kh,kw,C] patches."""
    B, H, W, C = x_last.shape
    Ho = (H - kh) // stride + 1
    Wo = (W - kw) // stride + 1
    hspan = stride * (Ho - 1) + 1
    wspan = stride * (Wo - 1) + 1
    cols = np.empty((B, Ho, Wo, kh, kw, C))
    for i in range(kh):
        for j in range(kw):
            cols[:, :, :, i, j] = x_last[:, i:i + hspan:stride, j:j + wspan:stride]
    return cols


def _full_correlation(g_last, kernels):
    """Input gradient of a stride-1 valid correlation, channel-last [B,H,W,C]."""
    K, C, kh, kw = kernels.shape
    B, Ho, Wo, _ = g_last.shape
    gp = np.zeros((B, Ho + 2 * (kh - 1), Wo + 2 * (kw - 1), K))
    gp[:, kh - 1:kh - 1 + Ho, kw - 1:kw - 1 + Wo] = g_last
    cols = _im2col(gp, kh, kw, 1)
    H, W = cols.shape[1], cols.shape[2]
    flipped = kernels[:, :, ::-1, ::-1].transpose(2, 3, 0, 1).reshape(kh * kw * K, C)
    return (cols.reshape(B * H * W, -1) @ flipped).reshape(B, H, W, C)


def check_slope(slope):
    if not 0.0 < slope < 1.0:
        raise ParameterError(f"leaky ReLU slope must lie in (0, 1), got {slope}")


def leaky_relu(x, slope):
    check_slope(slope)
    x = as_tensor(x)
    pos = x.data > 0
    out = np.where(pos, x.data, slope * x.data)
    return _finish(out, (x,), lambda g, ps: (np.where(pos, g, slope * g),))


def softmax_cross_entropy(logits, labels, reduction="mean"):
    """Cross-entropy of softmax(logits) against integer class labels.

    ``logits`` is [M] with a scalar label, or [B, M] with a length-B label
    array. ``reduction`` is "mean", "sum" or "none" (batched only).
    """
    logits = as_tensor(logits)
    single = logits.ndim == 1
    z = logits.data[None] if single else logits.data
    if z.ndim != 2:
        raise DimensionError(f"logits must be [M] or [B,M], got {logits.shape}")
    B, M = z.shape
    if M < 2:
        raise DimensionError(f"need at least 2 classes, got {M}")
    lab = np.atleast_1d(np.asarray(labels))
    if lab.shape != (B,):
        raise DimensionError(f"labels shape {lab.shape} does not match batch {B}")
    if not np.issubdtype(lab.dtype, np.integer):
        if np.any(lab != np.floor(lab)):
            raise IndexError("labels must be integers")
        lab = lab.astype(np.int64)
    if np.any(lab < 0) or np.any(lab >= M):
        raise IndexError(f"label out of range [0, {M})")
    shifted = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(B)
    per = lse - shifted[rows, lab]
    if reduction == "mean":
        out, scale = per.mean(), 1.0 / B
    elif reduction == "sum":
        out, scale = per.sum(), 1.0
    elif reduction == "none":
        out, scale = (per[0] if single else per), None
    else:
        raise ParameterError(f"unknown reduction {reduction!r}")

    def backward(g, ps):
        p = np.exp(shifted - lse[:, None])
        p[rows, lab] -= 1.0
        if scale is None:
            p *= np.reshape(g, (B, 1))
        else:
            p *= float(np.reshape(g, -1)[0]) * scale
        return (p[0] if single else p,)

    return _finish(np.asarray(out), (logits,), backward)
