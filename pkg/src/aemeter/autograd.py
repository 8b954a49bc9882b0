"""Minimal reverse-mode autodiff engine for the metering network.

Tensors wrap float64 numpy arrays and record their producing operation on an
implicit tape (monotonic node ids give the topological order). Only the ops
the metering network needs are provided; there is no broadcasting beyond what
those ops require. All forward math is double precision.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Tensor",
    "ParamSet",
    "ShapeError",
    "constant",
    "parameter",
    "add",
    "sub",
    "scale",
    "elementwise_mul",
    "square",
    "mean",
    "weighted_mean",
    "activation",
    "relu",
    "tanh",
    "sigmoid",
    "conv2d",
    "maxpool2d",
    "concat_channels",
    "global_avg_pool",
    "dropout",
    "backward",
    "SgdSpec",
    "AdamSpec",
    "optimizer_step",
    "grad_check",
    "GradCheckReport",
]


class ShapeError(ValueError):
    """Raised when an op receives tensors with incompatible shapes."""


_node_counter = itertools.count()


class Tensor:
    """Node in the differentiation graph.

    `data` is always a float64 ndarray. Non-leaf tensors keep references to
    their parents and a closure that routes the output gradient backward.
    """

    __slots__ = ("data", "grad", "requires_grad", "node_id", "_parents",
                 "_backward", "_grad_borrowed")

    def __init__(self, data, requires_grad=False, parents=(), backward_fn=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self.node_id = next(_node_counter)
        self._parents = tuple(parents)
        self._backward = backward_fn
        self._grad_borrowed = False

    @property
    def shape(self):
        return self.data.shape

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, id={self.node_id})"


def constant(data):
    return Tensor(data, requires_grad=False)


def parameter(data):
    return Tensor(data, requires_grad=True)


def _accumulate(t, g):
    # First contribution borrows the array (no copy); a second contribution
    # forces an owned copy so shared/viewed gradients are never mutated.
    if t.grad is None:
        t.grad = g
        t._grad_borrowed = True
    elif t._grad_borrowed:
        t.grad = t.grad + g
        t._grad_borrowed = False
    else:
        t.grad += g


# ---------------------------------------------------------------------------
# elementwise ops

def add(a, b):
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes {a.shape} vs {b.shape}")

    def bw(out):
        _accumulate(a, out.grad)
        _accumulate(b, out.grad)

    return Tensor(a.data + b.data, parents=(a, b), backward_fn=bw)


def sub(a, b):
    if a.shape != b.shape:
        raise ShapeError(f"sub: shapes {a.shape} vs {b.shape}")

    def bw(out):
        _accumulate(a, out.grad)
        _accumulate(b, -out.grad)

    return Tensor(a.data - b.data, parents=(a, b), backward_fn=bw)


def scale(a, s):
    s = float(s)

    def bw(out):
        _accumulate(a, out.grad * s)

    return Tensor(a.data * s, parents=(a,), backward_fn=bw)


def elementwise_mul(a, b):
    if a.shape != b.shape:
        raise ShapeError(f"elementwise_mul: shapes {a.shape} vs {b.shape}")

    def bw(out):
        _accumulate(a, out.grad * b.data)
        _accumulate(b, out.grad * a.data)

    return Tensor(a.data * b.data, parents=(a, b), backward_fn=bw)


def square(a):
    def bw(out):
        _accumulate(a, out.grad * 2.0 * a.data)

    return Tensor(a.data * a.data, parents=(a,), backward_fn=bw)


def mean(a):
    n = a.data.size

    def bw(out):
        _accumulate(a, np.full(a.shape, out.grad / n))

    return Tensor(a.data.mean(), parents=(a,), backward_fn=bw)


def weighted_mean(a, weights):
    """Scalar sum(w_i * a_i) / len(a); weights are constants."""
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != a.shape:
        raise ShapeError(f"weighted_mean: shapes {a.shape} vs {w.shape}")
    n = a.data.size

    def bw(out):
        _accumulate(a, w * (out.grad / n))

    return Tensor(float((w * a.data).sum() / n), parents=(a,), backward_fn=bw)


# ---------------------------------------------------------------------------
# activations

def tanh(a):
    y = np.tanh(a.data)

    def bw(out):
        _accumulate(a, out.grad * (1.0 - y * y))

    return Tensor(y, parents=(a,), backward_fn=bw)


def sigmoid(a):
    y = 1.0 / (1.0 + np.exp(-a.data))

    def bw(out):
        _accumulate(a, out.grad * y * (1.0 - y))

    return Tensor(y, parents=(a,), backward_fn=bw)


def relu(a):
    mask = a.data > 0

    def bw(out):
        _accumulate(a, out.grad * mask)

    return Tensor(np.where(mask, a.data, 0.0), parents=(a,), backward_fn=bw)


_ACTIVATIONS = {"tanh": tanh, "sigmoid": sigmoid, "relu": relu}


def activation(a, kind):
    try:
        fn = _ACTIVATIONS[kind]
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}") from None
    return fn(a)


# ---------------------------------------------------------------------------
# spatial ops (accept (C,H,W) or batched (N,C,H,W))

def _as_batched(a):
    if a.data.ndim == 3:
        return a.data[None], True
    if a.data.ndim == 4:
        return a.data, False
    raise ShapeError(f"expected 3D or 4D input, got shape {a.shape}")


def conv2d(x, weight, bias, stride=1, pad=0):
    """2D cross-correlation. weight: (C_out, C_in, kH, kW), bias: (C_out,)."""
    xd, squeeze = _as_batched(x)
    n, cin, h, w = xd.shape
    if weight.data.ndim != 4:
        raise ShapeError(f"conv2d: weight must be 4D, got {weight.shape}")
    cout, cin_w, kh, kw = weight.data.shape
    if cin_w != cin:
        raise ShapeError(f"conv2d: input channels {cin} != weight in-channels {cin_w}")
    if bias.data.shape != (cout,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({cout},)")
    if stride < 1:
        raise ShapeError(f"conv2d: stride must be >= 1, got {stride}")
    hp, wp = h + 2 * pad, w + 2 * pad
    if kh > hp or kw > wp:
        raise ShapeError(
            f"conv2d: kernel ({kh},{kw}) larger than padded input ({hp},{wp})"
        )
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1

    if kh == 1 and kw == 1 and stride == 1 and pad == 0:
        return _conv1x1(x, xd, squeeze, weight, bias, n, cin, cout, h, w)

    if pad:
        xp = np.zeros((n, cin, hp, wp))
        xp[:, :, pad:pad + h, pad:pad + w] = xd
    else:
        xp = xd

    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]                  # (n, cin, ho, wo, kh, kw)
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, cin * kh * kw)
    wmat = weight.data.reshape(cout, cin * kh * kw)
    out = cols @ wmat.T + bias.data
    out = out.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2)
    if squeeze:
        out = out[0]

    def bw(o):
        g = o.grad
        if squeeze:
            g = g[None]
        gcols = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(
            n * ho * wo, cout)
        _accumulate(weight, (gcols.T @ cols).reshape(weight.data.shape))
        _accumulate(bias, gcols.sum(axis=0))
        if x.requires_grad or x._parents:
            dcols = gcols @ wmat                          # (n*ho*wo, cin*kh*kw)
            dwin = dcols.reshape(n, ho, wo, cin, kh, kw)
            dxp = np.zeros((n, cin, hp, wp))
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i:i + ho * stride:stride,
                        j:j + wo * stride:stride] += (
                        dwin[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                    )
            dx = dxp[:, :, pad:pad + h, pad:pad + w] if pad else dxp
            _accumulate(x, dx[0] if squeeze else dx)

    return Tensor(out, parents=(x, weight, bias), backward_fn=bw)


def _conv1x1(x, xd, squeeze, weight, bias, n, cin, cout, h, w):
    """Pointwise convolution without im2col: batched channel matmul."""
    wmat = weight.data.reshape(cout, cin)
    xflat = xd.reshape(n, cin, h * w)
    out = np.matmul(wmat, xflat) + bias.data[:, None]
    out = out.reshape(n, cout, h, w)
    if squeeze:
        out = out[0]

    def bw(o):
        g = o.grad
        if squeeze:
            g = g[None]
        gflat = g.reshape(n, cout, h * w)
        _accumulate(weight, np.tensordot(gflat, xflat, axes=([0, 2], [0, 2]))
                    .reshape(weight.data.shape))
        _accumulate(bias, gflat.sum(axis=(0, 2)))
        if x.requires_grad or x._parents:
            dx = np.matmul(wmat.T, gflat).reshape(n, cin, h, w)
            _accumulate(x, dx[0] if squeeze else dx)

    return Tensor(out, parents=(x, weight, bias), backward_fn=bw)


def maxpool2d(x, k, stride):
    """Windowed max; gradient goes to the first max in row-major window order.

    The window argmax (needed only for the gradient) is computed lazily so
    eval-mode forwards skip it entirely.
    """
    xd, squeeze = _as_batched(x)
    n, c, h, w = xd.shape
    if k > h or k > w:
        raise ShapeError(f"maxpool2d: window {k} larger than input ({h},{w})")
    ho = (h - k) // stride + 1
    wo = (w - k) // stride + 1

    def windows():
        win = np.lib.stride_tricks.sliding_window_view(xd, (k, k), axis=(2, 3))
        return win[:, :, ::stride, ::stride].reshape(n, c, ho, wo, k * k)

    if k == stride:
        # non-overlapping: a plain reshape suffices for the forward max
        trim = xd[:, :, :ho * k, :wo * k]
        out = trim.reshape(n, c, ho, k, wo, k).max(axis=(3, 5))
    else:
        out = windows().max(axis=-1)
    if squeeze:
        out = out[0]

    def bw(o):
        g = o.grad
        if squeeze:
            g = g[None]
        arg = windows().argmax(axis=-1)     # first occurrence on ties
        dx = np.zeros((n, c, h, w))
        if k == stride:
            buf = np.zeros((n, c, ho, wo, k * k))
            np.put_along_axis(buf, arg[..., None], g[..., None], axis=-1)
            dx[:, :, :ho * k, :wo * k] = (
                buf.reshape(n, c, ho, wo, k, k)
                .transpose(0, 1, 2, 4, 3, 5)
                .reshape(n, c, ho * k, wo * k)
            )
        else:
            ni, ci, oi, oj = np.ogrid[0:n, 0:c, 0:ho, 0:wo]
            hi = oi * stride + arg // k
            wi = oj * stride + arg % k
            np.add.at(dx, (ni, ci, hi, wi), g)
        _accumulate(x, dx[0] if squeeze else dx)

    return Tensor(out, parents=(x,), backward_fn=bw)


def concat_channels(a, b):
    ad, sa = _as_batched(a)
    bd, sb = _as_batched(b)
    if sa != sb:
        raise ShapeError("concat_channels: mixed batched/unbatched inputs")
    if ad.shape[2:] != bd.shape[2:] or ad.shape[0] != bd.shape[0]:
        raise ShapeError(
            f"concat_channels: spatial/batch mismatch {a.shape} vs {b.shape}"
        )
    ca = ad.shape[1]
    out = np.concatenate([ad, bd], axis=1)
    if sa:
        out = out[0]

    def bw(o):
        g = o.grad
        if sa:
            g = g[None]
        _accumulate(a, g[:, :ca][0] if sa else g[:, :ca])
        _accumulate(b, g[:, ca:][0] if sa else g[:, ca:])

    return Tensor(out, parents=(a, b), backward_fn=bw)


def global_avg_pool(x):
    """(C,H,W) -> (C,) or (N,C,H,W) -> (N,C): per-channel spatial mean."""
    xd, squeeze = _as_batched(x)
    n, c, h, w = xd.shape
    out = xd.mean(axis=(2, 3))
    if squeeze:
        out = out[0]

    def bw(o):
        g = o.grad
        if squeeze:
            g = g[None]
        _accumulate(x, np.broadcast_to((g / (h * w))[:, :, None, None],
                                       xd.shape)[0] if squeeze else
                    np.broadcast_to((g / (h * w))[:, :, None, None], xd.shape))

    return Tensor(out, parents=(x,), backward_fn=bw)


def dropout(x, ratio, mode, rng=None):
    """Inverted dropout: eval mode is the identity."""
    if not 0.0 <= ratio < 1.0:
        raise ValueError(f"dropout ratio must be in [0,1), got {ratio}")
    if mode == "eval" or ratio == 0.0:
        def bw_id(o):
            _accumulate(x, o.grad)
        return Tensor(x.data.copy(), parents=(x,), backward_fn=bw_id)
    if mode != "train":
        raise ValueError(f"dropout mode must be 'train' or 'eval', got {mode!r}")
    if rng is None:
        raise ValueError("dropout in train mode requires an rng")
    keep = rng.random(x.shape) >= ratio
    factor = keep / (1.0 - ratio)

    def bw(o):
        _accumulate(x, o.grad * factor)

    return Tensor(x.data * factor, parents=(x,), backward_fn=bw)


# ---------------------------------------------------------------------------
# backward pass

def backward(seed):
    """Run reverse-mode accumulation from a scalar seed tensor.

    Visits every reachable node exactly once, in descending node-id order
    (reverse topological order by construction). Leaf gradients stay on the
    tensors' `.grad` fields.
    """
    if seed.data.size != 1:
        raise ValueError(f"backward seed must be scalar, got shape {seed.shape}")
    order = []
    seen = set()
    stack = [seed]
    while stack:
        t = stack.pop()
        if id(t) in seen:
            continue
        seen.add(id(t))
        order.append(t)
        stack.extend(t._parents)
    order.sort(key=lambda t: t.node_id, reverse=True)
    seed.grad = np.ones_like(seed.data)
    for t in order:
        if t._backward is not None and t.grad is not None:
            t._backward(t)
    return seed


# ---------------------------------------------------------------------------
# parameters and optimizers

class ParamSet:
    """Named parameter map with per-parameter optimizer state.

    Iteration order is deterministic (sorted by path).
    """

    def __init__(self, params=None):
        self._params = {}
        self.state = {}
        if params:
            for name, value in params.items():
                self.add(name, value)

    def add(self, name, value):
        if name in self._params:
            raise ValueError(f"duplicate parameter {name!r}")
        t = value if isinstance(value, Tensor) else parameter(value)
        t.requires_grad = True
        self._params[name] = t

    def names(self):
        return sorted(self._params)

    def __getitem__(self, name):
        return self._params[name]

    def __contains__(self, name):
        return name in self._params

    def __len__(self):
        return len(self._params)

    def items(self):
        for name in self.names():
            yield name, self._params[name]

    def zero_grad(self):
        for _, t in self.items():
            t.grad = None

    def grads(self):
        """Collect accumulated gradients; missing gradients are zeros."""
        out = {}
        for name, t in self.items():
            out[name] = t.grad if t.grad is not None else np.zeros_like(t.data)
        return out

    def copy(self):
        ps = ParamSet()
        for name, t in self.items():
            ps.add(name, t.data.copy())
        ps.state = {
            k: {sk: (sv.copy() if isinstance(sv, np.ndarray) else sv)
                for sk, sv in v.items()}
            for k, v in self.state.items()
        }
        return ps


@dataclass
class SgdSpec:
    lr: float
    momentum: float = 0.0
    weight_decay: float = 0.0


@dataclass
class AdamSpec:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def optimizer_step(params, grads, spec):
    """In-place SGD-with-momentum or Adam update over a ParamSet."""
    for name in params.names():
        if name not in grads:
            raise KeyError(f"missing gradient for parameter {name!r}")
    if isinstance(spec, SgdSpec):
        for name, t in params.items():
            g = grads[name]
            st = params.state.setdefault(name, {})
            v = st.get("momentum")
            if v is None:
                v = np.zeros_like(t.data)
            v = spec.momentum * v + g + spec.weight_decay * t.data
            st["momentum"] = v
            t.data -= spec.lr * v
    elif isinstance(spec, AdamSpec):
        for name, t in params.items():
            g = grads[name]
            st = params.state.setdefault(name, {})
            m = st.get("adam_m")
            v = st.get("adam_v")
            step = st.get("adam_step", 0)
            if m is None:
                m = np.zeros_like(t.data)
                v = np.zeros_like(t.data)
            step += 1
            m = spec.beta1 * m + (1 - spec.beta1) * g
            v = spec.beta2 * v + (1 - spec.beta2) * g * g
            mhat = m / (1 - spec.beta1 ** step)
            vhat = v / (1 - spec.beta2 ** step)
            t.data -= spec.lr * mhat / (np.sqrt(vhat) + spec.eps)
            st["adam_m"] = m
            st["adam_v"] = v
            st["adam_step"] = step
    else:
        raise TypeError(f"unknown optimizer spec {spec!r}")
    return params


# ---------------------------------------------------------------------------
# gradient checking

@dataclass
class GradCheckReport:
    max_rel_error: float
    per_param: dict = field(default_factory=dict)
    tolerance: float = 0.0

    @property
    def passed(self):
        return self.max_rel_error <= self.tolerance


def _rel_error(a, n):
    return abs(a - n) / max(1e-8, abs(a) + abs(n))


def grad_check(subject, params, tolerance=1e-4, h=1e-4):
    """Compare analytic gradients of `subject()` against central differences.

    `subject` must be a deterministic scalar-valued function of the ParamSet
    (run dropout in eval mode, fix any rng). Rejects non-deterministic
    subjects by comparing two forward evaluations.
    """
    v1 = subject().item()
    v2 = subject().item()
    if v1 != v2:
        raise ValueError("grad_check: subject is not deterministic "
                         f"({v1!r} != {v2!r})")
    params.zero_grad()
    backward(subject())
    analytic = params.grads()

    report = GradCheckReport(0.0, {}, tolerance)
    for name, t in params.items():
        worst = 0.0
        flat = t.data.ravel()
        aflat = analytic[name].ravel()
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + h
            fp = subject().item()
            flat[idx] = orig - h
            fm = subject().item()
            flat[idx] = orig
            numeric = (fp - fm) / (2 * h)
            worst = max(worst, _rel_error(aflat[idx], numeric))
        report.per_param[name] = {"max_rel_error": worst, "pass": worst <= tolerance}
        report.max_rel_error = max(report.max_rel_error, worst)
    return report
