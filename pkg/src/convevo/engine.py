"""Array math for block-stacked convolutional classifiers.

All activations are NHWC numpy arrays. Each layer is a forward function plus
a matching gradient function; the gradient functions recompute whatever batch
statistics they need from their array arguments, so no opaque cache objects
travel between the two. float32 is the working precision for training, but
every function is dtype-polymorphic and exact in float64, which is what the
finite-difference tests rely on.

Convolutions use SAME zero padding with the asymmetric split (extra pixel on
the bottom/right when the total padding is odd) and output spatial size
ceil(in/stride). There is no convolution bias; the batch norm beta that
follows every convolution plays that role.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import LabelError, ShapeError

DEFAULT_DTYPE = np.float32
BN_EPSILON = 1e-5
BN_MOMENTUM = 0.9


def _same_padding(size: int, kernel: int, stride: int) -> tuple[int, int]:
    """Padding (before, after) for one spatial axis under SAME semantics."""
    out = -(-size // stride)
    total = max((out - 1) * stride + kernel - size, 0)
    before = total // 2
    return before, total - before


def _require_rank(name: str, arr: np.ndarray, rank: int) -> None:
    if arr.ndim != rank:
        raise ShapeError(f"{name} must have rank {rank}, got shape {arr.shape}")


# cap on the materialized patch matrix; batches above it run in slabs
_IM2COL_BUDGET_BYTES = 64 * 1024 * 1024


def conv2d(x: np.ndarray, kernel: np.ndarray, stride: int = 1) -> np.ndarray:
    """Convolve an NHWC batch with an HWIO kernel under SAME zero padding.

    Returns [N, ceil(H/stride), ceil(W/stride), F]. Each output row is one
    matmul row over an im2col patch matrix, materialized in batch slabs so
    peak extra memory stays under _IM2COL_BUDGET_BYTES; per-element summation
    order is fixed regardless of slab boundaries.
    """
    _require_rank("x", x, 4)
    _require_rank("kernel", kernel, 4)
    n, h, w, cin = x.shape
    kh, kw, kcin, f = kernel.shape
    if kh != kw:
        raise ShapeError(f"kernel must be square, got {kh}x{kw}")
    if kcin != cin:
        raise ShapeError(f"input has {cin} channels but kernel expects {kcin}")
    if stride < 1:
        raise ShapeError(f"stride must be positive, got {stride}")

    ho = -(-h // stride)
    wo = -(-w // stride)
    pt, pb = _same_padding(h, kh, stride)
    pl, pr = _same_padding(w, kw, stride)
    xp = np.pad(x, ((0, 0), (pt, pb), (pl, pr), (0, 0))) if (pt or pb or pl or pr) else x

    # SAME padding makes the last window start land exactly at Hp-kh, so the
    # stride subsample of all window positions has exactly ho x wo entries
    windows = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))[
        :, ::stride, ::stride
    ]
    kflat = kernel.reshape(kh * kw * cin, f)
    out = np.empty((n, ho, wo, f), dtype=x.dtype)
    per_example = max(1, ho * wo * kh * kw * cin * x.dtype.itemsize)
    slab = max(1, _IM2COL_BUDGET_BYTES // per_example)
    for start in range(0, n, slab):
        stop = min(n, start + slab)
        patches = windows[start:stop].transpose(0, 1, 2, 4, 5, 3).reshape(
            (stop - start) * ho * wo, kh * kw * cin
        )
        out[start:stop] = (patches @ kflat).reshape(stop - start, ho, wo, f)
    return out


def conv2d_grad(
    dout: np.ndarray, x: np.ndarray, kernel: np.ndarray, stride: int = 1
) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of conv2d with respect to its input and kernel.

    dout must have the forward output shape for (x, kernel, stride).
    Returns (dx, dkernel) with the shapes of x and kernel.
    """
    _require_rank("dout", dout, 4)
    _require_rank("x", x, 4)
    _require_rank("kernel", kernel, 4)
    n, h, w, cin = x.shape
    kh, kw, kcin, f = kernel.shape
    if kcin != cin:
        raise ShapeError(f"input has {cin} channels but kernel expects {kcin}")
    ho = -(-h // stride)
    wo = -(-w // stride)
    if dout.shape != (n, ho, wo, f):
        raise ShapeError(
            f"dout shape {dout.shape} does not match forward output {(n, ho, wo, f)}"
        )

    pt, pb = _same_padding(h, kh, stride)
    pl, pr = _same_padding(w, kw, stride)
    padded = bool(pt or pb or pl or pr)
    xp = np.pad(x, ((0, 0), (pt, pb), (pl, pr), (0, 0))) if padded else x

    windows = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))[
        :, ::stride, ::stride
    ]
    kflat = kernel.reshape(kh * kw * cin, f)
    dxp = np.zeros_like(xp)
    dk_flat = np.zeros((kh * kw * cin, f), dtype=kernel.dtype)
    hi = (ho - 1) * stride + 1
    wi = (wo - 1) * stride + 1
    per_example = max(1, ho * wo * kh * kw * cin * x.dtype.itemsize)
    slab = max(1, _IM2COL_BUDGET_BYTES // per_example)
    for start in range(0, n, slab):
        stop = min(n, start + slab)
        span = stop - start
        patches = windows[start:stop].transpose(0, 1, 2, 4, 5, 3).reshape(
            span * ho * wo, kh * kw * cin
        )
        do_slab = dout[start:stop].reshape(span * ho * wo, f)
        dk_flat += patches.T @ do_slab
        dpatches = (do_slab @ kflat.T).reshape(span, ho, wo, kh, kw, cin)
        for ky in range(kh):
            rows = slice(ky, ky + hi, stride)
            for kx in range(kw):
                cols = slice(kx, kx + wi, stride)
                dxp[start:stop, rows, cols, :] += dpatches[:, :, :, ky, kx, :]
    dx = dxp[:, pt:pt + h, pl:pl + w, :] if padded else dxp
    return np.ascontiguousarray(dx), dk_flat.reshape(kh, kw, cin, f)


def batchnorm(
    x: np.ndarray,
    gamma: np.ndarray,
    beta: np.ndarray,
    run_mean: np.ndarray,
    run_var: np.ndarray,
    mode: str,
    eps: float = BN_EPSILON,
    momentum: float = BN_MOMENTUM,
) -> np.ndarray:
    """Per-channel batch normalization over the N, H, W axes.

    mode "train" normalizes with the batch mean and biased batch variance and
    folds them into run_mean/run_var in place (running = momentum * running +
    (1 - momentum) * batch). mode "infer" normalizes with the running
    estimates and leaves them untouched.
    """
    _require_rank("x", x, 4)
    c = x.shape[3]
    for name, arr in (("gamma", gamma), ("beta", beta),
                      ("run_mean", run_mean), ("run_var", run_var)):
        if arr.shape != (c,):
            raise ShapeError(f"{name} must have shape ({c},), got {arr.shape}")

    if mode == "train":
        if x.shape[0] * x.shape[1] * x.shape[2] < 2:
            raise ShapeError("batch statistics need at least 2 values per channel")
        mean = x.mean(axis=(0, 1, 2))
        var = x.var(axis=(0, 1, 2))
        run_mean[:] = momentum * run_mean + (1.0 - momentum) * mean
        run_var[:] = momentum * run_var + (1.0 - momentum) * var
    elif mode == "infer":
        mean = run_mean
        var = run_var
    else:
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    inv = 1.0 / np.sqrt(var + eps)
    return (gamma * inv) * (x - mean) + beta


def batchnorm_grad(
    dout: np.ndarray, x: np.ndarray, gamma: np.ndarray, eps: float = BN_EPSILON
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Train-mode gradients of batchnorm: (dx, dgamma, dbeta).

    Recomputes the batch statistics from x; valid for the training path only
    (inference-mode normalization is an affine map with constant statistics).
    """
    _require_rank("dout", dout, 4)
    _require_rank("x", x, 4)
    if dout.shape != x.shape:
        raise ShapeError(f"dout shape {dout.shape} does not match x shape {x.shape}")
    m = x.shape[0] * x.shape[1] * x.shape[2]
    mean = x.mean(axis=(0, 1, 2))
    var = x.var(axis=(0, 1, 2))
    inv = 1.0 / np.sqrt(var + eps)

    dbeta = dout.sum(axis=(0, 1, 2))
    # sum(dout * xhat) from raw moments; float64 accumulation, no N-sized temp
    g1 = np.einsum("nhwc,nhwc->c", dout, x, dtype=np.float64)
    dgamma = ((g1 - mean.astype(np.float64) * dbeta) * inv).astype(gamma.dtype)

    # the textbook dx = (inv/m)(m*dxhat - sum(dxhat) - xhat*sum(dxhat*xhat))
    # collapses to a*dout - c*x + e with per-channel constants, since
    # sum(dxhat) = gamma*dbeta and sum(dxhat*xhat) = gamma*dgamma
    a = gamma * inv
    c = gamma * dgamma * inv * inv / m
    e = c * mean - a * dbeta / m
    dx = dout * a
    dx -= x * c
    dx += e
    return dx.astype(x.dtype, copy=False), dgamma, dbeta


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_grad(dout: np.ndarray, x: np.ndarray) -> np.ndarray:
    if dout.shape != x.shape:
        raise ShapeError(f"dout shape {dout.shape} does not match x shape {x.shape}")
    return dout * (x > 0)


def gap(x: np.ndarray) -> np.ndarray:
    """Global average pooling: [N, H, W, C] -> [N, C]."""
    _require_rank("x", x, 4)
    return x.mean(axis=(1, 2))


def gap_grad(dout: np.ndarray, x_shape: tuple[int, ...]) -> np.ndarray:
    n, h, w, c = x_shape
    if dout.shape != (n, c):
        raise ShapeError(f"dout shape {dout.shape} does not match pooled shape {(n, c)}")
    scale = 1.0 / (h * w)
    return np.broadcast_to(dout[:, None, None, :] * scale, x_shape).astype(
        dout.dtype, copy=True
    )


def dense(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Affine layer: [N, Cin] @ [Cin, Cout] + [Cout]."""
    _require_rank("x", x, 2)
    _require_rank("w", w, 2)
    if x.shape[1] != w.shape[0]:
        raise ShapeError(f"x has width {x.shape[1]} but w expects {w.shape[0]}")
    if b.shape != (w.shape[1],):
        raise ShapeError(f"b must have shape ({w.shape[1]},), got {b.shape}")
    return x @ w + b


def dense_grad(
    dout: np.ndarray, x: np.ndarray, w: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    if dout.shape != (x.shape[0], w.shape[1]):
        raise ShapeError(
            f"dout shape {dout.shape} does not match output {(x.shape[0], w.shape[1])}"
        )
    dx = dout @ w.T
    dw = x.T @ dout
    db = dout.sum(axis=0)
    return dx, dw, db


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax with max subtraction for overflow safety."""
    _require_rank("logits", logits, 2)
    z = logits - logits.max(axis=1, keepdims=True)
    ez = np.exp(z)
    return ez / ez.sum(axis=1, keepdims=True)


def softmax_xent(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy loss and its gradient on the logits.

    labels is an integer vector in [0, num_classes). The loss is computed in
    log-sum-exp form so it stays finite for any finite logits.
    """
    _require_rank("logits", logits, 2)
    labels = np.asarray(labels)
    n, classes = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"labels must have shape ({n},), got {labels.shape}")
    if not np.issubdtype(labels.dtype, np.integer):
        raise LabelError(f"labels must be integers, got dtype {labels.dtype}")
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        raise LabelError(
            f"labels must lie in [0, {classes}), got range "
            f"[{labels.min()}, {labels.max()}]"
        )

    z = logits - logits.max(axis=1, keepdims=True)
    ez = np.exp(z)
    sum_ez = ez.sum(axis=1)
    loss = float(np.mean(np.log(sum_ez) - z[np.arange(n), labels]))
    dlogits = ez / sum_ez[:, None]
    dlogits[np.arange(n), labels] -= 1.0
    dlogits /= n
    return loss, dlogits.astype(logits.dtype, copy=False)


def glorot_init(
    shape: tuple[int, ...],
    fan_in: int,
    fan_out: int,
    rng: np.random.Generator,
    dtype=DEFAULT_DTYPE,
) -> np.ndarray:
    """Glorot uniform draw on [-L, L], L = sqrt(6 / (fan_in + fan_out))."""
    if fan_in < 1 or fan_out < 1:
        raise ShapeError(f"fans must be positive, got ({fan_in}, {fan_out})")
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


@dataclass
class AdamState:
    """Adam optimizer state for a fixed list of parameter tensors."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    t: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def for_params(cls, params: list[np.ndarray], lr: float = 1e-3, **kwargs) -> "AdamState":
        state = cls(lr=lr, **kwargs)
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
        return state


def adam_step(params: list[np.ndarray], grads: list[np.ndarray], state: AdamState) -> None:
    """One Adam update, applied to each parameter tensor in place.

    Published form: theta -= lr * mhat / (sqrt(vhat) + epsilon) with bias
    correction on both moments. Each tensor is updated independently.
    """
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ShapeError(
            f"got {len(params)} params, {len(grads)} grads, {len(state.m)} moments"
        )
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise ShapeError(f"param shape {p.shape} does not match grad {g.shape}")
    state.t += 1
    bias1 = 1.0 - state.beta1 ** state.t
    bias2 = 1.0 - state.beta2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m[...] = state.beta1 * m + (1.0 - state.beta1) * g
        v[...] = state.beta2 * v + (1.0 - state.beta2) * (g * g)
        mhat = m / bias1
        vhat = v / bias2
        p -= (state.lr * mhat / (np.sqrt(vhat) + state.epsilon)).astype(p.dtype, copy=False)
