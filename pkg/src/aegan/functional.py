"""Differentiable neural-network primitives built on :mod:`aegan.tensor`.

Convolutions use an im2col layout: k*k strided slices of the padded,
channels-last input are copied into a ``(B*Ho*Wo, k*k*C)`` row buffer so each
convolution is a single GEMM against the flattened kernel.  ``col2im`` is the adjoint scatter-add.
"""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, as_tensor, make_result

__all__ = [
    "conv_output_size",
    "conv_transpose_output_size",
    "conv2d",
    "conv_transpose2d",
    "batch_norm",
    "leaky_relu",
    "relu",
    "tanh",
    "sigmoid",
    "linear",
    "l1_loss",
    "bce_with_logits",
    "log_softmax",
    "cross_entropy",
    "avg_pool_global",
]


def conv_output_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def conv_transpose_output_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size - 1) * stride - 2 * padding + k


def _pad_nhwc(x: np.ndarray, padding: int) -> np.ndarray:
    """(B, C, H, W) -> zero-padded channels-last copy (B, H+2p, W+2p, C)."""
    b, c, h, w = x.shape
    out = np.zeros((b, h + 2 * padding, w + 2 * padding, c), dtype=x.dtype)
    out[:, padding : padding + h, padding : padding + w, :] = x.transpose(0, 2, 3, 1)
    return out


def _im2col(x: np.ndarray, k: int, stride: int, padding: int) -> tuple[np.ndarray, int, int]:
    """(B, C, H, W) -> rows (B*Ho*Wo, k*k*C), one receptive field per row."""
    b, c, h, w = x.shape
    ho = conv_output_size(h, k, stride, padding)
    wo = conv_output_size(w, k, stride, padding)
    xp = _pad_nhwc(x, padding)
    rows = np.empty((b, ho, wo, k, k, c), dtype=x.dtype)
    span_h = stride * (ho - 1) + 1
    span_w = stride * (wo - 1) + 1
    for i in range(k):
        for j in range(k):
            rows[:, :, :, i, j, :] = xp[:, i : i + span_h : stride, j : j + span_w : stride, :]
    return rows.reshape(b * ho * wo, k * k * c), ho, wo


def _col2im(
    rows: np.ndarray, shape: tuple[int, int, int, int], k: int, stride: int, padding: int, ho: int, wo: int
) -> np.ndarray:
    """Adjoint of :func:`_im2col`: scatter-add rows (B*Ho*Wo, k*k*C) back to (B, C, H, W)."""
    b, c, h, w = shape
    rows = rows.reshape(b, ho, wo, k, k, c)
    out = np.zeros((b, h + 2 * padding, w + 2 * padding, c), dtype=rows.dtype)
    span_h = stride * (ho - 1) + 1
    span_w = stride * (wo - 1) + 1
    for i in range(k):
        for j in range(k):
            out[:, i : i + span_h : stride, j : j + span_w : stride, :] += rows[:, :, :, i, j, :]
    out = out[:, padding : padding + h, padding : padding + w, :]
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def _to_rows(x: np.ndarray) -> np.ndarray:
    """(B, C, H, W) -> (B*H*W, C)."""
    b, c, h, w = x.shape
    return np.ascontiguousarray(x.transpose(0, 2, 3, 1)).reshape(b * h * w, c)


def _from_rows(m: np.ndarray, b: int, h: int, w: int) -> np.ndarray:
    """(B*H*W, C) -> (B, C, H, W)."""
    return np.ascontiguousarray(m.reshape(b, h, w, -1).transpose(0, 3, 1, 2))


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-d cross-correlation. ``x``: (B, Cin, H, W); ``weight``: (Cout, Cin, k, k)."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError(f"conv2d expects 4-d input and weight, got {x.shape} and {weight.shape}")
    b, cin, h, w = x.shape
    cout, wcin, k, k2 = weight.shape
    if cin != wcin:
        raise ValueError(
            f"conv2d channel mismatch: input {x.shape} has {cin} channels, weight {weight.shape} expects {wcin}"
        )
    if k != k2:
        raise ValueError(f"conv2d expects square kernels, got {weight.shape}")
    if h + 2 * padding < k or w + 2 * padding < k:
        raise ValueError(f"conv2d kernel {k} larger than padded input {x.shape} (padding {padding})")

    rows, ho, wo = _im2col(x.data, k, stride, padding)
    # (k*k*Cin, Cout), matching the row layout of the receptive fields
    wmat = np.ascontiguousarray(weight.data.transpose(2, 3, 1, 0)).reshape(-1, cout)
    out = rows @ wmat
    if bias is not None:
        out += bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        gmat = _to_rows(g)
        gx = gw = gb = None
        if x.requires_grad:
            gx = _col2im(gmat @ wmat.T, x.shape, k, stride, padding, ho, wo)
        if weight.requires_grad:
            gw = (rows.T @ gmat).reshape(k, k, cin, cout).transpose(3, 2, 0, 1)
        if bias is not None and bias.requires_grad:
            gb = gmat.sum(axis=0)
        return gx, gw, gb

    return make_result(_from_rows(out, b, ho, wo), parents, backward)


def conv_transpose2d(
    x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0
) -> Tensor:
    """Transposed convolution (the input-gradient map of :func:`conv2d`).

    ``weight`` has shape (Cin, Cout, k, k), matching the conv2d kernel it is the adjoint of.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError(f"conv_transpose2d expects 4-d input and weight, got {x.shape} and {weight.shape}")
    b, cin, h, w = x.shape
    wcin, cout, k, _ = weight.shape
    if cin != wcin:
        raise ValueError(
            f"conv_transpose2d channel mismatch: input {x.shape} has {cin} channels, "
            f"weight {weight.shape} expects {wcin}"
        )
    ho = conv_transpose_output_size(h, k, stride, padding)
    wo = conv_transpose_output_size(w, k, stride, padding)
    if ho <= 0 or wo <= 0:
        raise ValueError(f"conv_transpose2d produces empty output for input {x.shape}")

    xmat = _to_rows(x.data)
    # (Cin, k*k*Cout)
    wmat = np.ascontiguousarray(weight.data.transpose(0, 2, 3, 1)).reshape(cin, -1)
    out = _col2im(xmat @ wmat, (b, cout, ho, wo), k, stride, padding, h, w)
    if bias is not None:
        out += bias.data[None, :, None, None]
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        grows, _, _ = _im2col(g, k, stride, padding)
        gx = gw = gb = None
        if x.requires_grad:
            gx = _from_rows(grows @ wmat.T, b, h, w)
        if weight.requires_grad:
            gw = (xmat.T @ grows).reshape(cin, k, k, cout).transpose(0, 3, 1, 2)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return gx, gw, gb

    return make_result(out, parents, backward)


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray | None = None,
    running_var: np.ndarray | None = None,
    training: bool = True,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel normalization over (B, H, W) for 4-d input or over B for 2-d input.

    In training mode the running buffers (if given) are updated in place by an
    exponential moving average with the unbiased batch variance.
    """
    x = as_tensor(x)
    axes = (0, 2, 3) if x.ndim == 4 else (0,)
    bshape = (1, -1, 1, 1) if x.ndim == 4 else (1, -1)
    count = x.size // x.shape[1]
    if training:
        if x.shape[0] == 0:
            raise ValueError("batch_norm in training mode needs a non-empty batch")
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        if running_mean is not None:
            unbiased = var * count / max(count - 1, 1)
            running_mean *= 1 - momentum
            running_mean += momentum * mean
            running_var *= 1 - momentum
            running_var += momentum * unbiased
    else:
        if running_mean is None or running_var is None:
            raise ValueError("batch_norm in eval mode needs running statistics")
        mean, var = running_mean, running_var
    inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = (x.data - mean.reshape(bshape)) * inv_std.reshape(bshape)
    out = xhat * gamma.data.reshape(bshape) + beta.data.reshape(bshape)

    def backward(g):
        ggamma = (g * xhat).sum(axis=axes)
        gbeta = g.sum(axis=axes)
        gx = None
        if x.requires_grad:
            gxhat = g * gamma.data.reshape(bshape)
            if training:
                gx = (
                    gxhat
                    - gxhat.mean(axis=axes, keepdims=True)
                    - xhat * (gxhat * xhat).mean(axis=axes, keepdims=True)
                ) * inv_std.reshape(bshape)
            else:
                gx = gxhat * inv_std.reshape(bshape)
        return gx, ggamma, gbeta

    return make_result(out.astype(x.dtype, copy=False), (x, gamma, beta), backward)


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    x = as_tensor(x)
    scale = np.where(x.data > 0, 1.0, slope).astype(x.dtype)
    return make_result(x.data * scale, (x,), lambda g: (g * scale,))


def relu(x: Tensor) -> Tensor:
    return leaky_relu(x, 0.0)


def tanh(x: Tensor) -> Tensor:
    x = as_tensor(x)
    out = np.tanh(x.data)
    return make_result(out, (x,), lambda g: (g * (1.0 - out * out),))


def _stable_sigmoid(z: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(z.dtype, copy=False)


def sigmoid(x: Tensor) -> Tensor:
    x = as_tensor(x)
    out = _stable_sigmoid(x.data)
    return make_result(out, (x,), lambda g: (g * out * (1.0 - out),))


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` with ``weight`` of shape (out, in)."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.shape[-1] != weight.shape[1]:
        raise ValueError(f"linear shape mismatch: input {x.shape}, weight {weight.shape}")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        return (
            g @ weight.data if x.requires_grad else None,
            g.T @ x.data if weight.requires_grad else None,
            g.sum(axis=0) if bias is not None else None,
        )

    return make_result(out, parents, backward)


def l1_loss(a: Tensor, b) -> Tensor:
    """Mean absolute difference."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"l1_loss shape mismatch: {a.shape} vs {b.shape}")
    diff = a.data - b.data
    n = diff.size
    sign = np.sign(diff)
    return make_result(
        np.asarray(np.abs(diff).mean(dtype=np.float64), dtype=a.dtype),
        (a, b),
        lambda g: (
            g * sign / n if a.requires_grad else None,
            -g * sign / n if b.requires_grad else None,
        ),
    )


def bce_with_logits(logits: Tensor, target: float) -> Tensor:
    """Mean binary cross-entropy of ``sigmoid(logits)`` against a constant label.

    Uses ``max(l, 0) - l*t + log(1 + exp(-|l|))`` so large logits never overflow.
    """
    logits = as_tensor(logits)
    z = logits.data
    t = float(target)
    loss = np.maximum(z, 0) - z * t + np.log1p(np.exp(-np.abs(z)))
    n = z.size

    def backward(g):
        return (g * (_stable_sigmoid(z) - t) / n,)

    return make_result(np.asarray(loss.mean(dtype=np.float64), dtype=z.dtype), (logits,), backward)


def log_softmax(x: Tensor) -> Tensor:
    """Row-wise log-softmax over the last axis of a 2-d tensor."""
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    probs = np.exp(out)
    return make_result(out, (x,), lambda g: (g - probs * g.sum(axis=1, keepdims=True),))


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    logp = log_softmax(logits)
    labels = np.asarray(labels)
    rows = np.arange(len(labels))
    return -(logp[rows, labels].mean())


def avg_pool_global(x: Tensor) -> Tensor:
    """(B, C, H, W) -> (B, C) spatial mean."""
    return as_tensor(x).mean(axis=(2, 3))
