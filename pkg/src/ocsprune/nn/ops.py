"""Forward/backward kernels for the supported layer set.

Every op is a pair ``fwd(*inputs, **attrs) -> (out, ctx)`` and
``bwd(ctx, grad_out) -> tuple of input grads`` (``None`` for inputs that
carry no gradient). Arrays are NCHW for spatial tensors and NF for features.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    """Raised when an op receives inputs of incompatible shape."""


# -- conv2d -------------------------------------------------------------------

def _windows(xp, k, s):
    win = sliding_window_view(xp, (k, k), axis=(2, 3))
    return win[:, :, ::s, ::s]


def _col2im(dwin, x_shape, k, s, p):
    # dwin: (N, C, Ho, Wo, k, k)
    n, c, h, w = x_shape
    ho, wo = dwin.shape[2], dwin.shape[3]
    dxp = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=dwin.dtype)
    for i in range(k):
        for j in range(k):
            dxp[:, :, i:i + s * ho:s, j:j + s * wo:s] += dwin[:, :, :, :, i, j]
    if p:
        dxp = dxp[:, :, p:p + h, p:p + w]
    return dxp


def conv2d_fwd(x, weight, bias=None, *, stride=1, padding=0, groups=1):
    if x.ndim != 4:
        raise ShapeError(f"conv2d expects NCHW input, got shape {x.shape}")
    n, c, h, w = x.shape
    o, cg, k, k2 = weight.shape
    if k != k2 or c != cg * groups or o % groups:
        raise ShapeError(
            f"conv2d weight {weight.shape} incompatible with input {x.shape} (groups={groups})")
    p, s = padding, stride
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
    win = _windows(xp, k, s)
    ho, wo = win.shape[2], win.shape[3]
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d output would be empty for input {x.shape}")
    if groups == 1:
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k)
        out = cols @ weight.reshape(o, -1).T
        out = out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2)
        saved = cols
    else:
        og = o // groups
        wg = win.reshape(n, groups, cg, ho, wo, k, k)
        kg = weight.reshape(groups, og, cg, k, k)
        out = np.einsum("ngcpqkl,gockl->ngopq", wg, kg, optimize=True)
        out = out.reshape(n, o, ho, wo)
        saved = wg
    if bias is not None:
        out = out + bias[None, :, None, None]
    out = np.ascontiguousarray(out)
    ctx = dict(saved=saved, weight=weight, x_shape=x.shape, stride=s, padding=p,
               groups=groups, has_bias=bias is not None, out_hw=(ho, wo))
    return out, ctx


def conv2d_bwd(ctx, g):
    weight = ctx["weight"]
    o, cg, k, _ = weight.shape
    n, c, h, w = ctx["x_shape"]
    ho, wo = ctx["out_hw"]
    groups = ctx["groups"]
    if groups == 1:
        cols = ctx["saved"]
        gm = g.transpose(0, 2, 3, 1).reshape(-1, o)
        dw = (gm.T @ cols).reshape(weight.shape)
        dcols = gm @ weight.reshape(o, -1)
        dwin = dcols.reshape(n, ho, wo, c, k, k).transpose(0, 3, 1, 2, 4, 5)
    else:
        og = o // groups
        wg = ctx["saved"]
        kg = weight.reshape(groups, og, cg, k, k)
        gg = g.reshape(n, groups, og, ho, wo)
        dw = np.einsum("ngopq,ngcpqkl->gockl", gg, wg, optimize=True).reshape(weight.shape)
        dwin = np.einsum("ngopq,gockl->ngcpqkl", gg, kg, optimize=True)
        dwin = dwin.reshape(n, c, ho, wo, k, k)
    dx = _col2im(dwin, (n, c, h, w), k, ctx["stride"], ctx["padding"])
    db = g.sum(axis=(0, 2, 3)) if ctx["has_bias"] else None
    return dx, dw, db


# -- batchnorm2d --------------------------------------------------------------

def batchnorm2d_fwd(x, gamma, beta, *, running_mean, running_var, train=True, eps=1e-5):
    if x.ndim != 4 or x.shape[1] != gamma.shape[0]:
        raise ShapeError(f"batchnorm2d with {gamma.shape[0]} channels got input {x.shape}")
    if train:
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
    else:
        mean, var = running_mean, running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean[None, :, None, None]) * inv_std[None, :, None, None]
    out = gamma[None, :, None, None] * xhat + beta[None, :, None, None]
    ctx = dict(xhat=xhat, inv_std=inv_std, gamma=gamma, train=train, mean=mean, var=var,
               count=x.shape[0] * x.shape[2] * x.shape[3])
    return out, ctx


def batchnorm2d_bwd(ctx, g):
    xhat, inv_std, gamma = ctx["xhat"], ctx["inv_std"], ctx["gamma"]
    dgamma = (g * xhat).sum(axis=(0, 2, 3))
    dbeta = g.sum(axis=(0, 2, 3))
    dxhat = g * gamma[None, :, None, None]
    if ctx["train"]:
        m = ctx["count"]
        sum_dxhat = dxhat.sum(axis=(0, 2, 3))[None, :, None, None]
        sum_dxhat_xhat = (dxhat * xhat).sum(axis=(0, 2, 3))[None, :, None, None]
        dx = (inv_std[None, :, None, None] / m) * (m * dxhat - sum_dxhat - xhat * sum_dxhat_xhat)
    else:
        dx = dxhat * inv_std[None, :, None, None]
    return dx, dgamma, dbeta


# -- dense --------------------------------------------------------------------

def dense_fwd(x, weight, bias=None):
    if x.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"dense weight {weight.shape} incompatible with input {x.shape}")
    out = x @ weight.T
    if bias is not None:
        out = out + bias
    return out, dict(x=x, weight=weight, has_bias=bias is not None)


def dense_bwd(ctx, g):
    dx = g @ ctx["weight"]
    dw = g.T @ ctx["x"]
    db = g.sum(axis=0) if ctx["has_bias"] else None
    return dx, dw, db


# -- elementwise / reshaping ----------------------------------------------------

def relu_fwd(x):
    mask = x > 0
    return x * mask, dict(mask=mask)


def relu_bwd(ctx, g):
    return (g * ctx["mask"],)


def add_fwd(a, b):
    if a.shape != b.shape:
        raise ShapeError(f"residual add of mismatched shapes {a.shape} and {b.shape}")
    return a + b, {}


def add_bwd(ctx, g):
    return g, g


def mul_fwd(a, b):
    return a * b, dict(a=a, b=b)


def mul_bwd(ctx, g):
    return g * ctx["b"], g * ctx["a"]


def flatten_fwd(x):
    return x.reshape(x.shape[0], -1), dict(shape=x.shape)


def flatten_bwd(ctx, g):
    return (g.reshape(ctx["shape"]),)


def gap_fwd(x):
    if x.ndim != 4:
        raise ShapeError(f"global average pool expects NCHW input, got {x.shape}")
    return x.mean(axis=(2, 3)), dict(shape=x.shape)


def gap_bwd(ctx, g):
    n, c, h, w = ctx["shape"]
    return (np.broadcast_to(g[:, :, None, None] / (h * w), (n, c, h, w)).copy(),)


def maxpool_fwd(x, *, kernel=2, stride=None):
    s = stride or kernel
    if x.ndim != 4:
        raise ShapeError(f"max pool expects NCHW input, got {x.shape}")
    win = _windows(x, kernel, s)
    n, c, ho, wo = win.shape[:4]
    if ho < 1 or wo < 1:
        raise ShapeError(f"max pool output would be empty for input {x.shape}")
    flat = win.reshape(n, c, ho, wo, kernel * kernel)
    idx = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
    return out, dict(idx=idx, x_shape=x.shape, kernel=kernel, stride=s)


def maxpool_bwd(ctx, g):
    k, s = ctx["kernel"], ctx["stride"]
    idx = ctx["idx"]
    ho, wo = idx.shape[2], idx.shape[3]
    dx = np.zeros(ctx["x_shape"], dtype=g.dtype)
    for i in range(k):
        for j in range(k):
            dx[:, :, i:i + s * ho:s, j:j + s * wo:s] += g * (idx == i * k + j)
    return (dx,)


# -- loss ---------------------------------------------------------------------

def softmax_xent_fwd(logits, *, labels):
    n = logits.shape[0]
    z = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsum
    loss = -logp[np.arange(n), labels].mean()
    return np.asarray(loss, dtype=logits.dtype), dict(p=np.exp(logp), labels=labels)


def softmax_xent_bwd(ctx, g):
    p, labels = ctx["p"], ctx["labels"]
    n = p.shape[0]
    d = p.copy()
    d[np.arange(n), labels] -= 1.0
    return (d * (g / n),)


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy and its gradient w.r.t. the logits."""
    loss, ctx = softmax_xent_fwd(logits, labels=labels)
    return float(loss), softmax_xent_bwd(ctx, np.asarray(1.0, dtype=logits.dtype))[0]


OPS = {
    "conv2d": (conv2d_fwd, conv2d_bwd),
    "batchnorm2d": (batchnorm2d_fwd, batchnorm2d_bwd),
    "dense": (dense_fwd, dense_bwd),
    "relu": (relu_fwd, relu_bwd),
    "maxpool": (maxpool_fwd, maxpool_bwd),
    "gap": (gap_fwd, gap_bwd),
    "add": (add_fwd, add_bwd),
    "flatten": (flatten_fwd, flatten_bwd),
    "mul": (mul_fwd, mul_bwd),
    "softmax_xent": (softmax_xent_fwd, softmax_xent_bwd),
}
