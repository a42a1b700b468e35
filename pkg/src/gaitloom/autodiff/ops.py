"""Forward/adjoint pairs for the network layer set.

Convolutions are valid cross-correlations realized with sliding-window views
and tensordot (BLAS). Kernel layouts: conv2d [C_out, C_in, kh, kw],
conv_transpose2d [C_in, C_out, kh, kw]. All ops take [N, C, H, W] tensors;
a 3-D input is treated as a single unbatched sample.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .tensor import Tensor, _accumulate, _needs_grad, _unary


def _as4d(x: Tensor) -> tuple[Tensor, bool]:
    if x.data.ndim == 3:
        return Tensor(x.data[None], x.requires_grad, (x,),
                      lambda g: _accumulate(x, g[0])), True
    return x, False


def _maybe_squeeze(out: Tensor, squeezed: bool) -> Tensor:
    return out[0] if squeezed else out


def _shift_cols(xp: np.ndarray, kh: int, kw: int, ho: int, wo: int) -> np.ndarray:
    """Stack the kh*kw shifted views of the padded field along the channel
    axis: [n, kh*kw*c, ho, wo] with block index (i*kw + j). Each slice copy is
    a plain contiguous block, so this stays memcpy-fast."""
    slices = [xp[:, :, i : i + ho, j : j + wo] for i in range(kh) for j in range(kw)]
    return np.concatenate(slices, axis=1)


def _conv_core(xp: np.ndarray, k2t: np.ndarray, kh: int, kw: int):
    """Cross-correlate a padded field with a matrixized kernel.

    k2t is [c_out, kh*kw*c_in] in (shift-block, channel) order. Returns the
    output [n, c_out, ho, wo] plus the column matrix for the backward pass.
    """
    n, c, hp, wp = xp.shape
    ho, wo = hp - kh + 1, wp - kw + 1
    cols = _shift_cols(xp, kh, kw, ho, wo)
    colsm = cols.reshape(n, kh * kw * c, ho * wo)
    out = np.matmul(k2t, colsm).reshape(n, k2t.shape[0], ho, wo)
    return out, colsm


def _conv_backward(g: np.ndarray, colsm: np.ndarray, k2t: np.ndarray,
                   xp_shape: tuple, kh: int, kw: int, need_x: bool, need_k: bool):
    n, c, hp, wp = xp_shape
    ho, wo = hp - kh + 1, wp - kw + 1
    g3 = g.reshape(n, -1, ho * wo)
    gk2 = gxp = None
    if need_k:
        gk2 = np.matmul(g3, colsm.transpose(0, 2, 1)).sum(axis=0)
    if need_x:
        dcols = np.matmul(k2t.T, g3).reshape(n, kh * kw, c, ho, wo)
        gxp = np.zeros(xp_shape, dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i : i + ho, j : j + wo] += dcols[:, i * kw + j]
    return gk2, gxp


def conv2d(x: Tensor, kernels: Tensor, padding: tuple[int, int] = (0, 0)) -> Tensor:
    """Valid cross-correlation over the (optionally zero-padded) field."""
    x, squeezed = _as4d(x)
    k = kernels
    ph, pw = padding
    n, c, h, w = x.data.shape
    co, ci, kh, kw = k.data.shape
    if ci != c:
        raise ValueError(f"kernel expects {ci} input channels, got {c}")
    if h + 2 * ph < kh or w + 2 * pw < kw:
        raise ValueError("kernel does not fit the padded input")
    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else x.data
    k2t = k.data.transpose(2, 3, 1, 0).reshape(kh * kw * c, co).T
    out, colsm = _conv_core(xp, np.ascontiguousarray(k2t), kh, kw)

    if not _needs_grad(x, k):
        return _maybe_squeeze(Tensor(out), squeezed)

    def backward(g):
        gk2, gxp = _conv_backward(g, colsm, k2t, xp.shape, kh, kw,
                                  x.requires_grad, k.requires_grad)
        if k.requires_grad:
            _accumulate(k, gk2.reshape(co, kh, kw, c).transpose(0, 3, 1, 2))
        if x.requires_grad:
            _accumulate(x, gxp[:, :, ph : ph + h, pw : pw + w] if (ph or pw) else gxp)

    res = Tensor(out, requires_grad=True, _parents=(x, k), _backward=backward)
    return _maybe_squeeze(res, squeezed)


def conv_transpose2d(x: Tensor, kernels: Tensor) -> Tensor:
    """Adjoint of valid conv: output grows by kernel-1 along each axis.

    Computed in scatter form (each input sample spreads over kernel-many
    output positions), which costs kernel * C_out and so stays cheap for the
    decoder's channel-reducing layers.
    """
    x, squeezed = _as4d(x)
    k = kernels
    n, c, h, w = x.data.shape
    ci, co, kh, kw = k.data.shape
    if ci != c:
        raise ValueError(f"kernel expects {ci} input channels, got {c}")
    xd = np.ascontiguousarray(x.data)
    x3 = xd.reshape(n, c, h * w)
    k2 = np.ascontiguousarray(k.data.transpose(2, 3, 1, 0).reshape(kh * kw * co, c))
    d = np.matmul(k2, x3).reshape(n, kh * kw, co, h, w)
    out = np.zeros((n, co, h + kh - 1, w + kw - 1), dtype=xd.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + h, j : j + w] += d[:, i * kw + j]

    if not _needs_grad(x, k):
        return _maybe_squeeze(Tensor(out), squeezed)

    def backward(g):
        if x.requires_grad:
            # valid correlation of g with the kernel (channels c <- co)
            gcols = _shift_cols(g, kh, kw, h, w).reshape(n, kh * kw * co, h * w)
            gx = np.matmul(k2.T, gcols).reshape(n, c, h, w)
            _accumulate(x, gx)
        if k.requires_grad:
            gk = np.empty((c, co, kh, kw), dtype=xd.dtype)
            for i in range(kh):
                for j in range(kw):
                    gs = np.ascontiguousarray(g[:, :, i : i + h, j : j + w])
                    gs3 = gs.reshape(n, co, h * w)
                    gk[:, :, i, j] = np.matmul(x3, gs3.transpose(0, 2, 1)).sum(axis=0)
            _accumulate(k, gk)

    res = Tensor(out, requires_grad=True, _parents=(x, k), _backward=backward)
    return _maybe_squeeze(res, squeezed)


def max_pool2d(x: Tensor, kernel: tuple[int, int], stride: tuple[int, int]) -> Tensor:
    """Windowed max; gradient routes to the argmax (first index on ties)."""
    x, squeezed = _as4d(x)
    kh, kw = kernel
    sh, sw = stride
    n, c, h, w = x.data.shape
    ho = (h - kh) // sh + 1
    wo = (w - kw) // sw + 1
    if ho < 1 or wo < 1:
        raise ValueError("pooling window does not fit")

    tiled = sh == kh and sw == kw == 1 and wo == w
    if tiled:  # time-axis tiling: a contiguous reshape view, no gather
        win = np.ascontiguousarray(x.data)[:, :, : ho * kh, :].reshape(n, c, ho, kh, w)
        am = win.argmax(axis=3)
        out = np.take_along_axis(win, am[:, :, :, None, :], axis=3)[:, :, :, 0, :]
    else:
        s = x.data.strides
        win = as_strided(x.data, shape=(n, c, ho, wo, kh, kw),
                         strides=(s[0], s[1], s[2] * sh, s[3] * sw, s[2], s[3]))
        flat = win.reshape(n, c, ho, wo, kh * kw)
        am = flat.argmax(axis=4)
        out = np.take_along_axis(flat, am[..., None], axis=4)[..., 0]

    if not _needs_grad(x):
        return _maybe_squeeze(Tensor(np.ascontiguousarray(out)), squeezed)

    def backward(g):
        gx = np.zeros_like(x.data)
        if tiled:
            gtile = np.zeros((n, c, ho, kh, w), dtype=g.dtype)
            np.put_along_axis(gtile, am[:, :, :, None, :], g[:, :, :, None, :], axis=3)
            gx[:, :, : ho * kh, :] = gtile.reshape(n, c, ho * kh, w)
        elif sh == kh and sw == kw:  # non-overlapping tiling: direct scatter
            gwin = np.zeros((n, c, ho, wo, kh * kw), dtype=g.dtype)
            np.put_along_axis(gwin, am[..., None], g[..., None], axis=4)
            block = gwin.reshape(n, c, ho, wo, kh, kw).transpose(0, 1, 2, 4, 3, 5)
            gx[:, :, : ho * kh, : wo * kw] = block.reshape(n, c, ho * kh, wo * kw)
        else:  # overlapping windows accumulate
            ni, ci_, hi, wi = np.indices((n, c, ho, wo), sparse=True)
            rows = hi * sh + am // kw
            cols = wi * sw + am % kw
            np.add.at(gx, (ni, ci_, rows, cols), g)
        _accumulate(x, gx)

    res = Tensor(np.ascontiguousarray(out), requires_grad=True, _parents=(x,), _backward=backward)
    return _maybe_squeeze(res, squeezed)


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    if not 0.0 <= slope < 1.0:
        raise ValueError("slope must lie in [0, 1)")
    out = np.maximum(x.data, slope * x.data)  # equals x if x > 0 else slope*x

    def bwd(g):
        scale = np.full_like(g, slope)
        scale[x.data > 0] = 1.0
        return g * scale

    return _unary(x, out, bwd)


def upsample_nearest(x: Tensor, factor: int) -> Tensor:
    """Repeat each time step (axis 2) ``factor`` times; adjoint sums repeats."""
    x, squeezed = _as4d(x)
    n, c, h, w = x.data.shape
    out = np.repeat(x.data, factor, axis=2)
    res = _unary(x, out, lambda g: g.reshape(n, c, h, factor, w).sum(axis=3))
    return _maybe_squeeze(res, squeezed)


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel normalization over batch and spatial dims.

    Training mode uses batch statistics (population variance) and updates the
    running buffers in place; eval mode applies the stored running stats.
    """
    xd = x.data
    axes = (0, 2, 3)
    shape = (1, -1, 1, 1)
    if training:
        if xd.shape[0] < 2:
            raise ValueError("batch_norm in training mode needs batch >= 2")
        m = xd.mean(axis=axes)
        v = xd.var(axis=axes)
        running_mean *= 1.0 - momentum
        running_mean += momentum * m
        running_var *= 1.0 - momentum
        running_var += momentum * v
    else:
        m = running_mean.astype(xd.dtype)
        v = running_var.astype(xd.dtype)
    inv = 1.0 / np.sqrt(v + eps)
    xhat = (xd - m.reshape(shape)) * inv.reshape(shape)
    out = gamma.data.reshape(shape) * xhat + beta.data.reshape(shape)

    if not _needs_grad(x, gamma, beta):
        return Tensor(out)

    def backward(g):
        if beta.requires_grad:
            _accumulate(beta, g.sum(axis=axes))
        if gamma.requires_grad:
            _accumulate(gamma, (g * xhat).sum(axis=axes))
        if x.requires_grad:
            dxhat = g * gamma.data.reshape(shape)
            if training:
                gx = inv.reshape(shape) * (
                    dxhat
                    - dxhat.mean(axis=axes, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=axes, keepdims=True)
                )
            else:
                gx = dxhat * inv.reshape(shape)
            _accumulate(x, gx.astype(xd.dtype))

    return Tensor(out, requires_grad=True, _parents=(x, gamma, beta), _backward=backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map y = x @ W.T + b with W of shape [out, in]."""
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)
    if not _needs_grad(*parents):
        return Tensor(out)

    def backward(g):
        if x.requires_grad:
            _accumulate(x, g @ weight.data)
        if weight.requires_grad:
            _accumulate(weight, g.T @ x.data)
        if bias is not None and bias.requires_grad:
            _accumulate(bias, g.sum(axis=0))

    return Tensor(out, requires_grad=True, _parents=parents, _backward=backward)


def permute(x: Tensor, axes: tuple[int, ...]) -> Tensor:
    inv = tuple(np.argsort(axes))
    return _unary(x, np.ascontiguousarray(x.data.transpose(axes)),
                  lambda g: np.ascontiguousarray(g.transpose(inv)))


def mse(pred: Tensor, target) -> Tensor:
    """Mean of squared differences over every element."""
    t = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=pred.data.dtype)
    if pred.data.shape != t.shape:
        raise ValueError(f"shape mismatch {pred.data.shape} vs {t.shape}")
    diff = pred.data - t
    val = np.asarray((diff * diff).mean(), dtype=pred.data.dtype)
    return _unary(pred, val, lambda g: (2.0 / diff.size) * diff * g)
