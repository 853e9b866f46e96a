"""Spatial operations on (N, C, H, W) tensors: padding, convolution, pooling, resampling.

3-D inputs (C, H, W) are accepted everywhere and treated as a batch of one.
Convolution is cross-correlation (the kernel is not flipped).
"""

from __future__ import annotations

from typing import Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor, _make, _wrap, reshape


def _pair(v) -> Tuple[int, int]:
    return (int(v), int(v)) if np.isscalar(v) else (int(v[0]), int(v[1]))


def _batched(x: Tensor) -> Tuple[Tensor, bool]:
    if x.ndim == 3:
        return reshape(x, (1,) + x.shape), True
    if x.ndim != 4:
        raise ValueError(f"expected (C,H,W) or (N,C,H,W), got shape {x.shape}")
    return x, False


def _unbatch(x: Tensor, squeeze: bool) -> Tensor:
    return reshape(x, x.shape[1:]) if squeeze else x


def _im2col(xp: np.ndarray, kh: int, kw: int, sh: int, sw: int) -> np.ndarray:
    """(N, C, Hp, Wp) -> (N, C*kh*kw, Ho*Wo) patch matrix."""
    n, c = xp.shape[:2]
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw]
    ho, wo = win.shape[2], win.shape[3]
    return win.transpose(0, 1, 4, 5, 2, 3).reshape(n, c * kh * kw, ho * wo)


def _col2im(cols: np.ndarray, shape, kh: int, kw: int, sh: int, sw: int, ho: int, wo: int) -> np.ndarray:
    """Adjoint of ``_im2col``: scatter-add patch columns back to an image."""
    n, c, hp, wp = shape
    cols = cols.reshape(n, c, kh, kw, ho, wo)
    out = np.zeros(shape, dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + sh * (ho - 1) + 1:sh, j:j + sw * (wo - 1) + 1:sw] += cols[:, :, i, j]
    return out


# -- padding ----------------------------------------------------------------
def _pad_index(n: int, before: int, after: int, mode: str) -> np.ndarray:
    idx = np.pad(np.arange(n), (before, after), mode="reflect" if mode == "reflect" else "edge")
    if mode == "zeros":
        idx = np.concatenate([np.full(before, -1), np.arange(n), np.full(after, -1)])
    return idx


def pad2d(x, padding, mode: str = "zeros") -> Tensor:
    """Pad the two trailing axes by ``padding`` (int or (ph, pw)) on both sides."""
    x = _wrap(x)
    ph, pw = _pair(padding)
    if ph == 0 and pw == 0:
        return x
    if mode not in ("zeros", "reflect"):
        raise ValueError(f"unknown padding mode {mode!r}")
    h, w = x.shape[-2:]
    if mode == "reflect" and (ph >= h or pw >= w):
        raise ValueError(f"reflect padding {padding} needs extents > padding, got {(h, w)}")
    widths = [(0, 0)] * (x.ndim - 2) + [(ph, ph), (pw, pw)]
    out = np.pad(x.data, widths, mode="constant" if mode == "zeros" else "reflect")

    def backward(g):
        if mode == "zeros":
            return (g[..., ph:ph + h, pw:pw + w],)
        rows, cols = _pad_index(h, ph, ph, mode), _pad_index(w, pw, pw, mode)
        fold_h = np.zeros((h, h + 2 * ph), dtype=g.dtype)
        fold_h[rows, np.arange(h + 2 * ph)] = 1
        fold_w = np.zeros((w + 2 * pw, w), dtype=g.dtype)
        fold_w[np.arange(w + 2 * pw), cols] = 1
        return (fold_h @ g @ fold_w,)

    return _make(out, (x,), backward, "pad2d")


# -- convolution --------------------------------------------------------------
def _conv_valid(x: Tensor, weight: Tensor, stride) -> Tensor:
    sh, sw = _pair(stride)
    n, c, hp, wp = x.shape
    o, ci, kh, kw = weight.shape
    if ci != c:
        raise ValueError(f"kernel expects {ci} input channels, input has {c}")
    ho, wo = (hp - kh) // sh + 1, (wp - kw) // sw + 1
    if ho <= 0 or wo <= 0 or hp < kh or wp < kw:
        raise ValueError(f"kernel {kh}x{kw} does not fit padded input {hp}x{wp}")
    cols = _im2col(x.data, kh, kw, sh, sw)
    w2 = weight.data.reshape(o, -1)
    out = np.matmul(w2, cols).reshape(n, o, ho, wo)

    def backward(g):
        g2 = g.reshape(n, o, ho * wo)
        gx = gw = None
        if weight.requires_grad:
            gw = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0).reshape(weight.shape)
        if x.requires_grad:
            gx = _col2im(np.matmul(w2.T, g2), x.shape, kh, kw, sh, sw, ho, wo)
        return gx, gw

    return _make(out, (x, weight), backward, "conv2d")


def conv2d(x, weight, bias=None, stride=1, padding=0, padding_mode: str = "zeros") -> Tensor:
    """Cross-correlate ``x`` (C,H,W or N,C,H,W) with ``weight`` (C_out, C_in, kh, kw).

    Output extent per axis is ``floor((h + 2p - k) / stride) + 1``.
    """
    x, weight = _wrap(x), _wrap(weight)
    x, squeeze = _batched(x)
    if weight.ndim != 4:
        raise ValueError(f"kernel must be 4-D, got {weight.shape}")
    out = _conv_valid(pad2d(x, padding, padding_mode), weight, stride)
    if bias is not None:
        out = out + reshape(_wrap(bias), (1, -1, 1, 1))
    return _unbatch(out, squeeze)


def conv_transpose2d(x, weight, bias=None, stride=1, padding=0, output_padding=0) -> Tensor:
    """Adjoint of :func:`conv2d` with the same kernel and geometry.

    ``weight`` has the shape of the forward convolution's kernel,
    (C_fwd_out, C_fwd_in, kh, kw); the input carries C_fwd_out channels and the
    result C_fwd_in channels of extent ``(h - 1) * stride - 2p + k + output_padding``.
    """
    x, weight = _wrap(x), _wrap(weight)
    x, squeeze = _batched(x)
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    oph, opw = _pair(output_padding)
    if sh < 1 or sw < 1:
        raise ValueError("stride must be >= 1")
    if not (0 <= oph < sh and 0 <= opw < sw):
        raise ValueError("output_padding must be smaller than stride")
    n, o, h, w = x.shape
    wo_, c, kh, kw = weight.shape
    if wo_ != o:
        raise ValueError(f"kernel expects {wo_} channels, input has {o}")
    hp, wp = (h - 1) * sh + kh + oph, (w - 1) * sw + kw + opw
    hout, wout = hp - 2 * ph, wp - 2 * pw
    if hout <= 0 or wout <= 0:
        raise ValueError("transposed convolution output would be empty")
    w2 = weight.data.reshape(o, -1)
    x2 = x.data.reshape(n, o, h * w)
    full = _col2im(np.matmul(w2.T, x2), (n, c, hp, wp), kh, kw, sh, sw, h, w)
    out = full[:, :, ph:ph + hout, pw:pw + wout]

    def backward(g):
        gp = np.zeros((n, c, hp, wp), dtype=g.dtype)
        gp[:, :, ph:ph + hout, pw:pw + wout] = g
        cols = _im2col(gp, kh, kw, sh, sw)
        gx = gw = None
        if x.requires_grad:
            gx = np.matmul(w2, cols).reshape(x.shape)
        if weight.requires_grad:
            gw = np.matmul(x2, cols.transpose(0, 2, 1)).sum(axis=0).reshape(weight.shape)
        return gx, gw

    result = _make(np.ascontiguousarray(out), (x, weight), backward, "conv_transpose2d")
    if bias is not None:
        result = result + reshape(_wrap(bias), (1, -1, 1, 1))
    return _unbatch(result, squeeze)


# -- pooling -----------------------------------------------------------------
def pool2d(kind: str, x, window, stride=None) -> Tensor:
    """Max or average pooling without padding.

    Max pooling sends the gradient to the first maximal entry in scan order.
    """
    x = _wrap(x)
    x, squeeze = _batched(x)
    kh, kw = _pair(window)
    sh, sw = _pair(stride if stride is not None else window)
    n, c, h, w = x.shape
    if kh > h or kw > w:
        raise ValueError(f"pool window {kh}x{kw} exceeds input {h}x{w}")
    win = sliding_window_view(x.data, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw]
    ho, wo = win.shape[2], win.shape[3]
    if kind == "max":
        flat = win.reshape(n, c, ho, wo, kh * kw)
        arg = flat.argmax(axis=-1)
        out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

        def backward(g):
            gx = np.zeros(x.shape, dtype=g.dtype)
            rows = np.arange(ho)[:, None] * sh + arg // kw
            cols = np.arange(wo)[None, :] * sw + arg % kw
            ni, ci = np.indices((n, c))
            idx = (ni[:, :, None, None], ci[:, :, None, None], rows, cols)
            if sh >= kh and sw >= kw:
                gx[idx] = g
            else:
                np.add.at(gx, idx, g)
            return (gx,)
    elif kind == "average":
        out = win.mean(axis=(-2, -1))

        def backward(g):
            gx = np.zeros(x.shape, dtype=g.dtype)
            share = g / (kh * kw)
            for i in range(kh):
                for j in range(kw):
                    gx[:, :, i:i + sh * (ho - 1) + 1:sh, j:j + sw * (wo - 1) + 1:sw] += share
            return (gx,)
    else:
        raise ValueError(f"unknown pooling kind {kind!r}")
    return _unbatch(_make(np.ascontiguousarray(out), (x,), backward, f"{kind}_pool2d"), squeeze)


def max_pool2d(x, window=2, stride=None) -> Tensor:
    return pool2d("max", x, window, stride)


def avg_pool2d(x, window=2, stride=None) -> Tensor:
    return pool2d("average", x, window, stride)


# -- resampling ----------------------------------------------------------------
def upsample_nearest(x, factor: int = 2) -> Tensor:
    x = _wrap(x)
    x, squeeze = _batched(x)
    n, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, factor, axis=2), factor, axis=3)

    def backward(g):
        return (g.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5)),)

    return _unbatch(_make(out, (x,), backward, "upsample_nearest"), squeeze)


def linear_resize_matrix(n_in: int, n_out: int, dtype=np.float64) -> np.ndarray:
    """(n_out, n_in) bilinear interpolation weights with half-pixel centers and edge clamping."""
    scale = n_in / n_out
    src = (np.arange(n_out) + 0.5) * scale - 0.5
    src = np.clip(src, 0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    m = np.zeros((n_out, n_in), dtype=dtype)
    m[np.arange(n_out), lo] += 1 - frac
    m[np.arange(n_out), hi] += frac
    return m


def resize_bilinear(x, out_hw: Tuple[int, int]) -> Tensor:
    """Separable bilinear resize of the trailing two axes."""
    x = _wrap(x)
    h, w = x.shape[-2:]
    mh = Tensor(linear_resize_matrix(h, out_hw[0], x.dtype))
    mw = Tensor(linear_resize_matrix(w, out_hw[1], x.dtype).T.copy())
    return (mh @ x) @ mw


def box_downscale(x, factor: int) -> Tensor:
    """Average non-overlapping ``factor`` x ``factor`` blocks."""
    return avg_pool2d(x, factor, factor)
