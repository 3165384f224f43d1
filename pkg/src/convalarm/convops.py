"""Convolution, adaptive pooling, and channel concatenation.

Convolutions are cross-correlations (no kernel flip) computed via im2col and
a single matmul; transposed convolutions are the adjoint (col2im) of that
scheme, reinterpreted as forward ops.  1-D variants are lifted to 2-D with a
unit height axis so both share one implementation.

Layout conventions: 2-D inputs are (N, C, H, W), 1-D inputs are (N, C, L),
conv weights are (F, C, kH, kW) / (F, C, k), and transposed-conv weights are
(C, F, kH, kW) / (C, F, k) where C is the op's own input channel count.
"""

from __future__ import annotations

import numpy as np

from .tensor import ShapeError, Tensor, apply_op

__all__ = [
    "conv2d",
    "conv1d",
    "conv_transpose2d",
    "conv_transpose1d",
    "adaptive_avg_pool",
    "adaptive_max_pool",
    "concat_channels",
]


def _im2col(x: np.ndarray, kh: int, kw: int, sh: int, sw: int,
            ph: int, pw: int) -> tuple[np.ndarray, int, int]:
    """Extract sliding patches into rows: (N*oh*ow, C*kh*kw)."""
    n, c, h, w = x.shape
    oh = (h + 2 * ph - kh) // sh + 1
    ow = (w + 2 * pw - kw) // sw + 1
    if ph or pw:
        x = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    col = np.empty((n, c, kh, kw, oh, ow), dtype=x.dtype)
    for i in range(kh):
        i_max = i + sh * oh
        for j in range(kw):
            j_max = j + sw * ow
            col[:, :, i, j] = x[:, :, i:i_max:sh, j:j_max:sw]
    return col.transpose(0, 4, 5, 1, 2, 3).reshape(n * oh * ow, -1), oh, ow


def _col2im(col: np.ndarray, shape: tuple[int, ...], kh: int, kw: int,
            sh: int, sw: int, ph: int, pw: int) -> np.ndarray:
    """Adjoint of :func:`_im2col`: scatter-add patch rows back into an image."""
    n, c, h, w = shape
    oh = (h + 2 * ph - kh) // sh + 1
    ow = (w + 2 * pw - kw) // sw + 1
    col = col.reshape(n, oh, ow, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    img = np.zeros((n, c, h + 2 * ph, w + 2 * pw), dtype=col.dtype)
    for i in range(kh):
        i_max = i + sh * oh
        for j in range(kw):
            j_max = j + sw * ow
            img[:, :, i:i_max:sh, j:j_max:sw] += col[:, :, i, j]
    return img[:, :, ph:h + ph, pw:w + pw]


def _conv_forward(xd, wd, bd, sh, sw, ph, pw):
    n = xd.shape[0]
    f = wd.shape[0]
    col, oh, ow = _im2col(xd, wd.shape[2], wd.shape[3], sh, sw, ph, pw)
    wcol = wd.reshape(f, -1)
    out = col @ wcol.T
    if bd is not None:
        out += bd
    out = np.ascontiguousarray(out.reshape(n, oh, ow, f).transpose(0, 3, 1, 2))
    return out, col, wcol


def _check_conv_args(x, w, b, stride, padding, transposed, dims):
    name = ("conv_transpose" if transposed else "conv") + f"{dims}d"
    if x.ndim != dims + 2 or w.ndim != dims + 2:
        raise ShapeError(f"{name}: expected {dims + 2}-D input and weight, "
                         f"got {x.shape} and {w.shape}")
    c_axis = 0 if transposed else 1
    if x.shape[1] != w.shape[c_axis]:
        raise ShapeError(f"{name}: input channels of {x.shape} do not match "
                         f"weight {w.shape}")
    f = w.shape[1] if transposed else w.shape[0]
    if b.shape != (f,):
        raise ShapeError(f"{name}: bias {b.shape} does not match {f} filters")
    if stride < 1:
        raise ShapeError(f"{name}: stride must be >= 1, got {stride}")
    if padding < 0:
        raise ShapeError(f"{name}: padding must be >= 0, got {padding}")


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation of (N, C, H, W) with (F, C, kH, kW) plus bias."""
    _check_conv_args(x, w, b, stride, padding, transposed=False, dims=2)
    n, c, h, wid = x.shape
    f, _, kh, kw = w.shape
    if kh > h + 2 * padding or kw > wid + 2 * padding:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} exceeds padded input "
                         f"{h + 2 * padding}x{wid + 2 * padding}")
    xd, wd = x.data, w.data
    out, col, wcol = _conv_forward(xd, wd, b.data, stride, stride, padding, padding)

    def bwd(g):
        grs = g.transpose(0, 2, 3, 1).reshape(-1, f)
        gw = (grs.T @ col).reshape(wd.shape)
        gb = grs.sum(axis=0)
        gx = _col2im(grs @ wcol, xd.shape, kh, kw, stride, stride, padding, padding)
        return gx, gw, gb

    return apply_op("conv2d", (x, w, b), out, bwd)


def conv1d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """1-D cross-correlation of (N, C, L) with (F, C, k) plus bias."""
    _check_conv_args(x, w, b, stride, padding, transposed=False, dims=1)
    n, c, length = x.shape
    f, _, k = w.shape
    if k > length + 2 * padding:
        raise ShapeError(f"conv1d: kernel {k} exceeds padded input "
                         f"{length + 2 * padding}")
    xd = x.data[:, :, None, :]
    wd = w.data[:, :, None, :]
    out4, col, wcol = _conv_forward(xd, wd, b.data, 1, stride, 0, padding)
    out = out4[:, :, 0, :]

    def bwd(g):
        grs = g[:, :, None, :].transpose(0, 2, 3, 1).reshape(-1, f)
        gw = (grs.T @ col).reshape(wd.shape)[:, :, 0, :]
        gb = grs.sum(axis=0)
        gx = _col2im(grs @ wcol, xd.shape, 1, k, 1, stride, 0, padding)
        return gx[:, :, 0, :], gw, gb

    return apply_op("conv1d", (x, w, b), out, bwd)


def _conv_transpose2d_raw(xd, wd, bd, stride, padding, op_h, op_w):
    n, c, h, wid = xd.shape
    _, f, kh, kw = wd.shape
    oh = (h - 1) * stride - 2 * padding + kh + op_h
    ow = (wid - 1) * stride - 2 * padding + kw + op_w
    if oh < 1 or ow < 1:
        raise ShapeError(f"conv_transpose2d: output shape {oh}x{ow} collapsed "
                         f"for input {xd.shape}")
    xrs = xd.transpose(0, 2, 3, 1).reshape(-1, c)
    wcol = wd.reshape(c, -1)
    out = _col2im(xrs @ wcol, (n, f, oh, ow), kh, kw, stride, stride, padding, padding)
    if bd is not None:
        out += bd[None, :, None, None]
    return out, xrs, wcol


def conv_transpose2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1,
                     padding: int = 0, output_padding: int | tuple = 0) -> Tensor:
    """Adjoint of :func:`conv2d` as a forward op.

    Input (N, C, H, W), weight (C, F, kH, kW); output spatial size is
    ``(H-1)*stride - 2*padding + kH + output_padding`` per axis
    (``output_padding``, an int or per-axis pair, resolves the ambiguity
    left by the conv floor division and must be smaller than the stride).
    """
    _check_conv_args(x, w, b, stride, padding, transposed=True, dims=2)
    op_h, op_w = ((output_padding, output_padding)
                  if isinstance(output_padding, int) else tuple(output_padding))
    for op in (op_h, op_w):
        if not 0 <= op < max(stride, 1):
            raise ShapeError(f"conv_transpose2d: output_padding {op} "
                             f"must lie in [0, stride={stride})")
    xd, wd = x.data, w.data
    c, f, kh, kw = wd.shape
    out, xrs, wcol = _conv_transpose2d_raw(xd, wd, b.data, stride, padding,
                                           op_h, op_w)

    def bwd(g):
        gb = g.sum(axis=(0, 2, 3))
        # d/dinput is a plain conv of g with the same weight read as (C
        # filters over F channels); d/dweight pairs input cells with the
        # patches of g they were scattered into.
        gx, _, _ = _conv_forward(g, wd, None, stride, stride, padding, padding)
        col_g, _, _ = _im2col(g, kh, kw, stride, stride, padding, padding)
        gw = (xrs.T @ col_g).reshape(wd.shape)
        return gx, gw, gb

    return apply_op("conv_transpose2d", (x, w, b), out, bwd)


def conv_transpose1d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1,
                     padding: int = 0, output_padding: int = 0) -> Tensor:
    """1-D analogue of :func:`conv_transpose2d` for (N, C, L) inputs."""
    _check_conv_args(x, w, b, stride, padding, transposed=True, dims=1)
    if not 0 <= output_padding < max(stride, 1):
        raise ShapeError(f"conv_transpose1d: output_padding {output_padding} "
                         f"must lie in [0, stride={stride})")
    xd = x.data[:, :, None, :]
    wd = w.data[:, :, None, :]
    c, f, _, k = wd.shape
    out4, xrs, wcol = _conv_transpose1d_lifted(xd, wd, b.data, stride, padding,
                                               output_padding)
    out = out4[:, :, 0, :]

    def bwd(g):
        g4 = g[:, :, None, :]
        gb = g.sum(axis=(0, 2))
        gx, _, _ = _conv_forward(g4, wd, None, 1, stride, 0, padding)
        col_g, _, _ = _im2col(g4, 1, k, 1, stride, 0, padding)
        gw = (xrs.T @ col_g).reshape(wd.shape)[:, :, 0, :]
        return gx[:, :, 0, :], gw, gb

    return apply_op("conv_transpose1d", (x, w, b), out, bwd)


def _conv_transpose1d_lifted(xd, wd, bd, stride, padding, output_padding):
    n, c, _, length = xd.shape
    _, f, _, k = wd.shape
    ol = (length - 1) * stride - 2 * padding + k + output_padding
    if ol < 1:
        raise ShapeError(f"conv_transpose1d: output length {ol} collapsed "
                         f"for input {xd.shape}")
    xrs = xd.transpose(0, 2, 3, 1).reshape(-1, c)
    wcol = wd.reshape(c, -1)
    out = _col2im(xrs @ wcol, (n, f, 1, ol), 1, k, 1, stride, 0, padding)
    if bd is not None:
        out += bd[None, :, None, None]
    return out, xrs, wcol


# ---------------------------------------------------------------------------
# adaptive pooling


def _windows(length: int, target: int) -> list[tuple[int, int]]:
    # start = floor(i*L/T), end = ceil((i+1)*L/T); windows cover the axis and
    # may overlap when T does not divide L
    return [((i * length) // target, -((-(i + 1) * length) // target))
            for i in range(target)]


def _check_pool_args(x: Tensor, target) -> tuple[int, ...]:
    target = tuple(int(t) for t in target)
    spatial = x.shape[2:]
    if x.ndim not in (3, 4):
        raise ShapeError(f"adaptive pooling expects (N, C, L) or (N, C, H, W), "
                         f"got {x.shape}")
    if len(target) != len(spatial):
        raise ShapeError(f"target rank {len(target)} does not match spatial "
                         f"shape {spatial}")
    for t, s in zip(target, spatial):
        if t < 1 or t > s:
            raise ShapeError(f"pool target {target} invalid for input spatial "
                             f"{spatial}: each extent must lie in [1, input]")
    return target


def adaptive_avg_pool(x: Tensor, target) -> Tensor:
    """Mean-pool each spatial axis down to the ``target`` extents."""
    target = _check_pool_args(x, target)
    xd = x.data
    n, c = xd.shape[:2]
    if xd.ndim == 3:
        wins = _windows(xd.shape[2], target[0])
        out = np.empty((n, c, target[0]), dtype=xd.dtype)
        for i, (s, e) in enumerate(wins):
            out[:, :, i] = xd[:, :, s:e].mean(axis=2)

        def bwd(g):
            gx = np.zeros_like(xd)
            for i, (s, e) in enumerate(wins):
                gx[:, :, s:e] += g[:, :, i:i + 1] / (e - s)
            return (gx,)

    else:
        h_wins = _windows(xd.shape[2], target[0])
        w_wins = _windows(xd.shape[3], target[1])
        out = np.empty((n, c) + target, dtype=xd.dtype)
        for i, (si, ei) in enumerate(h_wins):
            for j, (sj, ej) in enumerate(w_wins):
                out[:, :, i, j] = xd[:, :, si:ei, sj:ej].mean(axis=(2, 3))

        def bwd(g):
            gx = np.zeros_like(xd)
            for i, (si, ei) in enumerate(h_wins):
                for j, (sj, ej) in enumerate(w_wins):
                    gx[:, :, si:ei, sj:ej] += (g[:, :, i:i + 1, j:j + 1]
                                               / ((ei - si) * (ej - sj)))
            return (gx,)

    return apply_op("adaptive_avg_pool", (x,), out, bwd)


def adaptive_max_pool(x: Tensor, target) -> Tensor:
    """Max-pool variant of :func:`adaptive_avg_pool` (not the default stacker)."""
    target = _check_pool_args(x, target)
    xd = x.data
    n, c = xd.shape[:2]
    nc_n, nc_c = np.divmod(np.arange(n * c), c)
    if xd.ndim == 3:
        wins = _windows(xd.shape[2], target[0])
        out = np.empty((n, c, target[0]), dtype=xd.dtype)
        argmax = np.empty((target[0], n * c), dtype=np.int64)
        for i, (s, e) in enumerate(wins):
            win = xd[:, :, s:e].reshape(n * c, -1)
            idx = win.argmax(axis=1)
            argmax[i] = idx + s
            out[:, :, i] = win[np.arange(n * c), idx].reshape(n, c)

        def bwd(g):
            gx = np.zeros_like(xd)
            for i in range(len(wins)):
                np.add.at(gx, (nc_n, nc_c, argmax[i]), g[:, :, i].reshape(-1))
            return (gx,)

    else:
        h_wins = _windows(xd.shape[2], target[0])
        w_wins = _windows(xd.shape[3], target[1])
        out = np.empty((n, c) + target, dtype=xd.dtype)
        arg_i = np.empty(target + (n * c,), dtype=np.int64)
        arg_j = np.empty(target + (n * c,), dtype=np.int64)
        for i, (si, ei) in enumerate(h_wins):
            for j, (sj, ej) in enumerate(w_wins):
                win = xd[:, :, si:ei, sj:ej].reshape(n * c, -1)
                idx = win.argmax(axis=1)
                di, dj = np.divmod(idx, ej - sj)
                arg_i[i, j] = di + si
                arg_j[i, j] = dj + sj
                out[:, :, i, j] = win[np.arange(n * c), idx].reshape(n, c)

        def bwd(g):
            gx = np.zeros_like(xd)
            for i in range(target[0]):
                for j in range(target[1]):
                    np.add.at(gx, (nc_n, nc_c, arg_i[i, j], arg_j[i, j]),
                              g[:, :, i, j].reshape(-1))
            return (gx,)

    return apply_op("adaptive_max_pool", (x,), out, bwd)


# ---------------------------------------------------------------------------
# channel concatenation


def concat_channels(inputs) -> Tensor:
    """Concatenate tensors along the channel axis (axis 1), copying data.

    All inputs must share the batch size and spatial shape; pool first if
    spatial shapes differ.
    """
    inputs = list(inputs)
    if not inputs:
        raise ShapeError("concat_channels needs at least one input")
    first = inputs[0]
    if first.ndim < 3:
        raise ShapeError(f"concat_channels expects (N, C, ...spatial) tensors, "
                         f"got {first.shape}")
    for t in inputs[1:]:
        if t.ndim != first.ndim or t.shape[0] != first.shape[0] \
                or t.shape[2:] != first.shape[2:]:
            raise ShapeError(
                f"concat_channels: shape {t.shape} does not align with "
                f"{first.shape}; pool inputs to a common spatial shape first")
    out = np.concatenate([t.data for t in inputs], axis=1)
    sizes = [t.shape[1] for t in inputs]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        return tuple(g[:, offsets[i]:offsets[i + 1]].copy()
                     for i in range(len(sizes)))

    return apply_op("concat_channels", tuple(inputs), out, bwd)
