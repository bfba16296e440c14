"""Dense kernels: convolution, nearest upsampling and bilinear resizing.

Arrays are plain numpy ndarrays laid out as [C,H,W] or [N,C,H,W]. GEMMs
accumulate in float64 and results are stored back in the input dtype
(float32 for everything the network produces), which keeps outputs
bit-identical across runs.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

ACC = np.float64


@dataclass
class ConvSpec:
    """Geometry and parameters of one 2-D convolution."""

    in_channels: int
    out_channels: int
    kernel: tuple[int, int] = (3, 3)
    stride: int = 1
    padding: int = 0
    dilation: int = 1
    groups: int = 1
    weight: np.ndarray | None = None
    bias: np.ndarray | None = None

    def __post_init__(self):
        if isinstance(self.kernel, int):
            self.kernel = (self.kernel, self.kernel)
        self.kernel = tuple(int(k) for k in self.kernel)
        for name in ("in_channels", "out_channels", "stride", "dilation", "groups"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"ConvSpec.{name} must be a positive integer, got {getattr(self, name)}")
        if min(self.kernel) < 1:
            raise ValueError(f"ConvSpec.kernel must be positive, got {self.kernel}")
        if self.padding < 0:
            raise ValueError(f"ConvSpec.padding must be >= 0, got {self.padding}")
        if self.in_channels % self.groups or self.out_channels % self.groups:
            raise ValueError(
                f"in_channels={self.in_channels} and out_channels={self.out_channels} "
                f"must both be divisible by groups={self.groups}")
        shape = (self.out_channels, self.in_channels // self.groups, *self.kernel)
        if self.weight is None:
            self.weight = np.zeros(shape, np.float32)
        self.weight = np.asarray(self.weight)
        if self.weight.shape != shape:
            raise ValueError(f"weight shape {self.weight.shape} does not match expected {shape}")
        if self.bias is not None:
            self.bias = np.asarray(self.bias)
            if self.bias.shape != (self.out_channels,):
                raise ValueError(f"bias shape {self.bias.shape} does not match ({self.out_channels},)")

    def output_size(self, h: int, w: int) -> tuple[int, int]:
        return conv_output_size(h, w, self.kernel, self.stride, self.padding, self.dilation)


def conv_output_size(h, w, kernel, stride=1, padding=0, dilation=1):
    kh, kw = (kernel, kernel) if np.isscalar(kernel) else kernel
    ho = (h + 2 * padding - dilation * (kh - 1) - 1) // stride + 1
    wo = (w + 2 * padding - dilation * (kw - 1) - 1) // stride + 1
    if ho < 1 or wo < 1:
        raise ValueError(f"convolution output size ({ho}, {wo}) is not positive for input ({h}, {w})")
    return ho, wo


def _tap(xp, i, j, dilation, stride, ho, wo):
    """Strided view of the padded input seen by kernel tap (i, j)."""
    r0, c0 = i * dilation, j * dilation
    return xp[:, :, r0:r0 + stride * (ho - 1) + 1:stride, c0:c0 + stride * (wo - 1) + 1:stride]


def _im2col(xp, kh, kw, stride, dilation, ho, wo):
    # cols[c, i, j, n, y, x]: channel-major so the weight matrix multiplies from the left
    n, c = xp.shape[:2]
    cols = np.empty((c, kh, kw, n, ho, wo), ACC)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = _tap(xp, i, j, dilation, stride, ho, wo).transpose(1, 0, 2, 3)
    return cols.reshape(c * kh * kw, n * ho * wo)


def _pointwise(x, kh, kw, stride, padding, dilation):
    return kh == kw == 1 and stride == 1 and padding == 0


def _cols(xp, kh, kw, stride, dilation, ho, wo, pointwise):
    if pointwise:
        return xp.transpose(1, 0, 2, 3).reshape(xp.shape[1], -1).astype(ACC)
    return _im2col(xp, kh, kw, stride, dilation, ho, wo)


def conv_forward(x, w, b=None, stride=1, padding=0, dilation=1, groups=1, keep_cols=False):
    """Cross-correlation of x[N,C,H,W] with w[O,C/g,kh,kw]; zero padding.

    With keep_cols=True also returns the per-group im2col matrices, which
    conv_backward can reuse for the weight gradient.
    """
    n, c, h, wd = x.shape
    o, cg, kh, kw = w.shape
    if c != cg * groups:
        raise ValueError(f"input channels {c} != weight in-channels {cg} x groups {groups}")
    ho, wo = conv_output_size(h, wd, (kh, kw), stride, padding, dilation)
    pw = _pointwise(x, kh, kw, stride, padding, dilation)
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
    og = o // groups
    out = np.empty((o, n * ho * wo), ACC)
    kept = []
    for g in range(groups):
        cols = _cols(xp[:, g * cg:(g + 1) * cg], kh, kw, stride, dilation, ho, wo, pw)
        wm = w[g * og:(g + 1) * og].reshape(og, -1).astype(ACC)
        np.matmul(wm, cols, out=out[g * og:(g + 1) * og])
        if keep_cols:
            kept.append(cols)
    if b is not None:
        out += np.asarray(b, ACC)[:, None]
    out = out.reshape(o, n, ho, wo).transpose(1, 0, 2, 3)
    out = np.ascontiguousarray(out, dtype=x.dtype)
    return (out, kept) if keep_cols else out


def conv_backward(gy, x, w, stride=1, padding=0, dilation=1, groups=1, need_x=True, need_w=True, cols=None):
    """Gradients (gx, gw, gb) of conv_forward given the output gradient gy."""
    n, c, h, wd = x.shape
    o, cg, kh, kw = w.shape
    ho, wo = gy.shape[2:]
    og = o // groups
    pw = _pointwise(x, kh, kw, stride, padding, dilation)
    g_mat = gy.transpose(1, 0, 2, 3).reshape(o, -1).astype(ACC)
    gb = g_mat.sum(axis=1).astype(w.dtype)
    gw = np.empty(w.shape, w.dtype) if need_w else None
    gx = gxp = None
    # stride 1: the input gradient is the full correlation of gy with the
    # flipped, transposed kernel, which avoids the col2im scatter
    direct = (need_x and stride == 1 and not pw and kh == kw and dilation * (kh - 1) >= padding)
    if direct:
        wt = np.flip(w.reshape(groups, og, cg, kh, kw), (3, 4)).transpose(0, 2, 1, 3, 4)
        wt = np.ascontiguousarray(wt.reshape(groups * cg, og, kh, kw))
        gx = conv_forward(gy, wt, None, 1, dilation * (kh - 1) - padding, dilation, groups)
        need_x = False
    if need_x:
        gxp = np.zeros((n, c, h + 2 * padding, wd + 2 * padding), ACC)
    xp = x
    if need_w and cols is None and padding:
        xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    for g in range(groups):
        gg = g_mat[g * og:(g + 1) * og]
        if need_w:
            cg_cols = cols[g] if cols is not None else _cols(xp[:, g * cg:(g + 1) * cg], kh, kw, stride,
                                                            dilation, ho, wo, pw)
            gw[g * og:(g + 1) * og] = (gg @ cg_cols.T).reshape(og, cg, kh, kw)
        if need_x:
            wm = w[g * og:(g + 1) * og].reshape(og, -1).astype(ACC)
            gcols = wm.T @ gg
            view = gxp[:, g * cg:(g + 1) * cg]
            if pw:
                view[...] = gcols.reshape(cg, n, h, wd).transpose(1, 0, 2, 3)
                continue
            gcols = gcols.reshape(cg, kh, kw, n, ho, wo)
            for i in range(kh):
                for j in range(kw):
                    _tap(view, i, j, dilation, stride, ho, wo)[...] += gcols[:, i, j].transpose(1, 0, 2, 3)
    if need_x:
        if padding:
            gxp = gxp[:, :, padding:padding + h, padding:padding + wd]
        gx = np.ascontiguousarray(gxp, dtype=x.dtype)
    return gx, gw, gb


def _as_batch(x):
    x = np.asarray(x)
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise ValueError(f"expected a [C,H,W] or [N,C,H,W] array, got shape {x.shape}")


def _check_finite(y, what):
    if not np.all(np.isfinite(y)):
        raise FloatingPointError(f"{what} produced non-finite values")
    return y


def conv2d(x, spec: ConvSpec) -> np.ndarray:
    """Apply `spec` to x[C,H,W] (or a batch [N,C,H,W]); returns float32."""
    xb, single = _as_batch(x)
    if xb.shape[1] != spec.in_channels:
        raise ValueError(f"channel dimension: input has {xb.shape[1]} channels, spec expects {spec.in_channels}")
    y = conv_forward(xb.astype(np.float32), spec.weight.astype(np.float32),
                     None if spec.bias is None else spec.bias.astype(np.float32),
                     spec.stride, spec.padding, spec.dilation, spec.groups)
    _check_finite(y, "conv2d")
    return y[0] if single else y


def nearest_upsample(x, factor: int) -> np.ndarray:
    """Replicate every pixel into a factor x factor block (last two axes)."""
    factor = int(factor)
    if factor < 1:
        raise ValueError(f"upsampling factor must be >= 1, got {factor}")
    x = np.asarray(x)
    if factor == 1:
        return x.copy()
    return np.repeat(np.repeat(x, factor, axis=-2), factor, axis=-1)


def nearest_upsample_grad(g, factor: int) -> np.ndarray:
    *lead, h, w = g.shape
    return g.reshape(*lead, h // factor, factor, w // factor, factor).sum(axis=(-3, -1))


def resize_matrix(n_in: int, n_out: int) -> np.ndarray:
    """1-D linear interpolation weights [n_out, n_in], align_corners=False.

    Output sample i reads source coordinate (i + 0.5) * n_in / n_out - 0.5,
    clamped to [0, n_in - 1], and blends the two nearest source samples.
    """
    if n_in < 1 or n_out < 1:
        raise ValueError(f"resize sizes must be >= 1, got {n_in} -> {n_out}")
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    m = np.zeros((n_out, n_in), ACC)
    rows = np.arange(n_out)
    np.add.at(m, (rows, lo), 1 - frac)
    np.add.at(m, (rows, hi), frac)
    return m


def bilinear_resize(x, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize over the last two axes (align_corners=False, edge clamp)."""
    x = np.asarray(x)
    if out_h < 1 or out_w < 1:
        raise ValueError(f"target size must be >= 1, got ({out_h}, {out_w})")
    h, w = x.shape[-2:]
    if (h, w) == (out_h, out_w):
        return x.copy()
    rh, rw = resize_matrix(h, out_h), resize_matrix(w, out_w)
    y = np.matmul(np.matmul(rh, x.astype(ACC)), rw.T)
    return y.astype(x.dtype if x.dtype.kind == "f" else np.float32)


def bilinear_resize_grad(g, in_h: int, in_w: int) -> np.ndarray:
    h, w = g.shape[-2:]
    if (h, w) == (in_h, in_w):
        return g.copy()
    rh, rw = resize_matrix(in_h, h), resize_matrix(in_w, w)
    return np.matmul(np.matmul(rh.T, g.astype(ACC)), rw).astype(g.dtype)
