"""
Differentiable operations used by DeblurNet and EnhanceNet.

Every op takes GradNodes (or constant arrays), returns a GradNode and
registers its local backward rule on the tape. Shapes must match exactly;
nothing is broadcast implicitly.
"""
from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np

from d2hnet.core.tensor import GradNode, as_node, value_of
from d2hnet.utils.errors import ShapeError
from d2hnet.utils.validators import validate_divisible, validate_even, validate_same_shape

NodeLike = Union[GradNode, np.ndarray]


@dataclass
class ConvParams:
    """Weight C_out x C_in x k_h x k_w, bias of length C_out."""

    weight: GradNode
    bias: Optional[GradNode] = None
    stride: int = 1
    padding: int = 0
    dilation: int = 1

    def __post_init__(self):
        if self.weight.value.ndim != 4:
            raise ShapeError(f"conv weight must be 4-D, got {self.weight.shape}")
        if self.bias is not None and self.bias.shape != (self.weight.shape[0],):
            raise ShapeError(
                f"conv bias must have length {self.weight.shape[0]}, got {self.bias.shape}"
            )
        if self.stride < 1 or self.padding < 0 or self.dilation < 1:
            raise ValueError(
                f"invalid stride/padding/dilation {self.stride}/{self.padding}/{self.dilation}"
            )

    @property
    def kernel_size(self) -> tuple[int, int]:
        return self.weight.shape[2], self.weight.shape[3]

    @property
    def taps(self) -> int:
        kh, kw = self.kernel_size
        return kh * kw


@dataclass
class DeformOffsets:
    """Per-location offsets N x 2K x H x W ((dy, dx) per tap) and mask N x K x H x W."""

    offsets: GradNode
    mask: GradNode


def _out_extent(size: int, kernel: int, stride: int, padding: int, dilation: int) -> int:
    return (size + 2 * padding - dilation * (kernel - 1) - 1) // stride + 1


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, dilation: int, ho: int, wo: int) -> np.ndarray:
    n, c = xp.shape[:2]
    cols = np.empty((n, c, kh, kw, ho, wo), dtype=xp.dtype)
    for i in range(kh):
        top = i * dilation
        for j in range(kw):
            left = j * dilation
            cols[:, :, i, j] = xp[:, :, top:top + stride * (ho - 1) + 1:stride,
                                  left:left + stride * (wo - 1) + 1:stride]
    return cols


def _col2im(gcols: np.ndarray, padded_shape: tuple, stride: int, dilation: int) -> np.ndarray:
    kh, kw, ho, wo = gcols.shape[2:]
    out = np.zeros(padded_shape, dtype=gcols.dtype)
    for i in range(kh):
        top = i * dilation
        for j in range(kw):
            left = j * dilation
            out[:, :, top:top + stride * (ho - 1) + 1:stride,
                left:left + stride * (wo - 1) + 1:stride] += gcols[:, :, i, j]
    return out


def conv2d(x: NodeLike, p: ConvParams) -> GradNode:
    """Zero-padded cross-correlation."""
    x = as_node(x, "conv2d input")
    w, b = p.weight, p.bias
    xv, wv = x.value, w.value
    n, c, h, wd = xv.shape
    c_out, c_in, kh, kw = wv.shape
    if c_in != c:
        raise ShapeError(f"conv2d: input has {c} channels, weight expects {c_in}")

    s, pad, dil = p.stride, p.padding, p.dilation
    ho = _out_extent(h, kh, s, pad, dil)
    wo = _out_extent(wd, kw, s, pad, dil)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} does not fit input {h}x{wd}")

    xp = np.pad(xv, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else xv
    cols = _im2col(xp, kh, kw, s, dil, ho, wo).reshape(n, c * kh * kw, ho * wo)
    w2 = wv.reshape(c_out, -1)
    out = np.matmul(w2, cols)
    if b is not None:
        out += b.value[None, :, None]
    out = out.reshape(n, c_out, ho, wo)

    def backward(g: np.ndarray):
        g2 = g.reshape(n, c_out, ho * wo)
        gx = gw = gb = None
        if w.requires_grad:
            gw = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0).reshape(wv.shape)
        if b is not None and b.requires_grad:
            gb = g2.sum(axis=(0, 2))
        if x.requires_grad:
            gcols = np.matmul(w2.T, g2).reshape(n, c, kh, kw, ho, wo)
            gxp = _col2im(gcols, xp.shape, s, dil)
            gx = gxp[:, :, pad:pad + h, pad:pad + wd] if pad else gxp
        return (gx, gw, gb) if b is not None else (gx, gw)

    parents = (x, w, b) if b is not None else (x, w)
    return GradNode(out, parents, backward)


def _bilinear_corners(py: np.ndarray, px: np.ndarray, h: int, w: int):
    """Yield (row, col, weight, dweight/dy, dweight/dx) for the 4 neighbors.

    Out-of-image neighbors get zero weight (zero padding) and clipped indices.
    """
    y0f = np.floor(py)
    x0f = np.floor(px)
    ly = py - y0f
    lx = px - x0f
    y0 = y0f.astype(np.int64)
    x0 = x0f.astype(np.int64)
    hy, hx = 1.0 - ly, 1.0 - lx
    corners = (
        (y0, x0, hy * hx, -hx, -hy),
        (y0, x0 + 1, hy * lx, -lx, hy),
        (y0 + 1, x0, ly * hx, hx, -ly),
        (y0 + 1, x0 + 1, ly * lx, lx, ly),
    )
    for yy, xx, wgt, dwy, dwx in corners:
        valid = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
        yield (np.clip(yy, 0, h - 1), np.clip(xx, 0, w - 1),
               wgt * valid, dwy * valid, dwx * valid)


def deform_conv2d(x: NodeLike, p: ConvParams, d: DeformOffsets) -> GradNode:
    """Modulated deformable convolution (stride 1, same-size output).

    out(p) = sum_k w_k * x(p + p_k + dp_k(p)) * dm_k(p), with x sampled
    bilinearly at fractional positions and zero outside the image.
    """
    x = as_node(x, "deform_conv2d input")
    w, b = p.weight, p.bias
    off, msk = d.offsets, d.mask
    xv, wv = x.value, w.value
    n, c, h, wd = xv.shape
    c_out, c_in, kh, kw = wv.shape
    k_taps = kh * kw
    if c_in != c:
        raise ShapeError(f"deform_conv2d: input has {c} channels, weight expects {c_in}")
    if p.stride != 1 or _out_extent(h, kh, 1, p.padding, p.dilation) != h \
            or _out_extent(wd, kw, 1, p.padding, p.dilation) != wd:
        raise ShapeError("deform_conv2d requires stride 1 and size-preserving padding")
    validate_same_shape(off.shape, (n, 2 * k_taps, h, wd), "deform_conv2d offsets")
    validate_same_shape(msk.shape, (n, k_taps, h, wd), "deform_conv2d mask")
    if not np.all(np.isfinite(off.value)):
        raise ValueError("deform_conv2d: offsets contain non-finite values")

    dtype = xv.dtype
    pad, dil = p.padding, p.dilation
    offv = off.value.reshape(n, k_taps, 2, h, wd)
    maskv = msk.value
    tap_y = np.repeat(np.arange(kh) * dil - pad, kw)
    tap_x = np.tile(np.arange(kw) * dil - pad, kh)
    grid_y = np.arange(h, dtype=dtype)[None, :, None]
    grid_x = np.arange(wd, dtype=dtype)[None, None, :]
    batch = np.arange(n)[:, None, None]
    xt = np.ascontiguousarray(xv.transpose(0, 2, 3, 1))

    def sample_positions(k: int):
        py = grid_y + tap_y[k] + offv[:, k, 0]
        px = grid_x + tap_x[k] + offv[:, k, 1]
        return py, px

    sampled = np.empty((n, c, k_taps, h, wd), dtype=dtype)
    for k in range(k_taps):
        py, px = sample_positions(k)
        acc = np.zeros((n, h, wd, c), dtype=dtype)
        for yy, xx, wgt, _, _ in _bilinear_corners(py, px, h, wd):
            acc += xt[batch, yy, xx] * wgt[..., None]
        sampled[:, :, k] = acc.transpose(0, 3, 1, 2)

    cols = (sampled * maskv[:, None]).reshape(n, c * k_taps, h * wd)
    w2 = wv.reshape(c_out, -1)
    out = np.matmul(w2, cols)
    if b is not None:
        out += b.value[None, :, None]
    out = out.reshape(n, c_out, h, wd)

    def backward(g: np.ndarray):
        g2 = g.reshape(n, c_out, h * wd)
        gx = gw = gb = goff = gmask = None
        if w.requires_grad:
            gw = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0).reshape(wv.shape)
        if b is not None and b.requires_grad:
            gb = g2.sum(axis=(0, 2))
        need_inputs = x.requires_grad or off.requires_grad or msk.requires_grad
        if need_inputs:
            gcols = np.matmul(w2.T, g2).reshape(n, c, k_taps, h, wd)
            if msk.requires_grad:
                gmask = (gcols * sampled).sum(axis=1)
            gsampled = gcols * maskv[:, None]
            gx_flat = np.zeros((n * h * wd, c), dtype=dtype) if x.requires_grad else None
            goff_k = np.zeros((n, k_taps, 2, h, wd), dtype=dtype) if off.requires_grad else None
            for k in range(k_taps):
                gs = gsampled[:, :, k].transpose(0, 2, 3, 1)
                py, px = sample_positions(k)
                for yy, xx, wgt, dwy, dwx in _bilinear_corners(py, px, h, wd):
                    if gx_flat is not None:
                        flat = ((batch * h + yy) * wd + xx).reshape(-1)
                        np.add.at(gx_flat, flat, (gs * wgt[..., None]).reshape(-1, c))
                    if goff_k is not None:
                        dot = (gs * xt[batch, yy, xx]).sum(axis=-1)
                        goff_k[:, k, 0] += dot * dwy
                        goff_k[:, k, 1] += dot * dwx
            if gx_flat is not None:
                gx = gx_flat.reshape(n, h, wd, c).transpose(0, 3, 1, 2).copy()
            if goff_k is not None:
                goff = goff_k.reshape(n, 2 * k_taps, h, wd)
        if b is not None:
            return gx, gw, gb, goff, gmask
        return gx, gw, goff, gmask

    parents = (x, w, b, off, msk) if b is not None else (x, w, off, msk)
    return GradNode(out, parents, backward)


def _haar_analysis(v: np.ndarray) -> np.ndarray:
    n, c, h, w = v.shape
    a = v[:, :, 0::2, 0::2]
    b = v[:, :, 0::2, 1::2]
    cc = v[:, :, 1::2, 0::2]
    d = v[:, :, 1::2, 1::2]
    ll = (a + b + cc + d) * 0.5
    lh = (a - b + cc - d) * 0.5
    hl = (a + b - cc - d) * 0.5
    hh = (a - b - cc + d) * 0.5
    return np.stack([ll, lh, hl, hh], axis=2).reshape(n, 4 * c, h // 2, w // 2)


def _haar_synthesis(v: np.ndarray) -> np.ndarray:
    n, c4, h2, w2 = v.shape
    s = v.reshape(n, c4 // 4, 4, h2, w2)
    ll, lh, hl, hh = s[:, :, 0], s[:, :, 1], s[:, :, 2], s[:, :, 3]
    out = np.empty((n, c4 // 4, 2 * h2, 2 * w2), dtype=v.dtype)
    out[:, :, 0::2, 0::2] = (ll + lh + hl + hh) * 0.5
    out[:, :, 0::2, 1::2] = (ll - lh + hl - hh) * 0.5
    out[:, :, 1::2, 0::2] = (ll + lh - hl - hh) * 0.5
    out[:, :, 1::2, 1::2] = (ll - lh - hl + hh) * 0.5
    return out


def dwt2(x: NodeLike) -> GradNode:
    """Orthonormal Haar analysis: N x C x H x W -> N x 4C x H/2 x W/2.

    Subbands are ordered LL, LH, HL, HH for each input channel.
    """
    x = as_node(x, "dwt2 input")
    validate_even(x.shape[2], x.shape[3], "dwt2")
    out = _haar_analysis(x.value)
    return GradNode(out, (x,), lambda g: (_haar_synthesis(g),))


def idwt2(x: NodeLike) -> GradNode:
    """Inverse of dwt2."""
    x = as_node(x, "idwt2 input")
    if x.shape[1] % 4:
        raise ShapeError(f"idwt2: channel count {x.shape[1]} is not divisible by 4")
    out = _haar_synthesis(x.value)
    return GradNode(out, (x,), lambda g: (_haar_analysis(g),))


def avg_pool(x: NodeLike, factor: int) -> NodeLike:
    """Non-overlapping factor x factor box average.

    Returns a plain array for array input and a GradNode for GradNode input.
    """
    xv = value_of(x)
    n, c, h, w = xv.shape
    validate_divisible(h, w, factor, "avg_pool")
    out = xv.reshape(n, c, h // factor, factor, w // factor, factor).mean(axis=(3, 5))
    if not isinstance(x, GradNode):
        return out
    area = factor * factor

    def backward(g: np.ndarray):
        return (np.repeat(np.repeat(g, factor, axis=2), factor, axis=3) / area,)

    return GradNode(out, (x,), backward)


def _linear_weights(n_in: int, n_out: int, dtype) -> np.ndarray:
    """Interpolation matrix, align-corners-false convention."""
    scale = n_in / n_out
    m = np.zeros((n_out, n_in), dtype=np.float64)
    for i in range(n_out):
        src = max((i + 0.5) * scale - 0.5, 0.0)
        i0 = min(int(np.floor(src)), n_in - 1)
        i1 = min(i0 + 1, n_in - 1)
        lam = src - i0
        m[i, i0] += 1.0 - lam
        m[i, i1] += lam
    return m.astype(dtype)


def _area_weights(n_in: int, n_out: int, dtype) -> np.ndarray:
    """Box-filter matrix for arbitrary (also non-integer) scale factors."""
    scale = n_in / n_out
    m = np.zeros((n_out, n_in), dtype=np.float64)
    for i in range(n_out):
        start, end = i * scale, (i + 1) * scale
        for j in range(int(np.floor(start)), min(int(np.ceil(end)), n_in)):
            overlap = min(end, j + 1) - max(start, j)
            if overlap > 0:
                m[i, j] = overlap / scale
    return m.astype(dtype)


def bilinear_resize(x: NodeLike, height: int, width: int) -> GradNode:
    """Bilinear resampling to height x width (align_corners=False)."""
    x = as_node(x, "bilinear_resize input")
    if height < 1 or width < 1:
        raise ShapeError(f"bilinear_resize: invalid target size {height}x{width}")
    h, w = x.shape[2:]
    ry = _linear_weights(h, height, x.dtype)
    rx = _linear_weights(w, width, x.dtype)
    out = np.matmul(np.matmul(ry, x.value), rx.T)

    def backward(g: np.ndarray):
        return (np.matmul(np.matmul(ry.T, g), rx),)

    return GradNode(out, (x,), backward)


def area_resize(x: np.ndarray, height: int, width: int) -> np.ndarray:
    """Box-filter resize of a constant image (no tape)."""
    xv = value_of(x)
    h, w = xv.shape[2:]
    if (h, w) == (height, width):
        return xv.copy()
    ry = _area_weights(h, height, xv.dtype)
    rx = _area_weights(w, width, xv.dtype)
    return np.matmul(np.matmul(ry, xv), rx.T)


def leaky_relu(x: NodeLike, slope: float = 0.2) -> GradNode:
    x = as_node(x, "leaky_relu input")
    positive = x.value > 0
    out = np.where(positive, x.value, x.value * slope)
    local = np.where(positive, 1.0, slope).astype(x.dtype)
    return GradNode(out, (x,), lambda g: (g * local,))


def sigmoid(x: NodeLike) -> GradNode:
    x = as_node(x, "sigmoid input")
    out = np.exp(-np.logaddexp(0.0, -x.value)).astype(x.dtype)
    return GradNode(out, (x,), lambda g: (g * out * (1.0 - out),))


def add(x: NodeLike, y: NodeLike) -> GradNode:
    x, y = as_node(x, "add lhs"), as_node(y, "add rhs")
    validate_same_shape(x.shape, y.shape, "add")
    return GradNode(x.value + y.value, (x, y), lambda g: (g, g))


def scale(x: NodeLike, factor: float) -> GradNode:
    x = as_node(x, "scale input")
    return GradNode(x.value * x.dtype.type(factor), (x,), lambda g: (g * x.dtype.type(factor),))


def concat_channels(*xs: NodeLike) -> GradNode:
    nodes = [as_node(x, "concat input") for x in xs]
    if not nodes:
        raise ShapeError("concat_channels needs at least one input")
    n, _, h, w = nodes[0].shape
    for node in nodes[1:]:
        if (node.shape[0], node.shape[2], node.shape[3]) != (n, h, w):
            raise ShapeError(
                f"concat_channels: {node.shape} does not match batch/spatial extents of {nodes[0].shape}"
            )
    sizes = [node.shape[1] for node in nodes]
    bounds = np.cumsum([0] + sizes)
    out = np.concatenate([node.value for node in nodes], axis=1)

    def backward(g: np.ndarray):
        return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(nodes)))

    return GradNode(out, nodes, backward)


def split_channels(x: NodeLike, sizes: Sequence[int]) -> tuple[GradNode, ...]:
    x = as_node(x, "split input")
    if sum(sizes) != x.shape[1]:
        raise ShapeError(f"split_channels: sizes {list(sizes)} do not sum to {x.shape[1]}")
    parts = []
    start = 0
    for size in sizes:
        lo, hi = start, start + size

        def backward(g: np.ndarray, lo=lo, hi=hi):
            full = np.zeros_like(x.value)
            full[:, lo:hi] = g
            return (full,)

        parts.append(GradNode(x.value[:, lo:hi].copy(), (x,), backward))
        start = hi
    return tuple(parts)


def l1_loss(pred: NodeLike, target: NodeLike) -> GradNode:
    """Mean absolute difference; gradient sign(pred - target) / count."""
    pred = as_node(pred, "l1_loss pred")
    target_v = value_of(target)
    validate_same_shape(pred.shape, target_v.shape, "l1_loss")
    diff = pred.value - target_v
    count = diff.size
    out = np.asarray(np.abs(diff).mean(), dtype=pred.dtype)

    def backward(g: np.ndarray):
        return (np.sign(diff) * (g / count),)

    return GradNode(out, (pred,), backward)
