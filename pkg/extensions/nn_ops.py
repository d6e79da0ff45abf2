"""
Network operators with hand-written reverse passes.

Feature maps are [C, H, W]; token matrices are [n, C]. Convolution is
cross-correlation. Bilinear sampling reads zeros outside the map.
"""
from typing import Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from extensions.autodiff import (
    Tensor,
    add_n,
    as_tensor,
    make_result,
    reshape,
    transpose,
)
from utils.errors import ValidationError

LAYER_NORM_EPS = 1e-5


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Affine map over the last dimension; leading dims broadcast."""
    if weight.ndim != 2 or x.shape[-1] != weight.shape[1]:
        raise ValidationError(f"linear: input {x.shape} does not match weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ValidationError(f"linear: bias {bias.shape} does not match weight {weight.shape}")
    out = x.values @ weight.values.T
    if bias is not None:
        out = out + bias.values

    def backward(g):
        g2 = g.reshape(-1, weight.shape[0])
        x2 = x.values.reshape(-1, weight.shape[1])
        grads = [(g @ weight.values), g2.T @ x2]
        if bias is not None:
            grads.append(g2.sum(axis=0))
        return tuple(grads)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_result(out, parents, backward, "linear")


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Optional[Tensor] = None,
    stride: int = 1,
    padding: int = 0,
) -> Tensor:
    """
    2-D cross-correlation of a single [C_in, H, W] map.

    Args:
        x: Input map [C_in, H, W]
        weight: Kernel [C_out, C_in, k, k]
        bias: Optional [C_out]
        stride: Step between output samples
        padding: Zero padding applied to both spatial sides

    Returns:
        Tensor [C_out, H', W'] with H' = floor((H + 2p - k) / stride) + 1
    """
    if x.ndim != 3 or weight.ndim != 4 or weight.shape[1] != x.shape[0]:
        raise ValidationError(f"conv2d: input {x.shape} does not match weight {weight.shape}")
    c_out, c_in, k, k2 = weight.shape
    if k != k2:
        raise ValidationError("conv2d: only square kernels are supported")
    xp = np.pad(x.values, ((0, 0), (padding, padding), (padding, padding)))
    hp, wp = xp.shape[1:]
    if hp < k or wp < k:
        raise ValidationError(f"conv2d: padded input {hp}x{wp} is smaller than kernel {k}")
    h_out = (hp - k) // stride + 1
    w_out = (wp - k) // stride + 1
    windows = sliding_window_view(xp, (k, k), axis=(1, 2))
    cols = windows[:, ::stride, ::stride][:, :h_out, :w_out]  # [C_in, H', W', k, k]
    out = np.tensordot(weight.values, cols, axes=([1, 2, 3], [0, 3, 4]))
    if bias is not None:
        out = out + bias.values[:, None, None]
    h, w = x.shape[1:]

    def backward(g):
        grad_w = np.tensordot(g, cols, axes=([1, 2], [1, 2]))
        grad_xp = np.zeros_like(xp)
        for a in range(k):
            for b in range(k):
                contrib = np.tensordot(weight.values[:, :, a, b], g, axes=([0], [0]))
                grad_xp[:, a:a + stride * h_out:stride, b:b + stride * w_out:stride] += contrib
        grads = [grad_xp[:, padding:padding + h, padding:padding + w], grad_w]
        if bias is not None:
            grads.append(g.sum(axis=(1, 2)))
        return tuple(grads)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_result(out, parents, backward, "conv2d")


def _axis_shape(ndim: int, axis: int, size: int) -> Tuple[int, ...]:
    shape = [1] * ndim
    shape[axis] = size
    return tuple(shape)


def layer_norm(
    x: Tensor,
    axis: int,
    gain: Tensor,
    bias: Tensor,
    eps: float = LAYER_NORM_EPS,
) -> Tensor:
    """Normalize to zero mean / unit variance along one axis, then apply gain and bias."""
    axis = axis % x.ndim
    size = x.shape[axis]
    if gain.shape != (size,) or bias.shape != (size,):
        raise ValidationError(f"layer_norm: gain/bias must have shape ({size},)")
    bshape = _axis_shape(x.ndim, axis, size)
    mean = x.values.mean(axis=axis, keepdims=True)
    centered = x.values - mean
    var = (centered ** 2).mean(axis=axis, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    g_b = gain.values.reshape(bshape)
    out = xhat * g_b + bias.values.reshape(bshape)
    other_axes = tuple(a for a in range(x.ndim) if a != axis)

    def backward(g):
        gxhat = g * g_b
        grad_x = inv_std / size * (
            size * gxhat
            - gxhat.sum(axis=axis, keepdims=True)
            - xhat * (gxhat * xhat).sum(axis=axis, keepdims=True)
        )
        grad_gain = (g * xhat).sum(axis=other_axes)
        grad_bias = g.sum(axis=other_axes)
        return grad_x, grad_gain, grad_bias

    return make_result(out, (x, gain, bias), backward, "layer_norm")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.values - x.values.max(axis=axis, keepdims=True)
    exp = np.exp(shifted)
    out = exp / exp.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_result(out, (x,), backward, "softmax")


def dropout(x: Tensor, rate: float, training: bool, seed: Union[int, Sequence[int]]) -> Tensor:
    """Inverted dropout; identity in inference mode or at rate 0."""
    if not 0.0 <= rate < 1.0:
        raise ValidationError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    rng = np.random.default_rng(seed)
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)

    def backward(g):
        return (g * keep,)

    return make_result(x.values * keep, (x,), backward, "dropout")


def bilinear_sample(feature_map: Tensor, coords: Union[Tensor, np.ndarray]) -> Tensor:
    """
    Sample a [C, H, W] map at n fractional (x=column, y=row) positions.

    Samples outside [-0.5, W-0.5] x [-0.5, H-0.5] return zero; neighbours that
    fall off the map contribute zero.

    Args:
        feature_map: Tensor [C, H, W]
        coords: [n, 2] array or tensor of (x, y)

    Returns:
        Tensor [C, n]
    """
    coords_t = as_tensor(coords)
    if feature_map.ndim != 3 or coords_t.ndim != 2 or coords_t.shape[1] != 2:
        raise ValidationError(f"bilinear_sample: bad shapes {feature_map.shape}, {coords_t.shape}")
    values = feature_map.values
    channels, height, width = values.shape
    x = coords_t.values[:, 0]
    y = coords_t.values[:, 1]
    n = x.shape[0]
    inside = (x >= -0.5) & (x <= width - 0.5) & (y >= -0.5) & (y <= height - 0.5)
    x0 = np.floor(x).astype(np.int64)
    y0 = np.floor(y).astype(np.int64)
    wx = x - x0
    wy = y - y0

    corners = []
    for dy, dx in ((0, 0), (0, 1), (1, 0), (1, 1)):
        yi = y0 + dy
        xi = x0 + dx
        valid = inside & (xi >= 0) & (xi < width) & (yi >= 0) & (yi < height)
        gathered = np.zeros((channels, n))
        gathered[:, valid] = values[:, yi[valid], xi[valid]]
        corners.append((yi, xi, valid, gathered))

    w00 = (1 - wx) * (1 - wy)
    w01 = wx * (1 - wy)
    w10 = (1 - wx) * wy
    w11 = wx * wy
    weights = (w00, w01, w10, w11)
    (_, _, _, v00), (_, _, _, v01), (_, _, _, v10), (_, _, _, v11) = corners
    out = v00 * w00 + v01 * w01 + v10 * w10 + v11 * w11
    out[:, ~inside] = 0.0

    def backward(g):
        g = np.where(inside, g, 0.0)
        grad_map = np.zeros_like(values)
        for (yi, xi, valid, _), weight in zip(corners, weights):
            if np.any(valid):
                np.add.at(
                    grad_map,
                    (slice(None), yi[valid], xi[valid]),
                    g[:, valid] * weight[valid],
                )
        grad_x = (g * ((v01 - v00) * (1 - wy) + (v11 - v10) * wy)).sum(axis=0)
        grad_y = (g * ((v10 - v00) * (1 - wx) + (v11 - v01) * wx)).sum(axis=0)
        grad_coords = np.stack([grad_x, grad_y], axis=1)
        return grad_map, grad_coords

    return make_result(out, (feature_map, coords_t), backward, "bilinear_sample")


def upsample(x: Tensor, height: int, width: int) -> Tensor:
    """Bilinear resize of a [C, h, w] map to exactly [C, height, width] (corner-aligned)."""
    _, h, w = x.shape
    rows = np.arange(height) * ((h - 1) / (height - 1)) if height > 1 else np.zeros(1)
    cols = np.arange(width) * ((w - 1) / (width - 1)) if width > 1 else np.zeros(1)
    grid_y, grid_x = np.meshgrid(rows, cols, indexing="ij")
    coords = np.stack([grid_x.reshape(-1), grid_y.reshape(-1)], axis=1)
    sampled = bilinear_sample(x, coords)
    return reshape(sampled, (x.shape[0], height, width))


def masked_max(x: Tensor, mask: np.ndarray) -> Tensor:
    """
    Max over axis 1 of [P, N, C] restricted to mask[P, N]; every row needs one valid entry.
    """
    if x.ndim != 3 or mask.shape != x.shape[:2]:
        raise ValidationError(f"masked_max: mask {mask.shape} does not match {x.shape}")
    if x.shape[0] and not np.all(mask.any(axis=1)):
        raise ValidationError("masked_max: every pillar needs at least one point")
    masked = np.where(mask[:, :, None], x.values, -np.inf)
    index = np.argmax(masked, axis=1)[:, None, :]
    out = np.take_along_axis(x.values, index, axis=1)[:, 0, :]

    def backward(g):
        full = np.zeros_like(x.values)
        np.put_along_axis(full, index, g[:, None, :], axis=1)
        return (full,)

    return make_result(out, (x,), backward, "masked_max")


def scatter_cells(values: Tensor, rows: np.ndarray, cols: np.ndarray, height: int, width: int) -> Tensor:
    """Place per-cell vectors [P, C] into a dense zero map [C, height, width]; cells are unique."""
    channels = values.shape[1]
    out = np.zeros((channels, height, width))
    out[:, rows, cols] = values.values.T

    def backward(g):
        return (g[:, rows, cols].T,)

    return make_result(out, (values,), backward, "scatter_cells")


def euclidean_distance(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValidationError(f"distance: dimension mismatch {a.shape} vs {b.shape}")
    diff = a.values - b.values
    dist = float(np.sqrt((diff ** 2).sum()))

    def backward(g):
        if dist == 0.0:
            zero = np.zeros_like(diff)
            return zero, zero
        direction = g * diff / dist
        return direction, -direction

    return make_result(np.array(dist), (a, b), backward, "euclidean_distance")


def l2_normalize(x: Tensor, eps: float = 1e-12) -> Tensor:
    norm = float(np.sqrt((x.values ** 2).sum()))
    scale = 1.0 / max(norm, eps)
    out = x.values * scale

    def backward(g):
        if norm <= eps:
            return (g * scale,)
        return ((g - out * (g * out).sum()) * scale,)

    return make_result(out, (x,), backward, "l2_normalize")


def to_tokens(feature_map: Tensor) -> Tensor:
    """[C, H, W] -> [H*W, C]"""
    channels, height, width = feature_map.shape
    return transpose(reshape(feature_map, (channels, height * width)), (1, 0))


def from_tokens(tokens: Tensor, height: int, width: int) -> Tensor:
    """[H*W, C] -> [C, H, W]"""
    channels = tokens.shape[1]
    return reshape(transpose(tokens, (1, 0)), (channels, height, width))


def channel_linear(feature_map: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Apply the same affine map to the channel vector of every cell."""
    _, height, width = feature_map.shape
    return from_tokens(linear(to_tokens(feature_map), weight, bias), height, width)


def sum_maps(maps: Sequence[Tensor]) -> Tensor:
    return add_n(list(maps))
