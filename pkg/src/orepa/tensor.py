"""Dense NCHW tensors, convolution geometry, and a direct 2-d convolution.

Convolution here is cross-correlation (no kernel flip), the deep-learning
convention. With symmetric "same" padding the output pixel at (h, w) reads
the input window centered at (h, w), i.e. taps are offset by
k - floor((K - 1) / 2) along each spatial axis.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_DTYPES = {"f32": np.float32, "f64": np.float64}


class ShapeError(ValueError):
    """Operand extents are incompatible along a named axis."""

    def __init__(self, axis, expected, got):
        self.axis = axis
        self.expected = expected
        self.got = got
        super().__init__(f"axis {axis!r}: expected {expected}, got {got}")


def np_dtype(name):
    if name not in _DTYPES:
        raise ValueError(f"unsupported dtype {name!r}, expected one of {sorted(_DTYPES)}")
    return np.dtype(_DTYPES[name])


def dtype_name(dt):
    dt = np.dtype(dt)
    for name, cand in _DTYPES.items():
        if np.dtype(cand) == dt:
            return name
    raise ValueError(f"unsupported numpy dtype {dt}")


def _freeze(arr):
    arr = np.ascontiguousarray(arr)
    dtype_name(arr.dtype)
    arr.setflags(write=False)
    return arr


class Tensor:
    """Immutable dense feature tensor, rank 3 (C, H, W) or rank 4 (B, C, H, W)."""

    __slots__ = ("data",)

    def __init__(self, data, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(np_dtype(dtype), copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        if arr.ndim not in (3, 4):
            raise ShapeError("rank", "3 or 4", arr.ndim)
        if any(e < 1 for e in arr.shape):
            raise ShapeError("extents", ">= 1", arr.shape)
        self.data = _freeze(arr)

    @classmethod
    def zeros(cls, shape, dtype="f64"):
        return cls(np.zeros(shape, dtype=np_dtype(dtype)))

    @property
    def shape(self):
        return tuple(self.data.shape)

    @property
    def dtype(self):
        return dtype_name(self.data.dtype)

    @property
    def rank(self):
        return self.data.ndim

    @property
    def channels(self):
        return self.data.shape[0] if self.data.ndim == 3 else self.data.shape[1]

    def astype(self, dtype):
        return Tensor(self.data.astype(np_dtype(dtype)))

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype})"


class KernelTensor:
    """Convolution weight in (Co, Ci // G, kH, kW) layout with a group count."""

    __slots__ = ("data", "groups")

    def __init__(self, data, groups=1, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(np_dtype(dtype), copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        if arr.ndim != 4:
            raise ShapeError("rank", 4, arr.ndim)
        if any(e < 1 for e in arr.shape):
            raise ShapeError("extents", ">= 1", arr.shape)
        if groups < 1 or arr.shape[0] % groups != 0:
            raise ShapeError("out_channels", f"divisible by groups={groups}", arr.shape[0])
        self.data = _freeze(arr)
        self.groups = int(groups)

    @property
    def out_channels(self):
        return self.data.shape[0]

    @property
    def in_channels_per_group(self):
        return self.data.shape[1]

    @property
    def in_channels(self):
        return self.data.shape[1] * self.groups

    @property
    def kh(self):
        return self.data.shape[2]

    @property
    def kw(self):
        return self.data.shape[3]

    @property
    def shape(self):
        return tuple(self.data.shape)

    @property
    def dtype(self):
        return dtype_name(self.data.dtype)

    def astype(self, dtype):
        return KernelTensor(self.data.astype(np_dtype(dtype)), groups=self.groups)

    def __repr__(self):
        return f"KernelTensor(shape={self.shape}, groups={self.groups}, dtype={self.dtype})"


@dataclass(frozen=True)
class ConvGeometry:
    """Stride and zero padding for one convolution. Dilation is fixed to 1.

    padding is (top, bottom, left, right).
    """

    stride: tuple = (1, 1)
    padding: tuple = (0, 0, 0, 0)

    def __post_init__(self):
        if len(self.stride) != 2 or any(s < 1 for s in self.stride):
            raise ShapeError("stride", ">= 1 pair", self.stride)
        if len(self.padding) != 4 or any(p < 0 for p in self.padding):
            raise ShapeError("padding", ">= 0 quadruple", self.padding)


def same_padding(kh, kw, stride=(1, 1)):
    """Center-aligned padding of total (K - 1) per axis; floor bias goes top-left."""
    p_t = (kh - 1) // 2
    p_l = (kw - 1) // 2
    return ConvGeometry(stride=tuple(stride), padding=(p_t, kh - 1 - p_t, p_l, kw - 1 - p_l))


def _batched(x):
    if x.rank == 3:
        return x.data[None], True
    return x.data, False


def _restore(arr, squeezed):
    return Tensor(arr[0] if squeezed else arr)


def pad_spatial(x, p_t, p_b, p_l, p_r):
    """Zero-pad the two trailing spatial axes."""
    if min(p_t, p_b, p_l, p_r) < 0:
        raise ShapeError("padding", ">= 0", (p_t, p_b, p_l, p_r))
    arr, squeezed = _batched(x)
    out = np.pad(arr, ((0, 0), (0, 0), (p_t, p_b), (p_l, p_r)))
    return _restore(out, squeezed)


def conv2d_direct(x, w, geom=None, bias=None):
    """Direct grouped 2-d cross-correlation of x with kernel w.

    x is rank 3 (C, H, W) or rank 4 (B, C, H, W); w is a KernelTensor.
    Output extents are floor((H + pT + pB - kH) / sH) + 1 and likewise
    for width; out-of-range input reads are zero via explicit padding.
    Accumulation happens in the storage dtype.
    """
    if geom is None:
        geom = ConvGeometry()
    arr, squeezed = _batched(x)
    if arr.shape[1] != w.in_channels:
        raise ShapeError("channels", w.in_channels, arr.shape[1])
    if arr.dtype != w.data.dtype:
        raise ShapeError("dtype", dtype_name(w.data.dtype), dtype_name(arr.dtype))
    p_t, p_b, p_l, p_r = geom.padding
    s_h, s_w = geom.stride
    xp = np.pad(arr, ((0, 0), (0, 0), (p_t, p_b), (p_l, p_r)))
    if xp.shape[2] < w.kh:
        raise ShapeError("height", f">= kernel height {w.kh}", xp.shape[2])
    if xp.shape[3] < w.kw:
        raise ShapeError("width", f">= kernel width {w.kw}", xp.shape[3])
    windows = np.lib.stride_tricks.sliding_window_view(xp, (w.kh, w.kw), axis=(2, 3))
    windows = windows[:, :, ::s_h, ::s_w]
    g = w.groups
    cig = w.in_channels_per_group
    cog = w.out_channels // g
    parts = []
    for gi in range(g):
        xg = windows[:, gi * cig:(gi + 1) * cig]
        wg = w.data[gi * cog:(gi + 1) * cog]
        parts.append(np.einsum("bchwij,ocij->bohw", xg, wg, optimize=True))
    y = parts[0] if g == 1 else np.concatenate(parts, axis=1)
    if bias is not None:
        bias = np.asarray(bias, dtype=arr.dtype)
        if bias.shape != (w.out_channels,):
            raise ShapeError("bias", (w.out_channels,), bias.shape)
        y = y + bias[None, :, None, None]
    return _restore(y, squeezed)


def add(x, y):
    """Elementwise sum of two equal-shape tensors."""
    if x.shape != y.shape:
        raise ShapeError("shape", x.shape, y.shape)
    return Tensor(x.data + y.data)


def scale_by_channel(x, gamma):
    """Multiply each channel c by gamma[c]."""
    gamma = np.asarray(gamma, dtype=x.data.dtype)
    if gamma.shape != (x.channels,):
        raise ShapeError("gamma", (x.channels,), gamma.shape)
    if x.rank == 3:
        return Tensor(x.data * gamma[:, None, None])
    return Tensor(x.data * gamma[None, :, None, None])


def sum_over(tensors):
    """Sum a non-empty list of equal-shape tensors in list order."""
    tensors = list(tensors)
    if not tensors:
        raise ValueError("sum_over needs at least one tensor")
    acc = tensors[0].data
    for t in tensors[1:]:
        if t.shape != tensors[0].shape:
            raise ShapeError("shape", tensors[0].shape, t.shape)
        acc = acc + t.data
    return Tensor(acc)
