"""3D convolution, its adjoint, and their gradients.

Forward paths lower the convolution to batched matrix products against an
[N, C*k1*k2*k3, M] column tensor (M = output voxels), which keeps inputs and
outputs in their native N,C,D,H,W memory order: pointwise (1x1x1, stride 1)
convolutions need no data movement at all, and input gradients scatter-add
per kernel offset rather than looping over voxels.  The transposed
convolution is implemented literally as the adjoint of the strided
convolution with the same (Cout, Cin, k1, k2, k3) kernel layout, so the
inner-product identity <conv3(x;K), y> == <x, transposed_conv3(y;K)> holds
by construction.
"""

from __future__ import annotations

from typing import Optional

import numpy as np

from .autograd import Tensor, _record
from .errors import ShapeError

Triple = tuple[int, int, int]


def _as_triple(v) -> Triple:
    if isinstance(v, int):
        return (v, v, v)
    t = tuple(int(x) for x in v)
    if len(t) != 3:
        raise ValueError(f"expected 3 extents, got {v!r}")
    return t


def _pad3(x: np.ndarray, pad: Triple) -> np.ndarray:
    if pad == (0, 0, 0):
        return x
    p1, p2, p3 = pad
    return np.pad(x, ((0, 0), (0, 0), (p1, p1), (p2, p2), (p3, p3)))


def _out_extent(size: int, k: int, s: int, p: int) -> int:
    return (size + 2 * p - k) // s + 1


def _im2col(x: np.ndarray, kshape: Triple, stride: Triple, pad: Triple) -> np.ndarray:
    """Column tensor [N, C*k1*k2*k3, Do*Ho*Wo] for a padded gather."""
    n, c = x.shape[:2]
    if kshape == (1, 1, 1) and stride == (1, 1, 1) and pad == (0, 0, 0):
        return x.reshape(n, c, -1)  # pointwise: free view
    xpad = _pad3(x, pad)
    win = np.lib.stride_tricks.sliding_window_view(xpad, kshape, axis=(2, 3, 4))
    win = win[:, :, :: stride[0], :: stride[1], :: stride[2]]
    do, ho, wo = win.shape[2:5]
    cols = win.transpose(0, 1, 5, 6, 7, 2, 3, 4).reshape(
        n, c * kshape[0] * kshape[1] * kshape[2], do * ho * wo)
    return cols


def conv3_raw(x: np.ndarray, kernel: np.ndarray, bias: Optional[np.ndarray],
              stride: Triple, pad: Triple,
              cols: Optional[np.ndarray] = None) -> tuple[np.ndarray, np.ndarray]:
    """Plain-array strided convolution; returns (output, column tensor)."""
    n, cin = x.shape[:2]
    cout, kc = kernel.shape[:2]
    kshape = kernel.shape[2:]
    if kc != cin:
        raise ShapeError(f"conv3: input has {cin} channels, kernel expects {kc}")
    if any(e <= 0 for e in x.shape):
        raise ShapeError(f"conv3: zero-extent input {x.shape}")
    out_sp = tuple(_out_extent(x.shape[2 + i], kshape[i], stride[i], pad[i]) for i in range(3))
    if any(e <= 0 for e in out_sp):
        raise ShapeError(f"conv3: kernel {kshape} does not fit input {x.shape[2:]} "
                         f"with stride {stride} and padding {pad}")
    if cols is None:
        cols = _im2col(x, kshape, stride, pad)
    kmat = kernel.reshape(cout, -1)
    y = np.matmul(kmat, cols)  # [N, Cout, M]
    if bias is not None:
        y += bias.reshape(1, cout, 1)
    return y.reshape(n, cout, *out_sp), cols


def conv3_grad_kernel_raw(cols: np.ndarray, gy: np.ndarray, kernel_shape) -> np.ndarray:
    cout = kernel_shape[0]
    n = gy.shape[0]
    gmat = gy.reshape(n, cout, -1)
    gk = np.matmul(gmat, cols.transpose(0, 2, 1)).sum(axis=0)
    return gk.reshape(kernel_shape)


def conv3_grad_input_raw(gy: np.ndarray, kernel: np.ndarray, stride: Triple,
                         pad: Triple, x_spatial: Triple) -> np.ndarray:
    """Scatter-add column gradients back onto the (padded) input grid."""
    n = gy.shape[0]
    cout, cin, k1, k2, k3 = kernel.shape
    do, ho, wo = gy.shape[2:]
    s1, s2, s3 = stride
    gmat = gy.reshape(n, cout, -1)
    kmat = kernel.reshape(cout, -1)
    gcols = np.matmul(kmat.T, gmat)  # [N, Cin*k1*k2*k3, M]
    if (k1, k2, k3) == (1, 1, 1) and stride == (1, 1, 1) and pad == (0, 0, 0):
        return gcols.reshape(n, cin, *x_spatial)
    gcols = gcols.reshape(n, cin, k1, k2, k3, do, ho, wo)
    dp = x_spatial[0] + 2 * pad[0]
    hp = x_spatial[1] + 2 * pad[1]
    wp = x_spatial[2] + 2 * pad[2]
    gpad = np.zeros((n, cin, dp, hp, wp), dtype=gy.dtype)
    for a in range(k1):
        for b in range(k2):
            for c in range(k3):
                gpad[:, :, a:a + s1 * do:s1, b:b + s2 * ho:s2, c:c + s3 * wo:s3] += \
                    gcols[:, :, a, b, c]
    p1, p2, p3 = pad
    if pad == (0, 0, 0):
        return gpad
    return gpad[:, :, p1:p1 + x_spatial[0], p2:p2 + x_spatial[1], p3:p3 + x_spatial[2]]


def same_padding(kshape: Triple) -> Triple:
    if any(k % 2 == 0 for k in kshape):
        raise ShapeError(f"'same' padding requires odd kernel extents, got {kshape}")
    return tuple((k - 1) // 2 for k in kshape)


def conv3(x: Tensor, kernel: Tensor, bias: Optional[Tensor] = None,
          stride=1, padding="same") -> Tensor:
    """Strided 3D convolution of an N,Cin,D,H,W tensor.

    Kernel layout is (Cout, Cin, k1, k2, k3) with odd extents; padding is
    either the string "same" or an explicit per-axis triple.
    """
    stride = _as_triple(stride)
    if any(s < 1 for s in stride):
        raise ValueError(f"conv3 stride must be >= 1 per axis, got {stride}")
    if x.data.ndim != 5 or kernel.data.ndim != 5:
        raise ShapeError(f"conv3 expects 5-d input and kernel, got {x.shape} and {kernel.shape}")
    kshape = kernel.shape[2:]
    if any(k % 2 == 0 for k in kshape):
        raise ShapeError(f"conv3 kernel extents must be odd, got {kshape}")
    pad = same_padding(kshape) if padding == "same" else _as_triple(padding)
    if bias is not None and bias.shape != (kernel.shape[0],):
        raise ShapeError(f"conv3 bias must have shape ({kernel.shape[0]},), got {bias.shape}")

    y, cols = conv3_raw(x.data, kernel.data, None if bias is None else bias.data, stride, pad)
    x_spatial = x.shape[2:]

    def bwd(g):
        gx = conv3_grad_input_raw(g, kernel.data, stride, pad, x_spatial)
        gk = conv3_grad_kernel_raw(cols, g, kernel.shape)
        if bias is None:
            return gx, gk
        return gx, gk, g.sum(axis=(0, 2, 3, 4))

    inputs = (x, kernel) if bias is None else (x, kernel, bias)
    return _record(inputs, y, bwd)


def transposed_conv3(x: Tensor, kernel: Tensor, stride=2) -> Tensor:
    """Adjoint of conv3 with the same kernel: upsamples spatial extents.

    x has Cout(kernel) channels; the result has Cin(kernel) channels and
    spatial extents (d - 1) * stride + k, which is d * stride when k equals
    the stride (the standard decoder configuration).
    """
    stride = _as_triple(stride)
    if x.data.ndim != 5 or kernel.data.ndim != 5:
        raise ShapeError(f"transposed_conv3 expects 5-d tensors, got {x.shape} and {kernel.shape}")
    cout, cin = kernel.shape[:2]
    if x.shape[1] != cout:
        raise ShapeError(f"transposed_conv3: input has {x.shape[1]} channels, "
                         f"kernel expects {cout}")
    kshape = kernel.shape[2:]
    out_sp = tuple((x.shape[2 + i] - 1) * stride[i] + kshape[i] for i in range(3))
    y = conv3_grad_input_raw(x.data, kernel.data, stride, (0, 0, 0), out_sp)

    def bwd(g):
        gx, gcols = conv3_raw(g, kernel.data, None, stride, (0, 0, 0))
        gk = conv3_grad_kernel_raw(gcols, x.data, kernel.shape)
        return gx, gk

    return _record((x, kernel), y, bwd)
