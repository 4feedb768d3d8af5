"""Dense tensor transforms underneath the operational layers.

Activations and images travel as plain numpy arrays shaped (n, c, h, w),
row-major with w fastest. Column matrices are 2-D, one row per output
spatial position. Everything here is a pure function of its inputs;
geometry is zero-padded, unit-stride, no dilation.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "same_pad",
    "out_size",
    "im2col",
    "hadamard_pow",
    "build_power_cols",
    "gemm",
    "col2im_accumulate",
    "power_cols_nchw",
    "scatter_windows_nchw",
]


def same_pad(k: int) -> int:
    """Zero-padding that keeps the output the same size as the input.

    Only defined for odd kernels; an even kernel would need asymmetric
    padding, which is rejected here.
    """
    if k < 1:
        raise ValueError(f"kernel size must be >= 1, got {k}")
    if k % 2 == 0:
        raise ValueError(f"'same' padding undefined for even kernel size {k}")
    return (k - 1) // 2


def out_size(size: int, k: int, pad: int) -> int:
    """Output extent of a unit-stride sliding window along one axis."""
    return size + 2 * pad - k + 1


def _check_geometry(h: int, w: int, k: int, pad: int) -> tuple[int, int]:
    if k < 1:
        raise ValueError(f"kernel size must be >= 1, got {k}")
    if pad < 0:
        raise ValueError(f"padding must be >= 0, got {pad}")
    oh, ow = out_size(h, k, pad), out_size(w, k, pad)
    if oh < 1 or ow < 1:
        raise ValueError(
            f"kernel {k}x{k} larger than padded input {h + 2 * pad}x{w + 2 * pad}"
        )
    return oh, ow


def im2col(img: np.ndarray, k: int, pad: int) -> np.ndarray:
    """Arrange each k-by-k sliding window of a 2-D image as a matrix row.

    Row r holds the window at output position (r // W_out, r % W_out),
    flattened row-major. Samples outside the image are zero.

    Returns an (H_out * W_out, k * k) matrix.
    """
    img = np.asarray(img)
    if img.ndim != 2:
        raise ValueError(f"expected a 2-D single-channel image, got shape {img.shape}")
    h, w = img.shape
    oh, ow = _check_geometry(h, w, k, pad)
    if pad > 0:
        img = np.pad(img, pad)
    windows = sliding_window_view(img, (k, k))  # (oh, ow, k, k)
    return windows.reshape(oh * ow, k * k).copy()


def hadamard_pow(x: np.ndarray, q: int) -> np.ndarray:
    """Elementwise q-th power, built from q-1 multiplications by x.

    Each power is derived directly from x rather than from the previous
    power, so calls for different q are independent of each other.
    q = 0 is rejected: the generative sum starts at the linear term.
    """
    x = np.asarray(x)
    if q < 1:
        raise ValueError(f"power must be >= 1, got {q}")
    acc = x.copy()
    for _ in range(q - 1):
        acc *= x
    return acc


def build_power_cols(img: np.ndarray, k: int, pad: int, q_max: int) -> np.ndarray:
    """Horizontally concatenate im2col of Hadamard powers 1..q_max.

    Column block q (ascending) equals im2col(hadamard_pow(img, q)), so the
    result has k*k*q_max columns. q_max = 1 reduces to plain im2col.
    """
    if q_max < 1:
        raise ValueError(f"q_max must be >= 1, got {q_max}")
    blocks = [im2col(hadamard_pow(img, q), k, pad) for q in range(1, q_max + 1)]
    return np.concatenate(blocks, axis=1)


def gemm(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product of a column matrix with a dense weight matrix.

    Delegates to the BLAS behind numpy; for a fixed build and thread count
    the blocked summation order is fixed, so results are reproducible
    run to run.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"gemm expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"inner dimensions disagree: {a.shape} x {b.shape}")
    return a @ b


def col2im_accumulate(
    cols: np.ndarray, dims: tuple[int, int], k: int, pad: int
) -> np.ndarray:
    """Scatter-add im2col rows back onto the image plane.

    Exact adjoint of :func:`im2col` for the same geometry:
    <im2col(x), g> == <x, col2im_accumulate(g)> for all x, g.
    """
    cols = np.asarray(cols)
    h, w = dims
    oh, ow = _check_geometry(h, w, k, pad)
    if cols.shape != (oh * ow, k * k):
        raise ValueError(
            f"column matrix shape {cols.shape} does not match "
            f"expected {(oh * ow, k * k)} for dims {dims}, k={k}, pad={pad}"
        )
    canvas = np.zeros((h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    blocks = cols.reshape(oh, ow, k, k)
    for r in range(k):
        for t in range(k):
            canvas[r : r + oh, t : t + ow] += blocks[:, :, r, t]
    if pad > 0:
        canvas = canvas[pad : pad + h, pad : pad + w]
    return canvas


def power_cols_nchw(x: np.ndarray, k: int, pad: int, q_max: int) -> np.ndarray:
    """Power-augmented column matrix for a batched (n, c, h, w) tensor.

    Rows run over (image, output row, output col) with the image index
    outermost. Columns are grouped channel-major, then ascending power,
    then kernel position, matching the flattening of a weight block shaped
    (out, in, q, k, k). Powers are taken inside the gathered window matrix;
    since window extraction commutes with elementwise powers this equals
    concatenating per-channel :func:`build_power_cols` outputs bit for bit.
    """
    if q_max < 1:
        raise ValueError(f"q_max must be >= 1, got {q_max}")
    n, c, h, w = x.shape
    oh, ow = _check_geometry(h, w, k, pad)
    if pad > 0:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    windows = sliding_window_view(x, (k, k), axis=(2, 3))  # (n, c, oh, ow, k, k)
    base = np.ascontiguousarray(windows.transpose(0, 2, 3, 1, 4, 5)).reshape(
        n * oh * ow, c, k * k
    )
    cols = np.empty((n * oh * ow, c, q_max, k * k), dtype=x.dtype)
    for q in range(1, q_max + 1):
        cols[:, :, q - 1, :] = hadamard_pow(base, q)
    return cols.reshape(n * oh * ow, c * q_max * k * k)


def scatter_windows_nchw(
    d_windows: np.ndarray, dims: tuple[int, int, int, int], k: int, pad: int
) -> np.ndarray:
    """Adjoint of the batched window gather used by power_cols_nchw.

    `d_windows` is (n * oh * ow, c * k * k) with the same row/column layout
    as a q_max = 1 column matrix; returns the accumulated (n, c, h, w) field.
    """
    n, c, h, w = dims
    oh, ow = _check_geometry(h, w, k, pad)
    if d_windows.shape != (n * oh * ow, c * k * k):
        raise ValueError(
            f"window gradient shape {d_windows.shape} does not match "
            f"expected {(n * oh * ow, c * k * k)}"
        )
    blocks = np.ascontiguousarray(
        d_windows.reshape(n, oh, ow, c, k, k).transpose(0, 3, 1, 2, 4, 5)
    )
    canvas = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=d_windows.dtype)
    for r in range(k):
        for t in range(k):
            canvas[:, :, r : r + oh, t : t + ow] += blocks[:, :, :, :, r, t]
    if pad > 0:
        canvas = canvas[:, :, pad : pad + h, pad : pad + w]
    return canvas
