"""Generative-neuron operational layers.

An operational layer maps (n, in_ch, h, w) to (n, out_ch, h, w) by applying
a learnable polynomial of order q to each input sample inside every kernel
window and summing, so q = 1 is exactly a convolutional layer. Three forward
paths compute the same map:

* :func:`forward_naive`  - explicit loops over the defining sum (reference),
* :func:`forward_qconv`  - q direct 2-D convolutions of the input powers,
* :func:`forward_gemm`   - one matrix product on a power-augmented column
  matrix (the fast path, and the one :meth:`OpLayer.forward` uses).

Backpropagation is hand-derived against the same sum; see :func:`backward`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensorops import (
    gemm,
    hadamard_pow,
    out_size,
    power_cols_nchw,
    same_pad,
    scatter_windows_nchw,
)

__all__ = [
    "OpLayer",
    "ConvLayer",
    "LayerGrads",
    "forward_naive",
    "forward_qconv",
    "forward_gemm",
    "backward",
    "conv2d_direct",
]


class OpLayer:
    """One operational layer's learnable state.

    Weights are shaped (out_ch, in_ch, q, k, k); the slice q = 0 holds the
    linear (convolutional) kernel and higher slices the coefficients of the
    higher input powers. Padding is always the symmetric 'same' amount, so
    even kernel sizes are rejected. Bias is supported but off by default.
    """

    def __init__(
        self,
        in_ch: int,
        out_ch: int,
        k: int,
        q: int = 1,
        *,
        weights: np.ndarray | None = None,
        bias: bool | np.ndarray = False,
        rng: np.random.Generator | int | None = 0,
        dtype=np.float64,
    ):
        if in_ch < 1 or out_ch < 1:
            raise ValueError("channel counts must be >= 1")
        if q < 1:
            raise ValueError(f"polynomial order must be >= 1, got {q}")
        self.in_ch = in_ch
        self.out_ch = out_ch
        self.k = k
        self.q = q
        self.pad = same_pad(k)
        shape = (out_ch, in_ch, q, k, k)
        if weights is not None:
            weights = np.asarray(weights, dtype=dtype)
            if weights.shape != shape:
                raise ValueError(f"weights shape {weights.shape}, expected {shape}")
            self.weights = weights.copy()
        else:
            self.weights = init_weights(shape, rng, dtype)
        if isinstance(bias, bool):
            self.bias = np.zeros(out_ch, dtype=dtype) if bias else None
        else:
            bias = np.asarray(bias, dtype=dtype)
            if bias.shape != (out_ch,):
                raise ValueError(f"bias shape {bias.shape}, expected ({out_ch},)")
            self.bias = bias.copy()

    @property
    def dtype(self):
        return self.weights.dtype

    def forward(self, x: np.ndarray) -> np.ndarray:
        return forward_gemm(self, x)

    def __repr__(self):
        return (
            f"OpLayer({self.in_ch}->{self.out_ch}, k={self.k}, q={self.q}, "
            f"bias={self.bias is not None})"
        )


def init_weights(shape, rng, dtype) -> np.ndarray:
    """Per-order scaled uniform init for a (out, in, q, k, k) weight block.

    The linear slice gets fan-in-scaled uniform values; the slice for power
    q is scaled down by 1/q^2 so a fresh layer starts near its convolutional
    operating point. Values are snapped to the float32 grid so a freshly
    built layer survives checkpoint serialization exactly.
    """
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    out_ch, in_ch, q, k, _ = shape
    bound = np.sqrt(6.0 / (in_ch * k * k))
    w = rng.uniform(-bound, bound, size=shape)
    for qi in range(2, q + 1):
        w[:, :, qi - 1] /= qi * qi
    return w.astype(np.float32).astype(dtype)


@dataclass
class LayerGrads:
    """Gradients mirroring an OpLayer's learnable state plus its input."""

    d_weights: np.ndarray
    d_bias: np.ndarray | None
    d_input: np.ndarray


def _check_input(layer: OpLayer, x: np.ndarray) -> tuple[int, int, int, int, int, int]:
    x = np.asarray(x)
    if x.ndim != 4:
        raise ValueError(f"expected (n, c, h, w) input, got shape {x.shape}")
    n, c, h, w = x.shape
    if c != layer.in_ch:
        raise ValueError(f"input has {c} channels, layer expects {layer.in_ch}")
    oh = out_size(h, layer.k, layer.pad)
    ow = out_size(w, layer.k, layer.pad)
    if oh < 1 or ow < 1:
        raise ValueError(f"input {h}x{w} smaller than kernel {layer.k}")
    return n, c, h, w, oh, ow


def forward_naive(layer: OpLayer, x: np.ndarray) -> np.ndarray:
    """Reference forward: the defining sum written as explicit loops.

    out[o](m, n) = bias[o]
                 + sum_i sum_q sum_r sum_t w[o,i,q,r,t] * x[i](m+r, n+t)^q
    evaluated on the zero-padded input.
    """
    n, c, h, w, oh, ow = _check_input(layer, x)
    k, p = layer.k, layer.pad
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    out = np.zeros((n, layer.out_ch, oh, ow), dtype=xp.dtype)
    for o in range(layer.out_ch):
        acc = out[:, o]
        for i in range(c):
            for q in range(1, layer.q + 1):
                xq = hadamard_pow(xp[:, i], q)
                for r in range(k):
                    for t in range(k):
                        acc += layer.weights[o, i, q - 1, r, t] * xq[:, r : r + oh, t : t + ow]
        if layer.bias is not None:
            acc += layer.bias[o]
    return out


def conv2d_direct(x: np.ndarray, w4: np.ndarray, pad: int) -> np.ndarray:
    """Direct 2-D correlation of (n, c, h, w) with an (out, c, k, k) kernel.

    Shift-and-add over kernel positions; independent of the column-matrix
    machinery so it can serve as a second route in equivalence checks.
    """
    n, c, h, w = x.shape
    out_ch, wc, k, _ = w4.shape
    if wc != c:
        raise ValueError(f"kernel expects {wc} channels, input has {c}")
    oh, ow = out_size(h, k, pad), out_size(w, k, pad)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    out = np.zeros((n, out_ch, oh, ow), dtype=x.dtype)
    for r in range(k):
        for t in range(k):
            # (n, c, oh, ow) x (out, c) contracted over c
            part = np.tensordot(xp[:, :, r : r + oh, t : t + ow], w4[:, :, r, t], axes=([1], [1]))
            out += part.transpose(0, 3, 1, 2)
    return out


def forward_qconv(layer: OpLayer, x: np.ndarray) -> np.ndarray:
    """Forward as a sum of q plain convolutions of the input powers."""
    _check_input(layer, x)
    out = None
    for q in range(1, layer.q + 1):
        xq = hadamard_pow(x, q)
        part = conv2d_direct(xq, layer.weights[:, :, q - 1], layer.pad)
        out = part if out is None else out + part
    if layer.bias is not None:
        out += layer.bias[None, :, None, None]
    return out


def _gemm_forward(
    x: np.ndarray,
    w5: np.ndarray,
    bias: np.ndarray | None,
    k: int,
    pad: int,
    q: int,
) -> tuple[np.ndarray, np.ndarray]:
    """Shared column-matrix forward; returns (output, column matrix)."""
    n, _, h, w = x.shape
    out_ch = w5.shape[0]
    oh, ow = out_size(h, k, pad), out_size(w, k, pad)
    cols = power_cols_nchw(x, k, pad, q)
    w2d = np.ascontiguousarray(w5.reshape(out_ch, -1).T)
    y = gemm(cols, w2d)  # (n*oh*ow, out_ch)
    y = np.ascontiguousarray(y.reshape(n, oh, ow, out_ch).transpose(0, 3, 1, 2))
    if bias is not None:
        y += bias[None, :, None, None]
    return y, cols


def forward_gemm(layer: OpLayer, x: np.ndarray) -> np.ndarray:
    """Fast forward: one matrix product on the power-augmented columns.

    All output neurons share one weight matrix, so the whole layer is a
    single GEMM per call.
    """
    _check_input(layer, x)
    y, _ = _gemm_forward(x, layer.weights, layer.bias, layer.k, layer.pad, layer.q)
    return y


def forward_gemm_cached(layer: OpLayer, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Forward via the gemm path, also returning the column matrix.

    The column matrix is exactly what :func:`backward_with_cols` needs, so
    a training step can avoid rebuilding it.
    """
    _check_input(layer, x)
    return _gemm_forward(x, layer.weights, layer.bias, layer.k, layer.pad, layer.q)


def backward(layer: OpLayer, x: np.ndarray, d_out: np.ndarray) -> LayerGrads:
    """Gradients of the layer map w.r.t. weights, bias, and input.

    d_weights[o,i,q,r,t] = sum_{m,n} d_out[o](m,n) * x[i](m+r, n+t)^q
    d_bias[o]            = sum d_out[o]
    d_input[i]           = sum_q q * x[i]^(q-1) (.) adjoint-scattered
                           correlation of d_out with the q-th kernel slice.
    """
    n, c, h, w, oh, ow = _check_input(layer, x)
    cols = power_cols_nchw(x, layer.k, layer.pad, layer.q)
    return backward_with_cols(layer, x, cols, d_out)


def backward_with_cols(
    layer: OpLayer, x: np.ndarray, cols: np.ndarray, d_out: np.ndarray
) -> LayerGrads:
    """As :func:`backward`, reusing the forward pass's column matrix."""
    n, c, h, w, oh, ow = _check_input(layer, x)
    d_out = np.asarray(d_out)
    if d_out.shape != (n, layer.out_ch, oh, ow):
        raise ValueError(
            f"d_out shape {d_out.shape} does not match output {(n, layer.out_ch, oh, ow)}"
        )
    k, q = layer.k, layer.q
    rows = n * oh * ow
    dout2d = np.ascontiguousarray(d_out.transpose(0, 2, 3, 1).reshape(rows, layer.out_ch))

    w_flat = layer.weights.reshape(layer.out_ch, -1)
    d_w = gemm(cols.T, dout2d).T.reshape(layer.weights.shape).copy()
    d_cols = gemm(dout2d, w_flat)  # (rows, c*q*k*k)

    # Chain rule through the powers in gathered-window space: block j of the
    # column matrix already holds base^(j+1), so base^(q-1) is block q-2.
    cv = cols.reshape(rows, c, q, k * k)
    dv = d_cols.reshape(rows, c, q, k * k)
    d_base = dv[:, :, 0, :].copy()
    for qi in range(2, q + 1):
        d_base += qi * dv[:, :, qi - 1, :] * cv[:, :, qi - 2, :]
    d_input = scatter_windows_nchw(
        d_base.reshape(rows, c * k * k), (n, c, h, w), k, layer.pad
    )

    d_bias = d_out.sum(axis=(0, 2, 3)) if layer.bias is not None else None
    return LayerGrads(d_weights=d_w, d_bias=d_bias, d_input=d_input)


class ConvLayer:
    """Reference convolutional layer.

    Holds a rank-4 kernel and evaluates through the identical column-matrix
    code path as a q = 1 OpLayer, so the two agree bit for bit.
    """

    def __init__(
        self,
        in_ch: int,
        out_ch: int,
        k: int,
        *,
        weights: np.ndarray | None = None,
        bias: bool | np.ndarray = False,
        rng: np.random.Generator | int | None = 0,
        dtype=np.float64,
    ):
        inner = OpLayer(in_ch, out_ch, k, 1, weights=None if weights is None else np.asarray(weights)[:, :, None], bias=bias, rng=rng, dtype=dtype)
        self.in_ch = in_ch
        self.out_ch = out_ch
        self.k = k
        self.q = 1
        self.pad = inner.pad
        self.weights = inner.weights[:, :, 0]  # (out, in, k, k) view of the q block
        self._inner = inner
        self.bias = inner.bias

    def forward(self, x: np.ndarray) -> np.ndarray:
        return forward_gemm(self._inner, x)
