"""Denoising network construction: presets, batch norm, residual head.

A network is a stack of operational layers in the DnCNN arrangement:
first layer carries an activation but no batch norm, middle layers carry
batch norm plus activation, the last layer is bare. With the residual head
enabled the stack predicts the noise field, which is subtracted from the
input. Inputs are expected in [0, 1] and are shifted to [-0.5, 0.5] before
the first layer to keep the higher input powers well conditioned.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .layers import (
    ConvLayer,
    OpLayer,
    backward_with_cols,
    forward_gemm_cached,
)

__all__ = [
    "NetworkSpec",
    "BatchNorm",
    "Network",
    "PRESET_NAMES",
    "preset",
    "build",
    "param_count",
    "as_conv_network",
]

INPUT_SHIFT = 0.5


@dataclass
class NetworkSpec:
    """Declarative description of one architecture row."""

    depth: int
    hidden_ch: int = 64
    k: int = 3
    q: int = 1
    use_bn: bool = True
    activation: str = "relu"
    residual: bool = True
    in_ch: int = 3
    out_ch: int = 3

    def validate(self) -> "NetworkSpec":
        if self.depth < 2:
            raise ValueError(f"depth must be >= 2, got {self.depth}")
        if self.q < 1:
            raise ValueError(f"q must be >= 1, got {self.q}")
        if self.activation not in ("relu", "tanh"):
            raise ValueError(f"unknown activation {self.activation!r}")
        if min(self.hidden_ch, self.in_ch, self.out_ch) < 1:
            raise ValueError("channel counts must be >= 1")
        if self.k < 1 or self.k % 2 == 0:
            raise ValueError(f"kernel size must be odd and >= 1, got {self.k}")
        return self

    def to_dict(self) -> dict:
        return {
            "depth": self.depth,
            "hidden_ch": self.hidden_ch,
            "k": self.k,
            "q": self.q,
            "use_bn": self.use_bn,
            "activation": self.activation,
            "residual": self.residual,
            "in_ch": self.in_ch,
            "out_ch": self.out_ch,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        return cls(**d).validate()


_PRESETS = {
    # 17-layer baseline CNN and its operational counterparts; widths and
    # orders follow the published architecture table.
    "dncnn": NetworkSpec(depth=17, q=1, activation="relu"),
    "selfonn17": NetworkSpec(depth=17, q=3, activation="tanh"),
    "selfonn8": NetworkSpec(depth=8, q=3, activation="tanh"),
    "selfonn4_3": NetworkSpec(depth=4, q=3, activation="tanh"),
    "selfonn4_5": NetworkSpec(depth=4, q=5, activation="tanh"),
}

PRESET_NAMES = tuple(_PRESETS)


def preset(name: str) -> NetworkSpec:
    """A fresh copy of a named architecture preset."""
    try:
        return replace(_PRESETS[name])
    except KeyError:
        raise ValueError(f"unknown preset {name!r}; choose from {PRESET_NAMES}") from None


def param_count(spec: NetworkSpec) -> int:
    """Exact trainable parameter total for a spec, by closed form."""
    spec.validate()
    kk = spec.k * spec.k * spec.q
    h = spec.hidden_ch
    weights = kk * (spec.in_ch * h + (spec.depth - 2) * h * h + h * spec.out_ch)
    bn = 2 * h * (spec.depth - 2) if spec.use_bn else 0
    return weights + bn


class BatchNorm:
    """Per-channel batch normalization over (n, h, w).

    Training mode normalizes by the batch statistics and, unless disabled,
    folds them into the running estimates; eval mode uses the running
    statistics only. The running variance stores the same biased statistic
    used for normalization.
    """

    def __init__(self, ch: int, eps: float = 1e-5, momentum: float = 0.1, dtype=np.float64):
        self.ch = ch
        self.eps = eps
        self.momentum = momentum
        self.gamma = np.ones(ch, dtype=dtype)
        self.beta = np.zeros(ch, dtype=dtype)
        self.running_mean = np.zeros(ch, dtype=dtype)
        self.running_var = np.ones(ch, dtype=dtype)

    def forward(self, x, train: bool, update_stats: bool = True):
        if train:
            mean = x.mean(axis=(0, 2, 3))
            var = x.var(axis=(0, 2, 3))
            if update_stats:
                m = self.momentum
                self.running_mean += m * (mean - self.running_mean)
                self.running_var += m * (var - self.running_var)
        else:
            mean, var = self.running_mean, self.running_var
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xc = x - mean[None, :, None, None]
        x_hat = xc * inv_std[None, :, None, None]
        y = self.gamma[None, :, None, None] * x_hat + self.beta[None, :, None, None]
        cache = (xc, inv_std, x_hat) if train else None
        return y, cache

    def backward(self, cache, d_out):
        xc, inv_std, x_hat = cache
        m = xc.shape[0] * xc.shape[2] * xc.shape[3]
        d_gamma = np.sum(d_out * x_hat, axis=(0, 2, 3))
        d_beta = np.sum(d_out, axis=(0, 2, 3))
        d_xhat = d_out * self.gamma[None, :, None, None]
        inv = inv_std[None, :, None, None]
        d_var = np.sum(d_xhat * xc * (-0.5) * inv**3, axis=(0, 2, 3))
        d_mean = np.sum(-d_xhat * inv, axis=(0, 2, 3)) + d_var * (-2.0 / m) * np.sum(
            xc, axis=(0, 2, 3)
        )
        d_x = (
            d_xhat * inv
            + (2.0 / m) * d_var[None, :, None, None] * xc
            + d_mean[None, :, None, None] / m
        )
        return d_x, d_gamma, d_beta


def _act_forward(name: str, x):
    if name == "relu":
        return np.maximum(x, 0.0), x > 0
    if name == "tanh":
        t = np.tanh(x)
        return t, t
    raise ValueError(f"unknown activation {name!r}")


def _act_backward(name: str, cache, d_out):
    if name == "relu":
        return d_out * cache
    if name == "tanh":
        return d_out * (1.0 - cache * cache)
    raise ValueError(f"unknown activation {name!r}")


@dataclass
class Block:
    op: OpLayer
    bn: BatchNorm | None
    act: str | None


@dataclass
class BlockGrads:
    d_weights: np.ndarray
    d_gamma: np.ndarray | None = None
    d_beta: np.ndarray | None = None


@dataclass
class _BlockCache:
    x: np.ndarray
    cols: np.ndarray
    bn: tuple | None
    act: np.ndarray | None


class Network:
    """An instantiated layer stack plus its spec."""

    def __init__(self, spec: NetworkSpec, blocks: list[Block], dtype=np.float64):
        self.spec = spec
        self.blocks = blocks
        self.dtype = np.dtype(dtype)

    # -- evaluation ---------------------------------------------------------

    def _check_input(self, x):
        x = np.asarray(x, dtype=self.dtype)
        if x.ndim != 4 or x.shape[1] != self.spec.in_ch:
            raise ValueError(
                f"expected (n, {self.spec.in_ch}, h, w) input, got shape {x.shape}"
            )
        return x

    def forward(self, x, train: bool = False, update_stats: bool = True):
        """Evaluate the network; eval mode is pure and deterministic."""
        x = self._check_input(x)
        h = x - INPUT_SHIFT
        for block in self.blocks:
            h = block.op.forward(h)
            if block.bn is not None:
                h, _ = block.bn.forward(h, train, update_stats)
            if block.act is not None:
                h, _ = _act_forward(block.act, h)
        if self.spec.residual:
            return x - h
        return h + INPUT_SHIFT

    def forward_with_cache(self, x, update_stats: bool = True):
        """Training-mode forward keeping everything backward needs."""
        x = self._check_input(x)
        h = x - INPUT_SHIFT
        caches = []
        for block in self.blocks:
            x_in = h
            h, cols = forward_gemm_cached(block.op, h)
            bn_cache = act_cache = None
            if block.bn is not None:
                h, bn_cache = block.bn.forward(h, train=True, update_stats=update_stats)
            if block.act is not None:
                h, act_cache = _act_forward(block.act, h)
            caches.append(_BlockCache(x=x_in, cols=cols, bn=bn_cache, act=act_cache))
        y = x - h if self.spec.residual else h + INPUT_SHIFT
        return y, caches

    def backward(self, caches, d_y):
        """Gradients of a scalar objective through the cached forward.

        Returns (per-block gradients, gradient w.r.t. the network input).
        """
        d_h = -d_y if self.spec.residual else d_y
        grads: list[BlockGrads] = [None] * len(self.blocks)
        for idx in range(len(self.blocks) - 1, -1, -1):
            block, cache = self.blocks[idx], caches[idx]
            if block.act is not None:
                d_h = _act_backward(block.act, cache.act, d_h)
            bg = BlockGrads(d_weights=None)
            if block.bn is not None:
                d_h, bg.d_gamma, bg.d_beta = block.bn.backward(cache.bn, d_h)
            lg = backward_with_cols(block.op, cache.x, cache.cols, d_h)
            bg.d_weights = lg.d_weights
            grads[idx] = bg
            d_h = lg.d_input
        d_x = d_y + d_h if self.spec.residual else d_h
        return grads, d_x

    # -- state access -------------------------------------------------------

    def parameters(self):
        """Live trainable arrays in checkpoint order."""
        params = []
        for block in self.blocks:
            params.append(block.op.weights)
            if block.bn is not None:
                params.append(block.bn.gamma)
                params.append(block.bn.beta)
        return params

    def grads_as_list(self, grads):
        flat = []
        for block, bg in zip(self.blocks, grads):
            flat.append(bg.d_weights)
            if block.bn is not None:
                flat.append(bg.d_gamma)
                flat.append(bg.d_beta)
        return flat

    def state_arrays(self):
        """Live arrays in serialization order: per layer, kernel weights,
        then BN gamma/beta/running mean/running variance."""
        arrays = []
        for block in self.blocks:
            arrays.append(block.op.weights)
            if block.bn is not None:
                arrays.extend(
                    [block.bn.gamma, block.bn.beta, block.bn.running_mean, block.bn.running_var]
                )
        return arrays

    def param_count(self) -> int:
        return sum(a.size for a in self.parameters())


def build(spec: NetworkSpec, rng: np.random.Generator | int | None = 0, dtype=np.float64) -> Network:
    """Instantiate the layer stack a spec describes. No layer uses bias."""
    spec.validate()
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    blocks = []
    for i in range(spec.depth):
        in_ch = spec.in_ch if i == 0 else spec.hidden_ch
        out_ch = spec.out_ch if i == spec.depth - 1 else spec.hidden_ch
        op = OpLayer(in_ch, out_ch, spec.k, spec.q, rng=rng, dtype=dtype)
        last = i == spec.depth - 1
        bn = BatchNorm(out_ch, dtype=dtype) if (spec.use_bn and 0 < i < spec.depth - 1) else None
        act = None if last else spec.activation
        blocks.append(Block(op=op, bn=bn, act=act))
    net = Network(spec, blocks, dtype=dtype)
    assert net.param_count() == param_count(spec)
    return net


def as_conv_network(net: Network) -> Network:
    """The same network with every operational layer replaced by a
    reference convolutional layer sharing its linear kernel. Only valid
    for q = 1 specs; used to check the convolution reduction."""
    if net.spec.q != 1:
        raise ValueError("convolution reduction requires q == 1")
    blocks = []
    for block in net.blocks:
        conv = ConvLayer(
            block.op.in_ch,
            block.op.out_ch,
            block.op.k,
            weights=block.op.weights[:, :, 0],
            dtype=net.dtype,
        )
        bn = None
        if block.bn is not None:
            bn = BatchNorm(block.bn.ch, block.bn.eps, block.bn.momentum, dtype=net.dtype)
            bn.gamma = block.bn.gamma.copy()
            bn.beta = block.bn.beta.copy()
            bn.running_mean = block.bn.running_mean.copy()
            bn.running_var = block.bn.running_var.copy()
        blocks.append(Block(op=conv, bn=bn, act=block.act))
    return Network(net.spec, blocks, dtype=net.dtype)
