"""Neural building blocks: dense, layer norm, multi-head attention, 1-D ConvLSTM.

All layers accept arbitrary leading batch axes.  ConvLSTM gate weights are
stored stacked along the output-channel axis in gate order (i, f, o, g).
"""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import ConfigurationError, DimensionError


def _param(data: np.ndarray) -> Tensor:
    return Tensor(data, requires_grad=True)


def _uniform(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Module:
    """Parameter container; parameters are ``requires_grad`` tensors held as attributes."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def param_count(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self) -> None:
        ag.zero_grads(self.parameters())

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def param_count(layer: Module) -> int:
    return layer.param_count()


class Dense(Module):
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator):
        self.in_features = in_features
        self.out_features = out_features
        self.weight = _param(_uniform(rng, in_features, (in_features, out_features)))
        self.bias = _param(_uniform(rng, in_features, (out_features,)))

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.in_features:
            raise DimensionError(f"dense layer expects {self.in_features} features, got shape {x.shape}")
        if x.ndim == 1:
            return ag.reshape(ag.matmul(ag.reshape(x, (1, -1)), self.weight), (-1,)) + self.bias
        return ag.matmul(x, self.weight) + self.bias


class LayerNorm(Module):
    def __init__(self, dim: int, epsilon: float = 1e-5):
        self.dim = dim
        self.epsilon = epsilon
        self.gamma = _param(np.ones(dim))
        self.beta = _param(np.zeros(dim))

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.dim:
            raise DimensionError(f"layer norm over {self.dim} features got shape {x.shape}")
        centered = x - ag.mean(x, axis=-1, keepdims=True)
        var = ag.mean(centered * centered, axis=-1, keepdims=True)
        inv_std = ag.power(var + self.epsilon, -0.5)
        return centered * inv_std * self.gamma + self.beta


class MultiHeadAttention(Module):
    """Scaled dot-product self-attention with ``num_heads`` heads and no masking."""

    def __init__(self, d_model: int, num_heads: int, rng: np.random.Generator):
        if num_heads < 1 or d_model % num_heads:
            raise ConfigurationError(f"d_model={d_model} is not divisible by num_heads={num_heads}")
        self.d_model = d_model
        self.num_heads = num_heads
        self.d_k = d_model // num_heads
        self.w_q, self.b_q = self._projection(rng)
        self.w_k, self.b_k = self._projection(rng)
        self.w_v, self.b_v = self._projection(rng)
        self.w_o, self.b_o = self._projection(rng)

    def _projection(self, rng):
        d = self.d_model
        return _param(_uniform(rng, d, (d, d))), _param(_uniform(rng, d, (d,)))

    def _split_heads(self, x: Tensor) -> Tensor:
        lead = x.shape[:-1]
        x = ag.reshape(x, lead + (self.num_heads, self.d_k))
        return ag.swapaxes(x, -3, -2)

    def forward(self, x: Tensor, return_weights: bool = False):
        if x.ndim < 2 or x.shape[-1] != self.d_model:
            raise DimensionError(f"attention expects [..., seq, {self.d_model}], got {x.shape}")
        q = self._split_heads(ag.matmul(x, self.w_q) + self.b_q)
        k = self._split_heads(ag.matmul(x, self.w_k) + self.b_k)
        v = self._split_heads(ag.matmul(x, self.w_v) + self.b_v)
        scores = ag.scale(ag.matmul(q, ag.swapaxes(k, -1, -2)), 1.0 / math.sqrt(self.d_k))
        weights = ag.softmax(scores, axis=-1)
        heads = ag.swapaxes(ag.matmul(weights, v), -3, -2)
        merged = ag.reshape(heads, x.shape)
        out = ag.matmul(merged, self.w_o) + self.b_o
        return (out, weights) if return_weights else out


# ---------------------------------------------------------------------------
# ConvLSTM


def convlstm_scan(x: Tensor, w_x: Tensor, w_h: Tensor, bias: Tensor) -> Tensor:
    """Run a ConvLSTM recurrence over axis 1 as one tape operation.

    x: [B, T, C_in, L]; w_x: [4H, C_in, k]; w_h: [4H, H, k]; bias: [4H].
    Returns the hidden states [B, T, H, L] from zero initial state.  The
    backward pass is hand-written backpropagation through time.
    """
    batch, steps, in_ch, length = x.shape
    h4, hidden, k = w_h.shape
    wx2 = w_x.data.reshape(h4, in_ch * k)
    wh2 = w_h.data.reshape(h4, hidden * k)
    hi, hf, ho = hidden, 2 * hidden, 3 * hidden

    zx = np.matmul(wx2, ag.unfold1d(x.data, k)) + bias.data[:, None]
    acts = np.empty((batch, steps, h4, length))
    cells = np.empty((batch, steps, hidden, length))
    hs = np.empty((batch, steps, hidden, length))
    c = np.zeros((batch, hidden, length))
    # padded hidden state updated in place; its window view is the unfolded input
    pad = k // 2
    h_pad = np.zeros((batch, hidden, length + 2 * pad))
    h_cols = np.lib.stride_tricks.sliding_window_view(h_pad, length, axis=-1)
    for t in range(steps):
        z = zx[:, t] if t == 0 else zx[:, t] + np.matmul(wh2, h_cols.reshape(batch, hidden * k, length))
        a = acts[:, t]
        # sigmoid(z) = (1 + tanh(z / 2)) / 2, overflow-free in one ufunc pass
        np.tanh(0.5 * z[:, :ho], out=a[:, :ho])
        a[:, :ho] += 1.0
        a[:, :ho] *= 0.5
        np.tanh(z[:, ho:], out=a[:, ho:])
        c = a[:, hi:hf] * c + a[:, :hi] * a[:, ho:]
        h = a[:, hf:ho] * np.tanh(c)
        cells[:, t] = c
        hs[:, t] = h
        h_pad[..., pad:pad + length] = h

    def back(g):
        dz_all = np.empty_like(acts)
        dh_next = np.zeros((batch, hidden, length))
        dc_next = np.zeros((batch, hidden, length))
        for t in range(steps - 1, -1, -1):
            a = acts[:, t]
            i, f, o, gg = a[:, :hi], a[:, hi:hf], a[:, hf:ho], a[:, ho:]
            tc = np.tanh(cells[:, t])
            dh = g[:, t] + dh_next
            dc = dc_next + dh * o * (1.0 - tc * tc)
            dz = dz_all[:, t]
            dz[:, :hi] = dc * gg * i * (1.0 - i)
            dz[:, hi:hf] = (dc * cells[:, t - 1] * f * (1.0 - f)) if t > 0 else 0.0
            dz[:, hf:ho] = dh * tc * o * (1.0 - o)
            dz[:, ho:] = dc * i * (1.0 - gg * gg)
            dc_next = dc * f
            if t > 0:
                dh_next = ag.fold1d(np.matmul(wh2.T, dz), hidden, k)
        h_prev = np.concatenate([np.zeros((batch, 1, hidden, length)), hs[:, :-1]], axis=1)
        dwh = ag.conv_weight_grad(dz_all, ag.unfold1d(h_prev, k)).reshape(w_h.shape)
        dwx = ag.conv_weight_grad(dz_all, ag.unfold1d(x.data, k)).reshape(w_x.shape)
        db = dz_all.sum(axis=(0, 1, 3))
        dx = ag.fold1d(np.matmul(wx2.T, dz_all), in_ch, k)
        return dx, dwx, dwh, db

    return ag.record_op("convlstm_scan", hs, (x, w_x, w_h, bias), back)


class ConvLSTM1DCell(Module):
    """ConvLSTM cell whose gates are 1-D same-padded convolutions."""

    def __init__(self, in_channels: int, hidden_channels: int, kernel_size: int,
                 rng: np.random.Generator, forget_bias: float = 1.0):
        if kernel_size % 2 == 0:
            raise ConfigurationError(f"kernel width must be odd, got {kernel_size}")
        self.in_channels = in_channels
        self.hidden_channels = hidden_channels
        self.kernel_size = kernel_size
        h = hidden_channels
        self.w_x = _param(_uniform(rng, in_channels * kernel_size, (4 * h, in_channels, kernel_size)))
        self.w_h = _param(_uniform(rng, h * kernel_size, (4 * h, h, kernel_size)))
        bias = np.zeros(4 * h)
        bias[h:2 * h] = forget_bias
        self.bias = _param(bias)

    def _check(self, x: Tensor, channel_axis: int) -> None:
        if x.ndim < 2 or x.shape[channel_axis] != self.in_channels:
            raise DimensionError(
                f"cell expects {self.in_channels} input channels, got input shape {x.shape}")

    def step(self, x_t: Tensor, h_prev: Tensor, c_prev: Tensor) -> tuple[Tensor, Tensor]:
        """One recurrence step from primitive ops: [..., C_in, L] -> ([..., H, L], [..., H, L])."""
        self._check(x_t, -2)
        expected = x_t.shape[:-2] + (self.hidden_channels, x_t.shape[-1])
        if h_prev.shape != expected or c_prev.shape != expected:
            raise DimensionError(
                f"state shapes {h_prev.shape}/{c_prev.shape} do not match expected {expected}")
        h = self.hidden_channels
        z = ag.conv1d(x_t, self.w_x, self.bias) + ag.conv1d(h_prev, self.w_h)
        i = ag.sigmoid(z[..., :h, :])
        f = ag.sigmoid(z[..., h:2 * h, :])
        o = ag.sigmoid(z[..., 2 * h:3 * h, :])
        g = ag.tanh(z[..., 3 * h:, :])
        c = f * c_prev + i * g
        return o * ag.tanh(c), c

    def scan(self, x: Tensor) -> Tensor:
        """Fused recurrence over time: [B, T, C_in, L] -> [B, T, H, L]."""
        if x.ndim != 4:
            raise DimensionError(f"scan expects [B, T, C_in, L], got {x.shape}")
        self._check(x, 2)
        return convlstm_scan(x, self.w_x, self.w_h, self.bias)

    def scan_stepwise(self, x: Tensor) -> Tensor:
        """Same as :meth:`scan` built from :meth:`step`; slower, used as a cross-check."""
        if x.ndim != 4:
            raise DimensionError(f"scan expects [B, T, C_in, L], got {x.shape}")
        self._check(x, 2)
        batch, steps, _, length = x.shape
        h = c = Tensor(np.zeros((batch, self.hidden_channels, length)))
        outs = []
        for t in range(steps):
            h, c = self.step(x[:, t], h, c)
            outs.append(ag.reshape(h, (batch, 1, self.hidden_channels, length)))
        return ag.concat(outs, axis=1)


class ConvLSTMStack(Module):
    """Stacked ConvLSTM cells over a [seq, d_model] activation.

    Sequence position is the recurrence time; each token's embedding is the
    spatial axis with one input channel.  A shared dense map projects the
    final hidden channels back to one channel per embedding position.
    """

    def __init__(self, cells: list[ConvLSTM1DCell], projection: Dense):
        if not cells:
            raise ConfigurationError("a ConvLSTM stack needs at least one cell")
        if cells[0].in_channels != 1:
            raise ConfigurationError(f"first cell must take 1 input channel, got {cells[0].in_channels}")
        for n, (prev, cell) in enumerate(zip(cells, cells[1:]), start=2):
            if cell.in_channels != prev.hidden_channels:
                raise ConfigurationError(
                    f"cell {n} takes {cell.in_channels} channels but cell {n - 1} emits {prev.hidden_channels}")
        if projection.in_features != cells[-1].hidden_channels or projection.out_features != 1:
            raise ConfigurationError(
                f"projection must map {cells[-1].hidden_channels} channels to 1, "
                f"got {projection.in_features}->{projection.out_features}")
        self.cells = list(cells)
        self.projection = projection

    @classmethod
    def build(cls, num_layers: int, hidden_channels: int, kernel_size: int,
              rng: np.random.Generator) -> "ConvLSTMStack":
        cells = [ConvLSTM1DCell(1 if n == 0 else hidden_channels, hidden_channels, kernel_size, rng)
                 for n in range(num_layers)]
        return cls(cells, Dense(hidden_channels, 1, rng))

    def forward(self, x: Tensor, fused: bool = True) -> Tensor:
        if x.ndim < 2:
            raise DimensionError(f"ConvLSTM stack expects [..., seq, d_model], got {x.shape}")
        lead, (steps, width) = x.shape[:-2], x.shape[-2:]
        batch = int(np.prod(lead)) if lead else 1
        h = ag.reshape(x, (batch, steps, 1, width))
        for cell in self.cells:
            h = cell.scan(h) if fused else cell.scan_stepwise(h)
        h = ag.swapaxes(h, -1, -2)  # [B, T, L, H]
        out = self.projection(h)     # [B, T, L, 1]
        return ag.reshape(out, x.shape)


class TransformerBlock(Module):
    """Post-norm block: attention sub-layer, then a ConvLSTM stack in the feed-forward slot."""

    def __init__(self, d_model: int, num_heads: int, convlstm_layers: int,
                 hidden_channels: int, kernel_size: int, rng: np.random.Generator):
        self.attention = MultiHeadAttention(d_model, num_heads, rng)
        self.norm_1 = LayerNorm(d_model)
        self.convlstm = ConvLSTMStack.build(convlstm_layers, hidden_channels, kernel_size, rng)
        self.norm_2 = LayerNorm(d_model)

    def forward(self, x: Tensor) -> Tensor:
        y1 = self.norm_1(x + self.attention(x))
        return self.norm_2(y1 + self.convlstm(y1))
