"""Downstream networks mapping SRE output C (B, T, d) to task outputs."""

from __future__ import annotations

import math
from dataclasses import dataclass, fields

import numpy as np

from . import nn
from .tensor import ShapeError, Tensor, concat, lstm_step, pad, relu, reshape, standardize

LINEAR = "linear"
BILSTM = "bilstm"
CNN1D = "cnn1d"
HEAD_KINDS = (LINEAR, BILSTM, CNN1D)

CLASSES = "classes"
EMBEDDING = "embedding"


@dataclass
class HeadConfig:
    kind: str = LINEAR
    output: str = CLASSES          # "classes" or "embedding"
    n_out: int = 12                # class count, or embedding size
    input_seconds: int = 1
    lstm_hidden: int = 256
    lstm_all_endpoints: bool = False
    cnn_filters: int = 128
    cnn_kernel: int = 25
    bn_momentum: float = 0.9

    def __post_init__(self):
        if self.kind not in HEAD_KINDS:
            raise ValueError(f"head kind must be one of {HEAD_KINDS}, got {self.kind!r}")
        if self.output not in (CLASSES, EMBEDDING):
            raise ValueError(f"head output must be 'classes' or 'embedding', got {self.output!r}")
        if self.n_out < 1:
            raise ValueError(f"head n_out must be positive, got {self.n_out}")
        if self.input_seconds not in (1, 2):
            raise ValueError(f"head input_seconds must be 1 or 2, got {self.input_seconds}")
        if self.lstm_hidden < 1 or self.cnn_filters < 1 or self.cnn_kernel < 1:
            raise ValueError("head lstm_hidden, cnn_filters and cnn_kernel must be positive")

    def to_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}


def _batched(c):
    if c.ndim == 2:
        return reshape(c, (1,) + c.shape), True
    return c, False


class LinearHead(nn.Module):
    """Linear map of the first-timestep vector; later frames are never read."""

    def __init__(self, d_model, config: HeadConfig, rng):
        self.config = config
        self.proj = nn.Linear(d_model, config.n_out, rng)

    def __call__(self, c):
        c, single = _batched(c)
        out = self.proj(c[:, 0, :])
        return out[0] if single else out


class _LSTM(nn.Module):
    def __init__(self, d_in, hidden, rng):
        bound = 1.0 / math.sqrt(hidden)
        self.w_ih = nn.parameter(rng.uniform(-bound, bound, size=(d_in, 4 * hidden)))
        self.w_hh = nn.parameter(rng.uniform(-bound, bound, size=(hidden, 4 * hidden)))
        self.bias = nn.parameter(np.zeros(4 * hidden))
        self.hidden = hidden

    def run(self, c, reverse=False):
        """Hidden states for every step, indexed by input position."""
        b, t, _ = c.shape
        h = Tensor(np.zeros((b, self.hidden)))
        cell = Tensor(np.zeros((b, self.hidden)))
        states = [None] * t
        steps = range(t - 1, -1, -1) if reverse else range(t)
        for i in steps:
            h, cell = lstm_step(c[:, i, :], h, cell, self.w_ih, self.w_hh, self.bias)
            states[i] = h
        return states


class BiLSTMHead(nn.Module):
    """Single-layer Bi-LSTM; combines forward-at-last and backward-at-first.

    With ``lstm_all_endpoints`` the complementary reads (forward at the first
    step, backward at the last) are concatenated as well.
    """

    def __init__(self, d_model, config: HeadConfig, rng):
        self.config = config
        hidden = config.lstm_hidden
        self.forward_lstm = _LSTM(d_model, hidden, rng)
        self.backward_lstm = _LSTM(d_model, hidden, rng)
        width = (4 if config.lstm_all_endpoints else 2) * hidden
        self.proj = nn.Linear(width, config.n_out, rng)

    def combined(self, c):
        c, single = _batched(c)
        fwd = self.forward_lstm.run(c)
        bwd = self.backward_lstm.run(c, reverse=True)
        parts = [fwd[-1], bwd[0]]
        if self.config.lstm_all_endpoints:
            parts += [fwd[0], bwd[-1]]
        out = concat(parts, axis=-1)
        return (out[0] if single else out)

    def __call__(self, c):
        return self.proj(self.combined(c))


class BatchNorm(nn.Module):
    """Per-channel batch norm over (batch, time) of a channels-last input."""

    def __init__(self, channels, momentum=0.9, eps=1e-5):
        self.gamma = nn.parameter(np.ones(channels))
        self.beta = nn.parameter(np.zeros(channels))
        self.running_mean = Tensor(np.zeros(channels))
        self.running_var = Tensor(np.ones(channels))
        self.momentum = momentum
        self.eps = eps

    def _buffers(self):
        return ("running_mean", "running_var")

    def __call__(self, x):
        b, t, ch = x.shape
        if self.training:
            flat = reshape(x, (b * t, ch))
            normed = reshape(standardize(flat, axis=0, eps=self.eps), (b, t, ch))
            n = b * t
            mu = x.data.reshape(n, ch).mean(axis=0)
            var = x.data.reshape(n, ch).var(axis=0) * (n / max(n - 1, 1))
            m = self.momentum
            self.running_mean.data = m * self.running_mean.data + (1 - m) * mu
            self.running_var.data = m * self.running_var.data + (1 - m) * var
        else:
            inv = 1.0 / np.sqrt(self.running_var.data + self.eps)
            normed = (x - self.running_mean.data) * inv
        return normed * self.gamma + self.beta


class _ConvBlock(nn.Module):
    """Same-padded strided conv, ReLU, batch norm (channels-last)."""

    def __init__(self, c_in, filters, kernel, stride, momentum, rng):
        self.conv = nn.Conv1d(c_in, filters, kernel, stride, rng)
        self.norm = BatchNorm(filters, momentum)
        self.kernel = kernel
        self.stride = stride

    def __call__(self, x):
        length = x.shape[1]
        out_len = -(-length // self.stride)
        total = max((out_len - 1) * self.stride + self.kernel - length, 0)
        x = pad(x, 1, total // 2, total - total // 2)
        return self.norm(relu(self.conv(x, channels_last=True)))


class CNNHead(nn.Module):
    """Strided 1-D CNN reducing the frame axis to 16 steps, then a linear map.

    Frames are right-padded to 64 (1 s) or 128 (2 s); 2 s input passes a
    stride-2 block before the shared stride-4 block.
    """

    OUT_STEPS = 16

    def __init__(self, d_model, config: HeadConfig, rng, expected_frames=None):
        self.config = config
        self.expected_frames = expected_frames or {1: 49, 2: 99}[config.input_seconds]
        self.padded = 64 * config.input_seconds
        f, k, m = config.cnn_filters, config.cnn_kernel, config.bn_momentum
        self.blocks = []
        c_in = d_model
        if config.input_seconds == 2:
            self.blocks.append(_ConvBlock(c_in, f, k, 2, m, rng))
            c_in = f
        self.blocks.append(_ConvBlock(c_in, f, k, 4, m, rng))
        self.proj = nn.Linear(self.OUT_STEPS * f, config.n_out, rng)

    def features(self, c):
        c, single = _batched(c)
        t = c.shape[1]
        if t != self.expected_frames:
            raise ShapeError(
                f"CNN head for {self.config.input_seconds} s input expects "
                f"{self.expected_frames} frames, got {t}")
        x = pad(c, 1, 0, self.padded - t)
        for block in self.blocks:
            x = block(x)
        return x, single

    def __call__(self, c):
        x, single = self.features(c)
        b = x.shape[0]
        out = self.proj(reshape(x, (b, -1)))
        return out[0] if single else out


def build_head(d_model, config: HeadConfig, rng):
    if config.kind == LINEAR:
        return LinearHead(d_model, config, rng)
    if config.kind == BILSTM:
        return BiLSTMHead(d_model, config, rng)
    return CNNHead(d_model, config, rng)
