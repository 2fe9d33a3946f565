"""Parameter containers and small layers shared by the SRE and the heads."""

from __future__ import annotations

import math
import zlib
from contextlib import contextmanager

import numpy as np

from .tensor import Tensor, conv1d, layer_norm, matmul


def make_rng(seed, *names):
    """Deterministic generator for a named component of a seeded run.

    Each distinct name path gets an independent stream, so adding draws in one
    component never shifts another.
    """
    key = tuple(zlib.crc32(str(n).encode()) for n in names)
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=key))


def parameter(array):
    return Tensor(array, requires_grad=True)


def _children(value):
    """Modules held in a list (by index) or a dict (by key)."""
    if isinstance(value, list):
        return [(i, v) for i, v in enumerate(value) if isinstance(v, Module)]
    if isinstance(value, dict):
        return [(k, v) for k, v in value.items() if isinstance(v, Module)]
    return []


class Module:
    """Attribute-walking parameter registry.

    Parameters are ``Tensor`` attributes with ``requires_grad`` set at
    construction time, sub-modules are ``Module`` attributes, and lists of
    modules (or dicts of them) are walked in order. Names are dotted attribute paths.
    """

    training = True

    def named_parameters(self, prefix=""):
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            path = f"{prefix}{name}"
            if isinstance(value, Tensor) and name not in self._buffers():
                yield path, value
            elif isinstance(value, Module):
                yield from value.named_parameters(path + ".")
            else:
                for key, sub in _children(value):
                    yield from sub.named_parameters(f"{path}.{key}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix=""):
        """Non-trainable state (e.g. batch-norm running statistics)."""
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            path = f"{prefix}{name}"
            if name in self._buffers():
                yield path, value
            elif isinstance(value, Module):
                yield from value.named_buffers(path + ".")
            else:
                for key, sub in _children(value):
                    yield from sub.named_buffers(f"{path}.{key}.")

    def _buffers(self):
        return ()

    def modules(self):
        yield self
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            if isinstance(value, Module):
                yield from value.modules()
            else:
                for _, sub in _children(value):
                    yield from sub.modules()

    def train(self, mode=True):
        for m in self.modules():
            m.training = mode
        return self

    def eval(self):
        return self.train(False)

    def set_trainable(self, flag):
        for p in self.parameters():
            p.requires_grad = flag
            if not flag:
                p.grad = None

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def state_dict(self):
        state = {name: p.data for name, p in self.named_parameters()}
        state.update({name: b.data for name, b in self.named_buffers()})
        return state

    def load_state_dict(self, state, strict=True):
        own = dict(self.named_parameters())
        own.update(self.named_buffers())
        missing = [k for k in own if k not in state]
        if strict and missing:
            raise KeyError(f"missing tensors in state: {missing}")
        for name, t in own.items():
            if name not in state:
                continue
            value = np.asarray(state[name], dtype=np.float64)
            if value.shape != t.shape:
                raise ValueError(
                    f"shape mismatch for {name}: checkpoint {value.shape}, model {t.shape}")
            t.data = value.copy()


@contextmanager
def inference(*modules):
    """Run the modules without recording a graph, restoring flags afterwards."""
    params = [p for m in modules for p in m.parameters()]
    flags = [p.requires_grad for p in params]
    for p in params:
        p.requires_grad = False
    try:
        yield
    finally:
        for p, flag in zip(params, flags):
            p.requires_grad = flag


def weight_names(module):
    """Names of parameters subject to L2 decay: matrices and conv kernels."""
    return [name for name, p in module.named_parameters() if p.ndim >= 2]


class Linear(Module):
    def __init__(self, n_in, n_out, rng, bias=True):
        bound = 1.0 / math.sqrt(n_in)
        self.weight = parameter(rng.uniform(-bound, bound, size=(n_in, n_out)))
        self.bias = parameter(np.zeros(n_out)) if bias else None

    def __call__(self, x):
        y = matmul(x, self.weight)
        return y if self.bias is None else y + self.bias


class LayerNorm(Module):
    def __init__(self, dim, eps=1e-5):
        self.gamma = parameter(np.ones(dim))
        self.beta = parameter(np.zeros(dim))
        self.eps = eps

    def __call__(self, x):
        return layer_norm(x, self.gamma, self.beta, self.eps)


class Conv1d(Module):
    def __init__(self, c_in, c_out, kernel, stride, rng, padding=0, bias=True):
        # He-uniform; suits the GELU/ReLU stacks this is used in
        bound = math.sqrt(6.0 / (c_in * kernel))
        self.weight = parameter(rng.uniform(-bound, bound, size=(c_out, c_in, kernel)))
        self.bias = parameter(np.zeros(c_out)) if bias else None
        self.stride = stride
        self.padding = padding

    def __call__(self, x, channels_last=False):
        return conv1d(x, self.weight, self.bias, self.stride, self.padding,
                      channels_last=channels_last)
