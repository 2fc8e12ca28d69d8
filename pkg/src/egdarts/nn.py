"""Minimal module system on top of the autodiff engine, plus weight checkpoints."""

from __future__ import annotations

import contextlib
import json
import struct
from pathlib import Path
from typing import Iterator

import numpy as np

from . import autograd as ag
from .autograd import Tensor

CHECKPOINT_FORMAT = "egdarts-checkpoint-1"


class Module:
    training = True

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def children(self) -> Iterator[tuple[str, "Module"]]:
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, v in enumerate(value):
                    if isinstance(v, Module):
                        yield f"{name}.{i}", v
            elif isinstance(value, dict):
                for k, v in value.items():
                    if isinstance(v, Module):
                        yield f"{name}.{k}", v

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, child in self.children():
            yield from child.modules()

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + name, value
        for name, child in self.children():
            yield from child.named_parameters(f"{prefix}{name}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name in getattr(self, "_buffer_names", ()):
            yield prefix + name, getattr(self, name)
        for name, child in self.children():
            yield from child.named_buffers(f"{prefix}{name}.")

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {k: p.data for k, p in self.named_parameters()}
        state.update(self.named_buffers())
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        bufs = dict(self.named_buffers())
        missing = (set(own) | set(bufs)) - set(state)
        if missing:
            raise KeyError(f"checkpoint lacks {sorted(missing)[:3]}")
        for k, p in own.items():
            if state[k].shape != p.shape:
                raise ag.ShapeError(f"{k}: checkpoint shape {state[k].shape} vs model {p.shape}")
            p.data = np.array(state[k], dtype=np.float64)
        for m_name, module in [("", self)] + [(n + ".", m) for n, m in _named_modules(self)]:
            for b in getattr(module, "_buffer_names", ()):
                getattr(module, b)[...] = state[m_name + b]

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)


def _named_modules(root: Module, prefix: str = ""):
    for name, child in root.children():
        full = prefix + name
        yield full, child
        yield from _named_modules(child, full + ".")


def kaiming(rng: np.random.Generator, shape, fan_in: int) -> Tensor:
    return Tensor(rng.normal(0.0, np.sqrt(2.0 / max(fan_in, 1)), size=shape), requires_grad=True)


class Conv2d(Module):
    def __init__(self, c_in, c_out, kernel, rng, stride=1, dilation=1, groups=1, padding=None):
        kh, kw = (kernel, kernel) if isinstance(kernel, int) else kernel
        self.weight = kaiming(rng, (c_out, c_in // groups, kh, kw), c_in // groups * kh * kw)
        self.stride, self.dilation, self.groups, self.padding = stride, dilation, groups, padding

    def forward(self, x: Tensor) -> Tensor:
        return ag.conv2d(x, self.weight, self.stride, self.padding, self.dilation, self.groups)


class BatchNorm2d(Module):
    """Affine-free batch normalisation with running statistics for eval mode."""

    _buffer_names = ("running_mean", "running_var")

    def __init__(self, channels: int, eps: float = 1e-5, momentum: float = 0.1):
        self.eps, self.momentum = eps, momentum
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self.update_stats = True

    def forward(self, x: Tensor) -> Tensor:
        if not self.training:
            out, _, _ = ag.batch_norm(x, self.eps, self.running_mean, self.running_var)
            return out
        out, mu, var = ag.batch_norm(x, self.eps)
        if self.update_stats:
            m = x.data.size // x.shape[1]
            unbiased = var * m / max(m - 1, 1)
            self.running_mean *= 1 - self.momentum
            self.running_mean += self.momentum * mu
            self.running_var *= 1 - self.momentum
            self.running_var += self.momentum * unbiased
        return out


@contextlib.contextmanager
def frozen_stats(model: Module):
    """Keep running normalisation statistics untouched inside the block."""
    norms = [m for m in model.modules() if isinstance(m, BatchNorm2d)]
    prev = [m.update_stats for m in norms]
    for m in norms:
        m.update_stats = False
    try:
        yield
    finally:
        for m, p in zip(norms, prev):
            m.update_stats = p


class Linear(Module):
    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator, zero_init: bool = False):
        if zero_init:
            self.weight = Tensor(np.zeros((c_in, c_out)), requires_grad=True)
        else:
            self.weight = Tensor(rng.uniform(-1, 1, (c_in, c_out)) / np.sqrt(c_in), requires_grad=True)
        self.bias = Tensor(np.zeros(c_out), requires_grad=True)

    def forward(self, x: Tensor) -> Tensor:
        return ag.matmul(x, self.weight) + self.bias


def save_checkpoint(path, state: dict[str, np.ndarray]) -> None:
    """Write a JSON shape manifest followed by little-endian float64 payload.

    Layout: ``u64 header_len | header JSON (utf-8) | f8 data of each tensor``.
    """
    names = list(state)
    header = {
        "format": CHECKPOINT_FORMAT,
        "tensors": [{"name": n, "shape": list(np.shape(state[n]))} for n in names],
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        for n in names:
            f.write(np.ascontiguousarray(state[n], dtype="<f8").tobytes())


def load_checkpoint(path) -> dict[str, np.ndarray]:
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise ValueError(f"{path}: truncated checkpoint header")
    (hlen,) = struct.unpack("<Q", raw[:8])
    header = json.loads(raw[8:8 + hlen])
    if header.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: unknown checkpoint format {header.get('format')!r}")
    offset = 8 + hlen
    out = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        end = offset + 8 * count
        if end > len(raw):
            raise ValueError(f"{path}: payload ends at byte {len(raw)}, tensor {entry['name']} needs {end}")
        out[entry["name"]] = np.frombuffer(raw[offset:end], dtype="<f8").reshape(shape).astype(np.float64)
        offset = end
    if offset != len(raw):
        raise ValueError(f"{path}: {len(raw) - offset} trailing bytes")
    return out
