"""Parameterized building blocks: linear layers, small MLPs, fixed positional
embeddings, one-hot encoding, and the two optimizers used by the trainers.

Every trainable tensor is registered in exactly one ParamGroup at construction
so that gradient routing between detector, decoder, and auxiliary heads stays
auditable.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import ParamGroup, ShapeError, Tensor


def kaiming_uniform(rng: np.random.Generator, out_dim: int, in_dim: int) -> np.ndarray:
    """Fan-in scaled uniform init, gain for ReLU: bound = sqrt(6/fan_in)."""
    bound = np.sqrt(6.0 / in_dim)
    return rng.uniform(-bound, bound, size=(out_dim, in_dim))


class Linear:
    """Affine map x -> x W^T + b with W of shape [out x in]."""

    def __init__(self, in_dim: int, out_dim: int, group: ParamGroup, rng: np.random.Generator, name: str):
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.weight = group.add(f"{name}.w", Tensor(kaiming_uniform(rng, out_dim, in_dim), requires_grad=True))
        self.bias = group.add(f"{name}.b", Tensor(np.zeros(out_dim), requires_grad=True))

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.in_dim:
            raise ShapeError(f"linear expects trailing dim {self.in_dim}, got input shape {x.shape}")
        lead = x.shape[:-1]
        flat = T.reshape(x, (-1, self.in_dim)) if x.data.ndim != 2 else x
        out = T.add(T.matmul(flat, T.transpose(self.weight)), self.bias)
        if x.data.ndim != 2:
            out = T.reshape(out, lead + (self.out_dim,))
        return out


class Mlp3:
    """Linear -> ReLU -> Linear -> ReLU -> Linear."""

    def __init__(self, in_dim: int, hidden: int, out_dim: int, group: ParamGroup, rng: np.random.Generator, name: str):
        self.l1 = Linear(in_dim, hidden, group, rng, f"{name}.l1")
        self.l2 = Linear(hidden, hidden, group, rng, f"{name}.l2")
        self.l3 = Linear(hidden, out_dim, group, rng, f"{name}.l3")

    def __call__(self, x: Tensor) -> Tensor:
        return self.l3(T.relu(self.l2(T.relu(self.l1(x)))))


def sine_pos_embed(u, dim: int, temperature: float = 10000.0) -> np.ndarray:
    """Fixed interleaved sin/cos encoding of normalized coordinates in [0,1].

    Component pair k holds sin(u*s_k), cos(u*s_k) with s_k = temperature^(-2k/dim).
    Accepts a scalar or an array of coordinates; appends the dim axis last.
    """
    if dim % 2 != 0:
        raise ValueError(f"sine_pos_embed needs an even dim, got {dim}")
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    u = np.asarray(u, dtype=np.float64)
    k = np.arange(dim // 2)
    scale = temperature ** (-2.0 * k / dim)
    angles = u[..., None] * scale
    out = np.empty(u.shape + (dim,))
    out[..., 0::2] = np.sin(angles)
    out[..., 1::2] = np.cos(angles)
    return out


def one_hot(c: int, num_categories: int) -> np.ndarray:
    if not 0 <= c < num_categories:
        raise IndexError(f"category {c} out of range [0, {num_categories})")
    v = np.zeros(num_categories)
    v[c] = 1.0
    return v


class AdamW:
    """Adam with decoupled weight decay; decay uses the pre-step parameter."""

    def __init__(self, group: ParamGroup, lr: float, weight_decay: float = 0.0,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.group = group
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in group.named()}
        self.v = {name: np.zeros_like(p.data) for name, p in group.named()}
        self.skipped_missing_grad = 0

    def step(self) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for name, p in self.group.named():
            if not p.requires_grad or p.grad is None:
                self.skipped_missing_grad += 1
                continue
            g = p.grad
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data *= 1.0 - self.lr * self.weight_decay
            p.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.grad[...] = 0.0


class MomentumSGD:
    """Classic momentum: buf = mu*buf + grad; p -= lr*buf. Decoupled decay."""

    def __init__(self, group: ParamGroup, lr: float, momentum: float = 0.9, weight_decay: float = 0.0):
        self.group = group
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.buf = {name: np.zeros_like(p.data) for name, p in group.named()}
        self.skipped_missing_grad = 0

    def step(self) -> None:
        for name, p in self.group.named():
            if not p.requires_grad or p.grad is None:
                self.skipped_missing_grad += 1
                continue
            b = self.buf[name]
            b *= self.momentum
            b += p.grad
            p.data *= 1.0 - self.lr * self.weight_decay
            p.data -= self.lr * b
            p.grad[...] = 0.0
