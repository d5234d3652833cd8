"""Layers, transformer generator, Adam and the parameter checkpoint format."""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor

CHECKPOINT_MAGIC = b"PTRAGCK1"


class Module:
    """Base class; parameters are discovered from attributes in definition order."""

    def named_parameters(self, prefix: str = "") -> list[tuple[str, Tensor]]:
        out: list[tuple[str, Tensor]] = []
        seen: set[int] = set()
        self._collect(prefix, out, seen)
        return out

    def _collect(self, prefix, out, seen):
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Tensor) and val.requires_grad:
                if id(val) in seen:
                    raise ValueError(f"parameter {name} registered twice")
                seen.add(id(val))
                out.append((name, val))
            elif isinstance(val, Module):
                val._collect(name + ".", out, seen)
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        item._collect(f"{name}.{i}.", out, seen)

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        extra = set(state) - set(params)
        if missing or extra:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for name, p in params.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise ShapeError(f"{name}: checkpoint shape {arr.shape} != parameter shape {p.shape}")
            p.data = arr.copy()


class Linear(Module):
    """``x @ weight + bias`` with weight ``[in, out]``."""

    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, zero: bool = False,
                 bias: bool = True):
        self.n_in, self.n_out = n_in, n_out
        bound = math.sqrt(1.0 / n_in)
        w = np.zeros((n_in, n_out)) if zero else rng.uniform(-bound, bound, (n_in, n_out))
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(np.zeros(n_out), requires_grad=True) if bias else None

    def __call__(self, x) -> Tensor:
        x = ad.as_tensor(x)
        if x.shape[-1] != self.n_in:
            raise ShapeError(f"linear: input width {x.shape[-1]} != {self.n_in} (input shape {x.shape})")
        y = ad.matmul(x, self.weight)
        return y if self.bias is None else ad.add(y, self.bias)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        if dim < 1:
            raise ValueError("layer norm needs dim >= 1")
        self.eps = eps
        self.gamma = Tensor(np.ones(dim), requires_grad=True)
        self.beta = Tensor(np.zeros(dim), requires_grad=True)

    def __call__(self, x) -> Tensor:
        return layer_norm(x, self.gamma, self.beta, self.eps)


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    x = ad.as_tensor(x)
    gamma, beta = ad.as_tensor(gamma), ad.as_tensor(beta)
    if gamma.shape != (x.shape[-1],) or beta.shape != (x.shape[-1],):
        raise ShapeError(f"layer_norm: affine shapes {gamma.shape}/{beta.shape} vs input {x.shape}")
    return ad.add(ad.mul(ad.layer_norm_stats(x, eps), gamma), beta)


class MLP(Module):
    """Linear layers with ReLU between them (none after the last)."""

    def __init__(self, sizes: list[int], rng: np.random.Generator):
        if len(sizes) < 2:
            raise ValueError("MLP needs at least input and output sizes")
        self.layers = [Linear(a, b, rng) for a, b in zip(sizes[:-1], sizes[1:])]

    def __call__(self, x) -> Tensor:
        h = ad.as_tensor(x)
        for i, layer in enumerate(self.layers):
            h = layer(h)
            if i < len(self.layers) - 1:
                h = ad.relu(h)
        return h


class MultiHeadAttention(Module):
    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        if dim % heads:
            raise ValueError(f"model dim {dim} not divisible by {heads} heads")
        self.dim, self.heads = dim, heads
        self.q = Linear(dim, dim, rng)
        # a key bias shifts every score of a query equally, which softmax ignores
        self.k = Linear(dim, dim, rng, bias=False)
        self.v = Linear(dim, dim, rng)
        self.o = Linear(dim, dim, rng)

    def _split(self, x: Tensor) -> Tensor:
        lead, n = x.shape[:-2], x.shape[-2]
        x = ad.reshape(x, lead + (n, self.heads, self.dim // self.heads))
        return ad.swapaxes(x, -2, -3)

    def __call__(self, query, context) -> Tensor:
        query, context = ad.as_tensor(query), ad.as_tensor(context)
        if context.shape[-2] == 0:
            raise ShapeError("empty context")
        q = self._split(self.q(query))
        k = self._split(self.k(context))
        v = self._split(self.v(context))
        scores = ad.scale(ad.matmul(q, ad.swapaxes(k, -1, -2)), 1.0 / math.sqrt(self.dim // self.heads))
        attn = ad.softmax(scores)
        out = ad.swapaxes(ad.matmul(attn, v), -2, -3)
        lead, n = out.shape[:-3], out.shape[-3]
        return self.o(ad.reshape(out, lead + (n, self.dim)))


def cross_attention(attn: MultiHeadAttention, q, kv) -> Tensor:
    """Queries ``[..., n, d]`` attend over context rows ``[..., K, d]``."""
    return attn(q, kv)


class TransformerBlock(Module):
    """Pre-norm block: x + MHA(LN(x)), then x + FFN(LN(x)); no masking."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator, ffn_mult: int = 4):
        self.ln1 = LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, heads, rng)
        self.ln2 = LayerNorm(dim)
        self.ffn = MLP([dim, ffn_mult * dim, dim], rng)

    def __call__(self, x) -> Tensor:
        h = self.ln1(x)
        x = ad.add(x, self.attn(h, h))
        return ad.add(x, self.ffn(self.ln2(x)))


class TransformerGenerator(Module):
    """Stack of transformer blocks over the cell axis plus a linear readout to genes."""

    def __init__(self, dim: int, n_genes: int, depth: int, heads: int, rng: np.random.Generator,
                 zero_readout: bool = False):
        self.blocks = [TransformerBlock(dim, heads, rng) for _ in range(depth)]
        self.readout = Linear(dim, n_genes, rng, zero=zero_readout)

    def __call__(self, z) -> Tensor:
        z = ad.as_tensor(z)
        if z.ndim < 2:
            raise ShapeError(f"generator input needs a cell axis, got shape {z.shape}")
        # Cells are processed in a canonical (lexicographic) order and scattered
        # back, so permuting the input permutes the output bit for bit: every
        # floating-point reduction then sees its operands in the same order.
        lead, (s, d) = z.shape[:-2], z.shape[-2:]
        flat = z.data.reshape(-1, s, d)
        order = np.stack([np.lexsort(rows.T[::-1]) for rows in flat])
        inverse = np.argsort(order, axis=1)
        batch = np.arange(len(flat))[:, None]
        h = ad.index(ad.reshape(z, (len(flat), s, d)), (batch, order))
        for block in self.blocks:
            h = block(h)
        out = ad.index(self.readout(h), (batch, inverse))
        return ad.reshape(out, lead + (s, out.shape[-1]))


# -- optimizer ---------------------------------------------------------------


@dataclass
class AdamState:
    lr: float = 1e-3
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: list[tuple[str, Tensor]], state: AdamState) -> None:
    """One Adam update with coupled L2 weight decay; zeroes grads afterwards."""
    for name, p in params:
        if p.grad is None or not np.all(np.isfinite(p.grad)):
            raise FloatingPointError(f"non-finite gradient for parameter {name}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, p in params:
        g = p.grad
        if state.weight_decay:
            g = g + state.weight_decay * p.data
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1 - b1) * g if m is None else b1 * m + (1 - b1) * g
        v = (1 - b2) * g * g if v is None else b2 * v + (1 - b2) * g * g
        state.m[name], state.v[name] = m, v
        p.data = p.data - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.grad = np.zeros_like(p.data)


# -- checkpoint format -------------------------------------------------------


def save_checkpoint(path, params: list[tuple[str, np.ndarray]], meta: dict | None = None) -> None:
    """Write ``magic | u64 header length | JSON header | f64 little-endian values``."""
    header = {
        "format": "ptrag-checkpoint",
        "version": 1,
        "params": [{"name": n, "shape": list(np.shape(a))} for n, a in params],
        "meta": meta or {},
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for _, a in params:
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[list[tuple[str, np.ndarray]], dict]:
    raw = Path(path).read_bytes()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    (n,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16:16 + n].decode("utf-8"))
    offset = 16 + n
    params = []
    for entry in header["params"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=offset).astype(np.float64)
        offset += 8 * count
        params.append((entry["name"], arr.reshape(shape)))
    if offset != len(raw):
        raise ValueError(f"{path}: {len(raw) - offset} trailing bytes")
    return params, header.get("meta", {})
