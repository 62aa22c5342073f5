"""Two-branch HyperNetwork emitting the temporal encoder's linear head.

Each branch feeds a list of ``m`` knowledge vectors through one shared
two-layer network. The ``m`` outputs are reshaped row-major into
``(C_out/m) x A`` blocks and stacked vertically, so head ``i`` owns rows
``i*C_out/m .. (i+1)*C_out/m - 1``. The dependent branch adds the video's
interaction vector ``s`` to every entry of its list first. The two branch
outputs are fused by an elementwise product.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .numcore import Tensor


class ConfigurationError(ValueError):
    pass


class BranchNet:
    """Linear -> ReLU -> Linear."""

    def __init__(self, in_dim: int, out_len: int, hidden: int = 256,
                 rng: np.random.Generator | None = None, name: str = "branch"):
        rng = rng or np.random.default_rng(0)
        self.in_dim, self.hidden, self.out_len = in_dim, hidden, out_len
        self.w1 = nc.parameter(rng.normal(0, 1 / np.sqrt(in_dim), (in_dim, hidden)), f"{name}.w1")
        self.b1 = nc.parameter(np.zeros(hidden), f"{name}.b1")
        self.w2 = nc.parameter(rng.normal(0, 1 / np.sqrt(hidden), (hidden, out_len)), f"{name}.w2")
        self.b2 = nc.parameter(np.zeros(out_len), f"{name}.b2")

    def __call__(self, x: Tensor) -> Tensor:
        """Apply to a batch of row vectors (n x in_dim)."""
        return nc.relu(x @ self.w1 + self.b1) @ self.w2 + self.b2

    def parameters(self) -> list[Tensor]:
        return [self.w1, self.b1, self.w2, self.b2]


class KnowledgeBank:
    def __init__(self, m: int, dim: int, rng: np.random.Generator | None = None, std: float = 0.02):
        rng = rng or np.random.default_rng(0)
        self.m, self.dim = m, dim
        self.z = nc.parameter(rng.normal(0, std, (m, dim)), "bank.z")
        self.u = nc.parameter(rng.normal(0, std, (m, dim)), "bank.u")

    def parameters(self) -> list[Tensor]:
        return [self.z, self.u]


@dataclass
class GeneratedHead:
    W: Tensor
    b: Tensor


def _as_rows(vectors) -> Tensor:
    if isinstance(vectors, Tensor):
        return vectors if vectors.data.ndim == 2 else nc.reshape(vectors, (1, -1))
    return nc.stack(list(vectors))


def _heads_to_matrix(v: Tensor, c_out: int, A: int) -> Tensor:
    m = v.shape[0]
    if c_out % m:
        raise ConfigurationError(f"C_out={c_out} is not divisible by m={m}")
    if v.shape[1] != c_out * A // m:
        raise ConfigurationError(f"branch output length {v.shape[1]} != C_out*A/m = {c_out * A // m}")
    # row-major reshape of each head output, heads stacked top to bottom,
    # is exactly one row-major reshape of the m x (C_out*A/m) matrix
    return nc.reshape(v, (c_out, A))


def independent_weights(z, net: BranchNet, c_out: int, A: int) -> Tensor:
    return _heads_to_matrix(net(_as_rows(z)), c_out, A)


def dependent_weights(u, s: Tensor, net: BranchNet, c_out: int, A: int) -> Tensor:
    return _heads_to_matrix(net(_as_rows(u) + s), c_out, A)


def fuse(a: Tensor, b: Tensor) -> Tensor:
    return nc.mul(a, b)


class HyperNetwork:
    """Owns the knowledge bank and the four branch networks.

    ``use_dependent=False`` drops the dependent branch entirely (W = W^z,
    b = b^z); ``zero_s=True`` keeps it but feeds it ``s = 0``.
    """

    def __init__(self, dim: int = 128, m: int = 8, c_out: int = 64, A: int = 48,
                 hidden: int = 256, rng: np.random.Generator | None = None,
                 use_dependent: bool = True, zero_s: bool = False):
        if c_out % m:
            raise ConfigurationError(f"C_out={c_out} is not divisible by m={m}")
        rng = rng or np.random.default_rng(0)
        self.dim, self.m, self.c_out, self.A = dim, m, c_out, A
        self.use_dependent, self.zero_s = use_dependent, zero_s
        self.bank = KnowledgeBank(m, dim, rng)
        out_len = c_out * A // m
        self.H_i = BranchNet(dim, out_len, hidden, rng, "hyper.H_i")
        self.H_d = BranchNet(dim, out_len, hidden, rng, "hyper.H_d")
        self.Hb_i = BranchNet(dim, A, hidden, rng, "hyper.Hb_i")
        self.Hb_d = BranchNet(dim, A, hidden, rng, "hyper.Hb_d")

    def parameters(self) -> list[Tensor]:
        nets = [self.H_i, self.Hb_i]
        if self.use_dependent:
            nets += [self.H_d, self.Hb_d]
        params = [self.bank.z] + ([self.bank.u] if self.use_dependent else [])
        for net in nets:
            params.extend(net.parameters())
        return params

    def all_parameters(self) -> list[Tensor]:
        params = self.bank.parameters()
        for net in (self.H_i, self.H_d, self.Hb_i, self.Hb_d):
            params.extend(net.parameters())
        return params

    def __call__(self, s: Tensor) -> GeneratedHead:
        return generate_head(self, s)


def _mean_row(rows: Tensor) -> Tensor:
    m = rows.shape[0]
    return Tensor(np.full((1, m), 1.0 / m)) @ rows


def independent_bias(z, net: BranchNet) -> Tensor:
    """Single-head bias branch over the mean of the knowledge list."""
    out = net(_mean_row(_as_rows(z)))
    return nc.reshape(out, (out.shape[1],))


def dependent_bias(u, s: Tensor, net: BranchNet) -> Tensor:
    out = net(_mean_row(_as_rows(u) + s))
    return nc.reshape(out, (out.shape[1],))


def generate_head(hyper: HyperNetwork, s: Tensor) -> GeneratedHead:
    z, u = hyper.bank.z, hyper.bank.u
    W = independent_weights(z, hyper.H_i, hyper.c_out, hyper.A)
    b = independent_bias(z, hyper.Hb_i)
    if hyper.use_dependent:
        if hyper.zero_s:
            s = Tensor(np.zeros(hyper.dim))
        W = fuse(W, dependent_weights(u, s, hyper.H_d, hyper.c_out, hyper.A))
        b = fuse(b, dependent_bias(u, s, hyper.Hb_d))
    return GeneratedHead(W, b)
