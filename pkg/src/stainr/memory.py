"""Hierarchical prototype memory with sparse addressing and learnable fusion.

A bank holds N learnable prototype rows. Each feature vector addresses a
bank by cosine similarity, takes a softmax over prototypes, drops weights
below a threshold, renormalizes the survivors, and reads out the weighted
prototype sum. Three banks (part, instance, semantic) are read in a chain
and their outputs fused by a single learnable gate (protomix).
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ShapeError


class MemoryBank:
    """N learnable prototypes of dimension C, rows kept near the unit sphere.

    Rows start exactly on the unit sphere; training may move them off it.
    """

    __slots__ = ("items", "level")

    def __init__(self, items: Tensor, level: str):
        if items.ndim != 2:
            raise ShapeError(f"MemoryBank: items must be 2-D, got shape {items.shape}")
        if items.shape[0] < 1 or items.shape[1] < 1:
            raise ShapeError(f"MemoryBank: need N >= 1 and C >= 1, got shape {items.shape}")
        self.items = items
        self.level = level

    @property
    def count(self):
        return self.items.shape[0]

    @property
    def dim(self):
        return self.items.shape[1]


class DocMemoryParams:
    """Three-level prototype memory plus the protomix gate.

    sparsity_threshold of None selects 1/(2N) per bank, which keeps at
    least the argmax weight alive (softmax max >= 1/N).
    """

    __slots__ = ("bank_part", "bank_ins", "bank_sem", "mix_weight", "sparsity_threshold")

    def __init__(self, bank_part, bank_ins, bank_sem, mix_weight, sparsity_threshold=None):
        dims = {bank_part.dim, bank_ins.dim, bank_sem.dim}
        if len(dims) != 1:
            raise ShapeError(f"DocMemoryParams: banks disagree on feature dim: {sorted(dims)}")
        self.bank_part = bank_part
        self.bank_ins = bank_ins
        self.bank_sem = bank_sem
        self.mix_weight = mix_weight
        self.sparsity_threshold = sparsity_threshold

    @property
    def dim(self):
        return self.bank_part.dim

    def threshold_for(self, bank: MemoryBank) -> float:
        if self.sparsity_threshold is None:
            return 1.0 / (2.0 * bank.count)
        return self.sparsity_threshold

    def named_tensors(self):
        yield "memory.bank_part.items", self.bank_part.items
        yield "memory.bank_ins.items", self.bank_ins.items
        yield "memory.bank_sem.items", self.bank_sem.items
        yield "memory.mix_weight", self.mix_weight


def init_docmemory(rng: np.random.Generator, channels: int,
                   n_part=64, n_ins=32, n_sem=16,
                   sparsity_threshold=None, dtype=np.float64) -> DocMemoryParams:
    """Fresh parameters: unit-sphere prototype rows, gate weight at 0."""
    def bank(n, level):
        rows = rng.standard_normal((n, channels))
        rows /= np.linalg.norm(rows, axis=1, keepdims=True)
        return MemoryBank(Tensor(rows.astype(dtype), requires_grad=True), level)

    w = Tensor(np.zeros((), dtype=dtype), requires_grad=True)
    return DocMemoryParams(bank(n_part, "part"), bank(n_ins, "instance"),
                           bank(n_sem, "semantic"), w, sparsity_threshold)


def cosine_similarity(f: Tensor, bank: MemoryBank) -> Tensor:
    """[L,C] x bank -> [L,N] of cosines in [-1, 1], eps-guarded norms."""
    if f.ndim != 2 or f.shape[1] != bank.dim:
        raise ShapeError(f"cosine_similarity: queries {f.shape} vs bank dim {bank.dim}")
    fn = ad.l2_normalize(f, axis=-1)
    mn = ad.l2_normalize(bank.items, axis=-1)
    return ad.matmul(fn, ad.transpose(mn, (1, 0)))


def address_memory(f: Tensor, bank: MemoryBank, threshold: float) -> Tensor:
    """Sparsified softmax addressing weights, rows renormalized to sum 1.

    The keep/drop mask is a constant of the forward pass; gradients flow
    through surviving weights only.
    """
    n = bank.count
    if not 0.0 <= threshold <= 1.0 / n:
        raise ConfigError(
            f"address_memory: threshold {threshold} outside [0, 1/N] for bank of {n} items")
    d = cosine_similarity(f, bank)
    s = ad.softmax(d, axis=-1)
    if threshold == 0.0:
        return s
    mask = (s.data >= threshold).astype(s.data.dtype)
    kept = ad.mul(s, Tensor(mask))
    total = ad.tsum(kept, axis=-1, keepdims=True)
    return ad.div(kept, total)


def read_memory(f: Tensor, bank: MemoryBank, threshold: float) -> Tensor:
    """Weighted prototype sum; rows lie in the convex hull of the bank."""
    w = address_memory(f, bank, threshold)
    return ad.matmul(w, bank.items)


def docmemory_forward(feature_map: Tensor, params: DocMemoryParams):
    """Chained part -> instance -> semantic reads at every spatial position.

    Returns (y_part, y_ins, y_sem), each shaped like the input map.
    """
    if feature_map.ndim != 4:
        raise ShapeError(f"docmemory_forward: expected [B,C,H,W], got {feature_map.shape}")
    B, C, H, W = feature_map.shape
    if C != params.dim:
        raise ShapeError(f"docmemory_forward: {C} channels vs bank dim {params.dim}")
    queries = ad.reshape(ad.transpose(feature_map, (0, 2, 3, 1)), (B * H * W, C))
    y_part = read_memory(queries, params.bank_part, params.threshold_for(params.bank_part))
    y_ins = read_memory(y_part, params.bank_ins, params.threshold_for(params.bank_ins))
    y_sem = read_memory(y_ins, params.bank_sem, params.threshold_for(params.bank_sem))

    def back(t):
        return ad.transpose(ad.reshape(t, (B, H, W, C)), (0, 3, 1, 2))

    return back(y_part), back(y_ins), back(y_sem)


def protomix(y_part: Tensor, y_ins: Tensor, y_sem: Tensor, w: Tensor) -> Tensor:
    """Gated fusion: g*y_sem + (1-g)/2*(y_ins + y_part) with g = sigmoid(w).

    The three coefficients form a convex combination for any w.
    """
    if not (y_part.shape == y_ins.shape == y_sem.shape):
        raise ShapeError(
            f"protomix: shapes differ: {y_part.shape}, {y_ins.shape}, {y_sem.shape}")
    g = ad.sigmoid(w)
    half = ad.mul(ad.sub(1.0, g), 0.5)
    return ad.add(ad.mul(g, y_sem), ad.mul(half, ad.add(y_ins, y_part)))


def protomix_coefficients(w: float):
    """The (semantic, instance, part) mixing coefficients for gate value w."""
    g = 1.0 / (1.0 + np.exp(-float(w)))
    half = (1.0 - g) / 2.0
    return g, half, half
