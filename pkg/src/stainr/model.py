"""Restoration network: channel/spatial attention blocks in a U-net.

Each block applies channel attention (heads attend across channel slices
using spatially L2-normalized queries and keys with a learnable per-head
temperature), a gated depthwise feed-forward, overlapping-window spatial
attention (query windows attend to larger concentric key/value windows),
and a second feed-forward, every branch pre-normalized and residual.

Blocks are stacked in an encoder/decoder pyramid with pixel-shuffle
resampling and concatenation skips. The network predicts a residual that
is added to its input, so zero-initialized output projections make the
whole model start as the identity map.
"""

from __future__ import annotations

import hashlib
import math

import numpy as np

from . import autodiff as ad
from . import memory as mem
from .autodiff import Tensor
from .errors import ConfigError, ShapeError


class ModelConfig:
    """Architecture hyperparameters; desk-scale defaults."""

    FIELDS = ("levels", "blocks_per_level", "base_channels", "heads_per_level",
              "n_part", "n_ins", "n_sem", "sparsity_threshold",
              "enable_docmemory", "enable_srtransformer", "memory_residual",
              "ffn_expansion", "q_window", "overlap_ratio")

    def __init__(self, levels=3, blocks_per_level=(1, 1, 2), base_channels=16,
                 heads_per_level=(1, 2, 4), n_part=64, n_ins=32, n_sem=16,
                 sparsity_threshold=None, enable_docmemory=True,
                 enable_srtransformer=True, memory_residual=True,
                 ffn_expansion=2.0, q_window=8, overlap_ratio=0.5):
        self.levels = int(levels)
        self.blocks_per_level = tuple(int(b) for b in blocks_per_level)
        self.base_channels = int(base_channels)
        self.heads_per_level = tuple(int(h) for h in heads_per_level)
        self.n_part = int(n_part)
        self.n_ins = int(n_ins)
        self.n_sem = int(n_sem)
        self.sparsity_threshold = None if sparsity_threshold is None else float(sparsity_threshold)
        self.enable_docmemory = bool(enable_docmemory)
        self.enable_srtransformer = bool(enable_srtransformer)
        self.memory_residual = bool(memory_residual)
        self.ffn_expansion = float(ffn_expansion)
        self.q_window = int(q_window)
        self.overlap_ratio = float(overlap_ratio)
        self.validate()

    def validate(self):
        if self.levels < 1:
            raise ConfigError(f"levels must be >= 1, got {self.levels}")
        if len(self.blocks_per_level) != self.levels:
            raise ConfigError(
                f"blocks_per_level has {len(self.blocks_per_level)} entries for {self.levels} levels")
        if len(self.heads_per_level) != self.levels:
            raise ConfigError(
                f"heads_per_level has {len(self.heads_per_level)} entries for {self.levels} levels")
        if self.base_channels < 1:
            raise ConfigError("base_channels must be positive")
        if self.base_channels % max(self.heads_per_level):
            raise ConfigError(
                f"base_channels {self.base_channels} not divisible by max heads {max(self.heads_per_level)}")
        for i, h in enumerate(self.heads_per_level):
            if (self.base_channels << i) % h:
                raise ConfigError(f"level {i} channels {self.base_channels << i} not divisible by {h} heads")
        if min(self.n_part, self.n_ins, self.n_sem) < 1:
            raise ConfigError("bank sizes must be >= 1")
        if self.ffn_expansion <= 0:
            raise ConfigError("ffn_expansion must be positive")
        if self.q_window < 1:
            raise ConfigError("q_window must be >= 1")
        kv = self.q_window * (1.0 + self.overlap_ratio)
        if abs(kv - round(kv)) > 1e-9:
            raise ConfigError(
                f"q_window*(1+overlap_ratio) = {kv} must be an integer")
        if (int(round(kv)) - self.q_window) % 2:
            raise ConfigError(
                f"key/value window {int(round(kv))} minus query window {self.q_window} must be even")

    @property
    def kv_window(self):
        return int(round(self.q_window * (1.0 + self.overlap_ratio)))

    @property
    def spatial_multiple(self):
        """Input H and W must be divisible by this."""
        return (2 ** (self.levels - 1)) * self.q_window

    def canonical_text(self) -> str:
        lines = []
        for k in self.FIELDS:
            v = getattr(self, k)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            lines.append(f"{k}={v}")
        return "\n".join(lines) + "\n"

    def hash(self) -> str:
        return hashlib.sha256(self.canonical_text().encode("utf-8")).hexdigest()

    def replace(self, **kw) -> "ModelConfig":
        base = {k: getattr(self, k) for k in self.FIELDS}
        base.update(kw)
        return ModelConfig(**base)


# ---------------------------------------------------------------------------
# parameter containers
# ---------------------------------------------------------------------------

def _he_conv(rng, cout, cin, k, dtype):
    std = math.sqrt(2.0 / (cin * k * k))
    return Tensor((rng.standard_normal((cout, cin, k, k)) * std).astype(dtype), requires_grad=True)


def _zero_conv(cout, cin, k, dtype):
    return Tensor(np.zeros((cout, cin, k, k), dtype=dtype), requires_grad=True)


def _bias(c, dtype):
    return Tensor(np.zeros(c, dtype=dtype), requires_grad=True)


class Conv:
    """1x1 or 3x3 convolution parameters (weight + bias)."""

    __slots__ = ("weight", "bias", "pad")

    def __init__(self, weight, bias, pad=0):
        self.weight = weight
        self.bias = bias
        self.pad = pad

    @classmethod
    def he(cls, rng, cin, cout, k, dtype):
        return cls(_he_conv(rng, cout, cin, k, dtype), _bias(cout, dtype), pad=k // 2)

    @classmethod
    def zeros(cls, cin, cout, k, dtype):
        return cls(_zero_conv(cout, cin, k, dtype), _bias(cout, dtype), pad=k // 2)

    def __call__(self, x):
        return ad.conv2d(x, self.weight, self.bias, pad=self.pad)

    def named_tensors(self, prefix):
        yield prefix + ".weight", self.weight
        yield prefix + ".bias", self.bias


class LayerNormChannels:
    """LayerNorm over the channel axis of [B,C,H,W] maps."""

    __slots__ = ("gamma", "beta")

    def __init__(self, c, dtype):
        self.gamma = Tensor(np.ones(c, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(c, dtype=dtype), requires_grad=True)

    def __call__(self, x):
        xt = ad.transpose(x, (0, 2, 3, 1))
        yt = ad.layer_norm(xt, self.gamma, self.beta)
        return ad.transpose(yt, (0, 3, 1, 2))

    def named_tensors(self, prefix):
        yield prefix + ".gamma", self.gamma
        yield prefix + ".beta", self.beta


class MHDCAParams:
    """Channel attention: 1x1 + depthwise 3x3 produce Q/K/V, heads attend
    over channel slices, log-temperature scales the similarity."""

    __slots__ = ("qkv_pointwise", "qkv_pw_bias", "qkv_depthwise", "qkv_dw_bias",
                 "out_proj", "out_bias", "log_temperature", "heads")

    def __init__(self, rng, channels, heads, dtype):
        if channels % heads:
            raise ShapeError(f"channel attention: {channels} channels not divisible by {heads} heads")
        c3 = 3 * channels
        self.qkv_pointwise = _he_conv(rng, c3, channels, 1, dtype)
        self.qkv_pw_bias = _bias(c3, dtype)
        dw_std = math.sqrt(2.0 / 9.0)
        self.qkv_depthwise = Tensor((rng.standard_normal((c3, 1, 3, 3)) * dw_std).astype(dtype),
                                    requires_grad=True)
        self.qkv_dw_bias = _bias(c3, dtype)
        # Zero start: the enclosing residual block begins as the identity.
        self.out_proj = _zero_conv(channels, channels, 1, dtype)
        self.out_bias = _bias(channels, dtype)
        self.log_temperature = Tensor(np.zeros(heads, dtype=dtype), requires_grad=True)
        self.heads = heads

    def named_tensors(self, prefix):
        yield prefix + ".qkv_pointwise", self.qkv_pointwise
        yield prefix + ".qkv_pw_bias", self.qkv_pw_bias
        yield prefix + ".qkv_depthwise", self.qkv_depthwise
        yield prefix + ".qkv_dw_bias", self.qkv_dw_bias
        yield prefix + ".out_proj", self.out_proj
        yield prefix + ".out_bias", self.out_bias
        yield prefix + ".log_temperature", self.log_temperature


def mhdca(x: Tensor, p: MHDCAParams) -> Tensor:
    """Per-head channel-to-channel attention; output shape equals input."""
    B, C, H, W = x.shape
    heads = p.heads
    hd = C // heads
    qkv = ad.conv2d(x, p.qkv_pointwise, p.qkv_pw_bias)
    qkv = ad.depthwise_conv2d(qkv, p.qkv_depthwise, p.qkv_dw_bias)
    q = ad.reshape(ad.slice_axis(qkv, 1, 0, C), (B, heads, hd, H * W))
    k = ad.reshape(ad.slice_axis(qkv, 1, C, 2 * C), (B, heads, hd, H * W))
    v = ad.reshape(ad.slice_axis(qkv, 1, 2 * C, 3 * C), (B, heads, hd, H * W))
    qn = ad.l2_normalize(q, axis=-1)
    kn = ad.l2_normalize(k, axis=-1)
    logits = ad.matmul(qn, ad.transpose(kn, (0, 1, 3, 2)))
    tau = ad.reshape(ad.texp(p.log_temperature), (1, heads, 1, 1))
    attn = ad.softmax(ad.mul(logits, tau), axis=-1)
    out = ad.reshape(ad.matmul(attn, v), (B, C, H, W))
    return ad.conv2d(out, p.out_proj, p.out_bias)


class OCAParams:
    """Spatial window attention with enlarged key/value windows."""

    __slots__ = ("q_proj", "q_bias", "kv_proj", "kv_bias", "out_proj", "out_bias",
                 "heads", "q_window", "kv_window")

    def __init__(self, rng, channels, heads, q_window, kv_window, dtype):
        if channels % heads:
            raise ShapeError(f"window attention: {channels} channels not divisible by {heads} heads")
        if kv_window < q_window or (kv_window - q_window) % 2:
            raise ConfigError(f"kv window {kv_window} must exceed q window {q_window} by an even margin")
        self.q_proj = _he_conv(rng, channels, channels, 1, dtype)
        self.q_bias = _bias(channels, dtype)
        self.kv_proj = _he_conv(rng, 2 * channels, channels, 1, dtype)
        self.kv_bias = _bias(2 * channels, dtype)
        self.out_proj = _zero_conv(channels, channels, 1, dtype)
        self.out_bias = _bias(channels, dtype)
        self.heads = heads
        self.q_window = q_window
        self.kv_window = kv_window

    def named_tensors(self, prefix):
        yield prefix + ".q_proj", self.q_proj
        yield prefix + ".q_bias", self.q_bias
        yield prefix + ".kv_proj", self.kv_proj
        yield prefix + ".kv_bias", self.kv_bias
        yield prefix + ".out_proj", self.out_proj
        yield prefix + ".out_bias", self.out_bias


def oca(x: Tensor, p: OCAParams) -> Tensor:
    """Non-overlapping query windows attend to concentric larger windows.

    kv_window == q_window degenerates to plain window self-attention.
    """
    B, C, H, W = x.shape
    qw, kw = p.q_window, p.kv_window
    if H % qw or W % qw:
        raise ShapeError(f"window attention: spatial size {H}x{W} not divisible by window {qw}")
    heads = p.heads
    hd = C // heads
    pad = (kw - qw) // 2

    q = ad.conv2d(x, p.q_proj, p.q_bias)
    kv = ad.conv2d(x, p.kv_proj, p.kv_bias)
    k = ad.slice_axis(kv, 1, 0, C)
    v = ad.slice_axis(kv, 1, C, 2 * C)

    qwin = ad.unfold_windows(q, qw, qw, 0)          # [B,nH,nW,C,qw,qw]
    kwin = ad.unfold_windows(k, kw, qw, pad)        # [B,nH,nW,C,kw,kw]
    vwin = ad.unfold_windows(v, kw, qw, pad)
    nH, nW = qwin.shape[1], qwin.shape[2]

    def split_heads(t, win):
        t = ad.reshape(t, (B, nH, nW, heads, hd, win * win))
        return ad.transpose(t, (0, 1, 2, 3, 5, 4))  # [B,nH,nW,h,win*win,hd]

    qh = split_heads(qwin, qw)
    kh = split_heads(kwin, kw)
    vh = split_heads(vwin, kw)
    scale = hd ** -0.5
    logits = ad.mul(ad.matmul(qh, ad.transpose(kh, (0, 1, 2, 3, 5, 4))), scale)
    attn = ad.softmax(logits, axis=-1)              # rows over kv positions
    out = ad.matmul(attn, vh)                       # [B,nH,nW,h,qw*qw,hd]
    out = ad.reshape(ad.transpose(out, (0, 1, 2, 3, 5, 4)), (B, nH, nW, C, qw, qw))
    out = ad.reshape(ad.transpose(out, (0, 3, 1, 4, 2, 5)), (B, C, H, W))
    return ad.conv2d(out, p.out_proj, p.out_bias)


class FFNParams:
    """Gated feed-forward: expand, depthwise 3x3, gelu-gate, project back.

    The expanded width is rounded up to an even channel count so the two
    gate branches match.
    """

    __slots__ = ("project_in", "in_bias", "depthwise", "dw_bias",
                 "project_out", "out_bias", "half")

    def __init__(self, rng, channels, expansion, dtype):
        half = math.ceil(expansion * channels / 2.0)
        wide = 2 * half
        self.project_in = _he_conv(rng, wide, channels, 1, dtype)
        self.in_bias = _bias(wide, dtype)
        dw_std = math.sqrt(2.0 / 9.0)
        self.depthwise = Tensor((rng.standard_normal((wide, 1, 3, 3)) * dw_std).astype(dtype),
                                requires_grad=True)
        self.dw_bias = _bias(wide, dtype)
        self.project_out = _zero_conv(channels, half, 1, dtype)
        self.out_bias = _bias(channels, dtype)
        self.half = half

    def named_tensors(self, prefix):
        yield prefix + ".project_in", self.project_in
        yield prefix + ".in_bias", self.in_bias
        yield prefix + ".depthwise", self.depthwise
        yield prefix + ".dw_bias", self.dw_bias
        yield prefix + ".project_out", self.project_out
        yield prefix + ".out_bias", self.out_bias


def ffn(x: Tensor, p: FFNParams) -> Tensor:
    wide = ad.conv2d(x, p.project_in, p.in_bias)
    wide = ad.depthwise_conv2d(wide, p.depthwise, p.dw_bias)
    b1 = ad.slice_axis(wide, 1, 0, p.half)
    b2 = ad.slice_axis(wide, 1, p.half, 2 * p.half)
    gated = ad.mul(ad.gelu(b1), b2)
    return ad.conv2d(gated, p.project_out, p.out_bias)


class BlockParams:
    """One restoration block: channel attention, FFN, window attention, FFN.

    Each of the four residual branches gets its own pre-norm parameters.
    """

    __slots__ = ("norm1", "norm2", "norm3", "norm4", "attn_channel", "ffn1",
                 "attn_window", "ffn2")

    def __init__(self, rng, channels, heads, q_window, kv_window, ffn_expansion, dtype):
        self.norm1 = LayerNormChannels(channels, dtype)
        self.attn_channel = MHDCAParams(rng, channels, heads, dtype)
        self.norm2 = LayerNormChannels(channels, dtype)
        self.ffn1 = FFNParams(rng, channels, ffn_expansion, dtype)
        self.norm3 = LayerNormChannels(channels, dtype)
        self.attn_window = OCAParams(rng, channels, heads, q_window, kv_window, dtype)
        self.norm4 = LayerNormChannels(channels, dtype)
        self.ffn2 = FFNParams(rng, channels, ffn_expansion, dtype)

    def named_tensors(self, prefix):
        yield from self.norm1.named_tensors(prefix + ".norm1")
        yield from self.attn_channel.named_tensors(prefix + ".attn_channel")
        yield from self.norm2.named_tensors(prefix + ".norm2")
        yield from self.ffn1.named_tensors(prefix + ".ffn1")
        yield from self.norm3.named_tensors(prefix + ".norm3")
        yield from self.attn_window.named_tensors(prefix + ".attn_window")
        yield from self.norm4.named_tensors(prefix + ".norm4")
        yield from self.ffn2.named_tensors(prefix + ".ffn2")


def srtransformer_block(x: Tensor, p: BlockParams) -> Tensor:
    """Residual wiring; zero-initialized projections make this the identity."""
    x = ad.add(x, mhdca(p.norm1(x), p.attn_channel))
    x = ad.add(x, ffn(p.norm2(x), p.ffn1))
    x = ad.add(x, oca(p.norm3(x), p.attn_window))
    x = ad.add(x, ffn(p.norm4(x), p.ffn2))
    return x


# ---------------------------------------------------------------------------
# full model
# ---------------------------------------------------------------------------

class ModelParams:
    """All learnable tensors of the restorer, in deterministic order."""

    def __init__(self, config: ModelConfig, seed: int, dtype=np.float32):
        config.validate()
        self.config = config
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        C = config.base_channels
        kv = config.kv_window

        self.input_conv = Conv.he(rng, 3, C, 3, dtype)

        self.memory = None
        self.memory_proj = None
        if config.enable_docmemory:
            self.memory = mem.init_docmemory(
                rng, C, n_part=config.n_part, n_ins=config.n_ins, n_sem=config.n_sem,
                sparsity_threshold=config.sparsity_threshold, dtype=dtype)
            # residual wiring starts with the memory contribution at zero
            # and learns it in; replacement wiring has to pass features
            # through from the first step, so it starts He-scaled
            self.memory_proj = (Conv.zeros(C, C, 1, dtype) if config.memory_residual
                                else Conv.he(rng, C, C, 1, dtype))

        def make_blocks(level):
            if not config.enable_srtransformer:
                return []
            ch = C << level
            return [BlockParams(rng, ch, config.heads_per_level[level],
                                config.q_window, kv, config.ffn_expansion, dtype)
                    for _ in range(config.blocks_per_level[level])]

        self.encoder_blocks = []
        self.down_projs = []
        for lvl in range(config.levels - 1):
            self.encoder_blocks.append(make_blocks(lvl))
            ch = C << lvl
            self.down_projs.append(Conv.he(rng, 4 * ch, 2 * ch, 1, dtype))

        self.bottleneck = make_blocks(config.levels - 1)

        self.up_projs = []
        self.skip_fuses = []
        self.decoder_blocks = []
        for lvl in range(config.levels - 2, -1, -1):
            ch = C << lvl
            self.up_projs.append(Conv.he(rng, 2 * ch, 4 * ch, 1, dtype))
            self.skip_fuses.append(Conv.he(rng, 2 * ch, ch, 1, dtype))
            self.decoder_blocks.append(make_blocks(lvl))

        self.output_conv = Conv.zeros(C, 3, 3, dtype)

    def named_tensors(self):
        yield from self.input_conv.named_tensors("input_conv")
        if self.memory is not None:
            yield from self.memory.named_tensors()
            yield from self.memory_proj.named_tensors("memory_proj")
        for lvl, blocks in enumerate(self.encoder_blocks):
            for i, b in enumerate(blocks):
                yield from b.named_tensors(f"enc{lvl}.block{i}")
            yield from self.down_projs[lvl].named_tensors(f"down{lvl}")
        for i, b in enumerate(self.bottleneck):
            yield from b.named_tensors(f"mid.block{i}")
        for d, blocks in enumerate(self.decoder_blocks):
            lvl = self.config.levels - 2 - d
            yield from self.up_projs[d].named_tensors(f"up{lvl}")
            yield from self.skip_fuses[d].named_tensors(f"fuse{lvl}")
            for i, b in enumerate(blocks):
                yield from b.named_tensors(f"dec{lvl}.block{i}")
        yield from self.output_conv.named_tensors("output_conv")

    def parameter_count(self):
        return sum(t.size for _, t in self.named_tensors())


def build_model(config: ModelConfig, seed: int, dtype=np.float32) -> ModelParams:
    """Seeded parameter initialization; same (config, seed) is bit-identical."""
    return ModelParams(config, seed, dtype)


def check_spatial(config: ModelConfig, h: int, w: int):
    m = config.spatial_multiple
    if h % m or w % m:
        need_h = (m - h % m) % m
        need_w = (m - w % m) % m
        raise ShapeError(
            f"input {h}x{w} must be divisible by {m} "
            f"(2^(levels-1) * q_window); pad by {need_h} rows and {need_w} cols")


def model_forward(stained: Tensor, params: ModelParams, inference: bool = False) -> Tensor:
    """Predict a residual correction and add it to the input.

    Output is clamped to [0,1] only when `inference` is set, so training
    gradients are unbiased by the clamp.
    """
    if stained.ndim != 4 or stained.shape[1] != 3:
        raise ShapeError(f"expected [B,3,H,W] input, got {stained.shape}")
    cfg = params.config
    B, _, H, W = stained.shape
    check_spatial(cfg, H, W)

    feat = params.input_conv(stained)
    if params.memory is not None:
        yp, yi, ys = mem.docmemory_forward(feat, params.memory)
        mix = mem.protomix(yp, yi, ys, params.memory.mix_weight)
        mixed = params.memory_proj(mix)
        feat = ad.add(feat, mixed) if cfg.memory_residual else mixed

    skips = []
    for lvl in range(cfg.levels - 1):
        for b in params.encoder_blocks[lvl]:
            feat = srtransformer_block(feat, b)
        skips.append(feat)
        feat = params.down_projs[lvl](ad.pixel_unshuffle(feat, 2))

    for b in params.bottleneck:
        feat = srtransformer_block(feat, b)

    for d in range(cfg.levels - 1):
        feat = ad.pixel_shuffle(params.up_projs[d](feat), 2)
        skip = skips[cfg.levels - 2 - d]
        feat = params.skip_fuses[d](ad.concat([feat, skip], axis=1))
        for b in params.decoder_blocks[d]:
            feat = srtransformer_block(feat, b)

    residual = params.output_conv(feat)
    restored = ad.add(stained, residual)
    if inference:
        restored = Tensor(np.clip(restored.data, 0.0, 1.0))
    return restored
