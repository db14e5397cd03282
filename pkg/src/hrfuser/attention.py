"""Multi-window cross-attention (MWCA) fusion.

Feature maps here are channel-last ``(B, H, W, D)`` tensors (a leading
batch axis is optional for the window helpers).  Every secondary map is
split with exactly the grid used for the primary map, so window ``p`` of
every modality covers the same pixels.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .layers import Conv2d, LayerNorm, Linear, Module
from .pnm import write_pgm
from .tensor import ConfigError, ShapeError, Tensor

FUSION_VARIANTS = ("mwca", "mwca_no_secondary_skip", "addition", "none")


@dataclass(frozen=True)
class WindowGrid:
    window_size: int
    batch: int
    height: int
    width: int
    rows: int
    cols: int
    pad_bottom: int
    pad_right: int
    batched: bool = True

    @property
    def num_windows(self) -> int:
        """Windows per image (P)."""
        return self.rows * self.cols

    @property
    def tokens(self) -> int:
        return self.window_size * self.window_size


def make_grid(height: int, width: int, window_size: int, batch: int = 1, batched: bool = True) -> WindowGrid:
    if window_size <= 0:
        raise ConfigError(f"window size must be positive, got {window_size}")
    if height < 1 or width < 1:
        raise ShapeError(f"empty feature map {height}x{width}")
    rows = -(-height // window_size)
    cols = -(-width // window_size)
    return WindowGrid(
        window_size, batch, height, width, rows, cols,
        rows * window_size - height, cols * window_size - width, batched,
    )


def window_split(x: Tensor, window_size: int) -> tuple[Tensor, WindowGrid]:
    """Zero-pad bottom/right to window multiples and tile row-major.

    ``(H, W, D)`` gives ``(P, K*K, D)``; ``(B, H, W, D)`` gives
    ``(B*P, K*K, D)`` with image-major window order.
    """
    batched = x.ndim == 4
    if not batched:
        if x.ndim != 3:
            raise ShapeError(f"window_split expects (H, W, D) or (B, H, W, D), got {x.shape}")
        x = x.reshape(1, *x.shape)
    b, h, w, d = x.shape
    grid = make_grid(h, w, window_size, b, batched)
    k = window_size
    if grid.pad_bottom or grid.pad_right:
        x = T.pad(x, [(0, 0), (0, grid.pad_bottom), (0, grid.pad_right), (0, 0)])
    x = x.reshape(b, grid.rows, k, grid.cols, k, d)
    x = T.transpose(x, (0, 1, 3, 2, 4, 5))
    return x.reshape(b * grid.num_windows, k * k, d), grid


def window_merge(windows: Tensor, grid: WindowGrid) -> Tensor:
    """Inverse of :func:`window_split`; padded positions are dropped."""
    k = grid.window_size
    if windows.ndim != 3 or windows.shape[0] != grid.batch * grid.num_windows or windows.shape[1] != k * k:
        raise ShapeError(f"windows {windows.shape} do not match grid {grid}")
    d = windows.shape[2]
    x = windows.reshape(grid.batch, grid.rows, grid.cols, k, k, d)
    x = T.transpose(x, (0, 1, 3, 2, 4, 5)).reshape(grid.batch, grid.rows * k, grid.cols * k, d)
    if grid.pad_bottom or grid.pad_right:
        x = x[:, : grid.height, : grid.width, :]
    if not grid.batched:
        x = x.reshape(grid.height, grid.width, d)
    return x


class MultiHeadAttention(Module):
    """Query/key/value/output projections for one (primary, source) pair.

    Head ``h`` owns columns ``h*D/H:(h+1)*D/H`` of the query, key and value
    projections; the heads are concatenated before the output projection.
    """

    def __init__(self, rng, dim: int, heads: int, bias: bool = True):
        super().__init__()
        if heads < 1 or dim % heads:
            raise ConfigError(f"{dim} channels are not divisible by {heads} heads")
        self.dim, self.heads = dim, heads
        self.q = Linear(rng, dim, dim, bias)
        self.k = Linear(rng, dim, dim, bias)
        self.v = Linear(rng, dim, dim, bias)
        self.o = Linear(rng, dim, dim, bias)

    def forward(self, queries: Tensor, source: Tensor, keep_attention: bool = False):
        """``queries``/``source``: (Bp, N, D).  Returns (Bp, N, D) after the output projection."""
        if queries.shape != source.shape or queries.shape[-1] != self.dim:
            raise ShapeError(f"attention inputs {queries.shape}/{source.shape} vs dim {self.dim}")
        bp, n, d = queries.shape
        h, dh = self.heads, d // self.heads

        def heads_first(t):
            return T.transpose(t.reshape(bp, n, h, dh), (0, 2, 1, 3))

        q = heads_first(self.q(queries))
        k = heads_first(self.k(source))
        v = heads_first(self.v(source))
        scores = T.matmul(q, T.transpose(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(dh))
        attn = T.softmax(scores, axis=-1)
        ctx = T.transpose(T.matmul(attn, v), (0, 2, 1, 3)).reshape(bp, n, d)
        out = self.o(ctx)
        if keep_attention:
            return out, attn.data
        return out


def cross_attention_head(xp: Tensor, yp: Tensor, weights: MultiHeadAttention, h: int) -> Tensor:
    """One head: softmax((xp Wq_h)(yp Wk_h)^T / sqrt(D/H)) (yp Wv_h), shape (K*K, D/H)."""
    d, heads = weights.dim, weights.heads
    if xp.ndim != 2 or xp.shape != yp.shape or xp.shape[1] != d:
        raise ShapeError(f"head inputs {xp.shape}/{yp.shape} vs dim {d}")
    if not 0 <= h < heads:
        raise ConfigError(f"head index {h} outside 0..{heads - 1}")
    dh = d // heads
    cols = slice(h * dh, (h + 1) * dh)

    def project(x, lin):
        w = lin.weight[:, cols]
        b = lin.bias[cols] if lin.bias is not None else None
        return T.linear(x, w, b)

    q, k, v = project(xp, weights.q), project(yp, weights.k), project(yp, weights.v)
    scores = T.matmul(q, T.transpose(k)) * (1.0 / math.sqrt(dh))
    return T.matmul(T.softmax(scores, axis=-1), v)


def parallel_cross_attention(
    xp: Tensor,
    yps: Sequence[Tensor],
    weights: Sequence[MultiHeadAttention],
    variant: str = "mwca",
    queries: Tensor | None = None,
    sources: Sequence[Tensor] | None = None,
    attention_out: list | None = None,
) -> Tensor:
    """Fuse every secondary window set into the primary one.

    Returns ``xp + sum_b [yp_b + MultiHead(queries, sources_b) W_o^b]``; the
    ``yp_b`` skip is dropped for ``mwca_no_secondary_skip``.  ``queries`` and
    ``sources`` default to ``xp`` and ``yps`` (pass normalized copies to
    attend on normalized tokens while skipping the raw ones).  Works on a
    single window ``(K*K, D)`` or a stack ``(P, K*K, D)``.
    """
    if len(yps) != len(weights):
        raise ConfigError(f"{len(yps)} secondary inputs but {len(weights)} weight sets")
    if variant not in ("mwca", "mwca_no_secondary_skip"):
        raise ConfigError(f"parallel cross-attention does not implement variant {variant!r}")
    for y in yps:
        if y.shape != xp.shape:
            raise ShapeError(f"secondary window {y.shape} vs primary {xp.shape}")
    single = xp.ndim == 2
    queries = xp if queries is None else queries
    sources = list(yps) if sources is None else list(sources)

    def lift(t):
        return t.reshape(1, *t.shape) if single else t

    out = xp
    for y, src, w in zip(yps, sources, weights):
        res = w(lift(queries), lift(src), keep_attention=attention_out is not None)
        if attention_out is not None:
            res, attn = res
            attention_out.append(attn)
        if single:
            res = res.reshape(*xp.shape)
        out = out + res if variant == "mwca_no_secondary_skip" else out + (y + res)
    return out


@dataclass(frozen=True)
class MwcaBlockConfig:
    dim: int
    heads: int
    window_size: int = 7
    num_modalities: int = 1
    fusion_variant: str = "mwca"
    ffn_ratio: int = 4
    bias: bool = True

    def __post_init__(self):
        if self.window_size < 1:
            raise ConfigError("window size must be >= 1")
        if self.num_modalities < 0:
            raise ConfigError("modality count must be >= 0")
        if self.ffn_ratio < 1:
            raise ConfigError("FFN expansion ratio must be >= 1")
        if self.fusion_variant not in FUSION_VARIANTS:
            raise ConfigError(f"unknown fusion variant {self.fusion_variant!r}")
        if self.heads < 1 or self.dim % self.heads:
            raise ConfigError(f"{self.dim} channels are not divisible by {self.heads} heads")


class FeedForward(Module):
    """Pre-norm FFN on NCHW maps: 1x1 expand, 3x3 depth-wise conv, GELU, 1x1 reduce."""

    def __init__(self, rng, dim: int, ratio: int = 4):
        super().__init__()
        hidden = dim * ratio
        self.norm = LayerNorm(dim, axis=1)
        self.expand = Conv2d(rng, dim, hidden, 1)
        self.dw = Conv2d(rng, hidden, hidden, 3, groups=hidden)
        self.reduce = Conv2d(rng, hidden, dim, 1)

    def forward(self, x: Tensor) -> Tensor:
        h = self.dw(self.expand(self.norm(x)))
        return x + self.reduce(T.gelu(h))


def to_channels_last(x: Tensor) -> Tensor:
    return T.transpose(x, (0, 2, 3, 1))


def to_channels_first(x: Tensor) -> Tensor:
    return T.transpose(x, (0, 3, 1, 2))


class MwcaBlock(Module):
    """MWCA fusion of M secondary maps into one primary stream, then the FFN."""

    def __init__(self, rng, cfg: MwcaBlockConfig):
        super().__init__()
        self.cfg = cfg
        self.norm_x = LayerNorm(cfg.dim)
        self.norm_y = [LayerNorm(cfg.dim) for _ in range(cfg.num_modalities)]
        self.attn = [MultiHeadAttention(rng, cfg.dim, cfg.heads, cfg.bias) for _ in range(cfg.num_modalities)]
        self.ffn = FeedForward(rng, cfg.dim, cfg.ffn_ratio) if cfg.fusion_variant != "none" else None

    def _check(self, x: Tensor, ys: Sequence[Tensor]) -> None:
        if len(ys) != self.cfg.num_modalities:
            raise ConfigError(f"block built for {self.cfg.num_modalities} modalities, got {len(ys)}")
        for y in ys:
            if y.shape != x.shape:
                raise ShapeError(f"secondary map {y.shape} not aligned with primary {x.shape}")

    def fuse(self, x: Tensor, ys: Sequence[Tensor], attention_out: list | None = None) -> Tensor:
        """Pre-FFN output on channel-last maps (B, H, W, D)."""
        self._check(x, ys)
        variant = self.cfg.fusion_variant
        if variant == "none" or not ys:
            return x
        if variant == "addition":
            out = x
            for y in ys:
                out = out + y
            return out
        k = self.cfg.window_size
        xw, grid = window_split(x, k)
        qw, _ = window_split(self.norm_x(x), k)
        yws, sws = [], []
        for y, norm in zip(ys, self.norm_y):
            yw, g = window_split(y, k)
            if g != grid:
                raise ShapeError("secondary partition differs from the primary partition")
            sw, _ = window_split(norm(y), k)
            yws.append(yw)
            sws.append(sw)
        fused = parallel_cross_attention(xw, yws, self.attn, variant, qw, sws, attention_out)
        return window_merge(fused, grid)

    def forward(self, x: Tensor, ys: Sequence[Tensor]) -> Tensor:
        """NCHW in, NCHW out."""
        if self.cfg.fusion_variant == "none":
            self._check(x, ys)
            return x
        fused = self.fuse(to_channels_last(x), [to_channels_last(y) for y in ys])
        return self.ffn(to_channels_first(fused))


def mwca_block(x: Tensor, ys: Sequence[Tensor], cfg: MwcaBlockConfig, block: MwcaBlock) -> Tensor:
    """Run ``block`` (built from ``cfg``) on NCHW maps."""
    if block.cfg != cfg:
        raise ConfigError("block weights were built for a different configuration")
    return block(x, ys)


def attention_mass(block: MwcaBlock, x: Tensor, ys: Sequence[Tensor]) -> list[np.ndarray]:
    """Per modality, the softmax mass each secondary token receives.

    Sums attention weights over all queries of its window, averaged over
    heads; returned as (B, H, W) arrays on channel-last inputs.
    """
    if block.cfg.fusion_variant not in ("mwca", "mwca_no_secondary_skip"):
        raise ConfigError("attention maps exist only for attention-based fusion")
    probs: list[np.ndarray] = []
    with T.no_grad():
        block.fuse(x, ys, attention_out=probs)
    _, grid = window_split(Tensor(np.zeros(x.shape[:3] + (1,))), block.cfg.window_size)
    maps = []
    for attn in probs:
        mass = attn.sum(axis=-2).mean(axis=1)  # (B*P, N)
        merged = window_merge(Tensor(mass[:, :, None]), grid).data[..., 0]
        maps.append(merged)
    return maps


def dump_attention_maps(block: MwcaBlock, x: Tensor, ys: Sequence[Tensor], path, names: Sequence[str] | None = None):
    """Write one PGM and one raw tensor file per secondary modality (first batch item).

    ``x`` and ``ys`` are NCHW, as for the block's forward pass.  Returns the
    list of written file paths.
    """
    os.makedirs(path, exist_ok=True)
    if not os.access(path, os.W_OK):
        raise PermissionError(f"cannot write attention maps to {path}")
    maps = attention_mass(block, to_channels_last(x), [to_channels_last(y) for y in ys])
    names = list(names) if names is not None else [f"modality{i}" for i in range(len(maps))]
    written = []
    for name, m in zip(names, maps):
        pgm = os.path.join(path, f"attn_{name}.pgm")
        raw = os.path.join(path, f"attn_{name}.mwca")
        write_pgm(pgm, m[0])
        T.save_tensors(raw, {f"attention/{name}": m})
        written += [pgm, raw]
    return written
