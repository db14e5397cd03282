"""Multi-resolution multi-modal backbone.

The primary branch starts at 1/4 input resolution and gains one stream per
stage (1/8, 1/16, 1/32).  Every secondary modality runs a single-resolution
branch whose features are aligned to each primary stream with strided
convolutions and fused by MWCA blocks at the start of stages 2, 3 and 4.
A concat neck merges the four primary streams.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import config as config_io
from . import tensor as T
from .attention import (
    FUSION_VARIANTS,
    FeedForward,
    MultiHeadAttention,
    MwcaBlock,
    MwcaBlockConfig,
    to_channels_first,
    to_channels_last,
    window_merge,
    window_split,
)
from .layers import ConvBN, LayerNorm, Module, Sequential, current_scope, scope
from .tensor import ConfigError, ShapeError, Tensor

MODALITY_CHANNELS = {"camera": 3, "lidar": 3, "radar": 3, "gated": 1}

# variant -> (channels, heads, secondary channels, secondary heads, stem width, bottleneck planes, neck width)
PRESETS = {
    "T": ((18, 36, 72, 144), (1, 2, 4, 8), 18, 1, 64, 64, 64),
    "S": ((32, 64, 128, 256), (1, 2, 4, 8), 32, 1, 64, 64, 64),
    "B": ((78, 156, 312, 624), (2, 4, 8, 16), 78, 2, 64, 64, 128),
    "tiny": ((4, 8, 16, 32), (1, 2, 4, 8), 4, 1, 8, 4, 16),
}

BOTTLENECK_EXPANSION = 4


@dataclass(frozen=True)
class ModelConfig:
    """Architecture description.

    Width fields left at 0 (or empty) are filled from the ``variant`` preset.
    """

    variant: str = "T"
    channels: tuple[int, ...] = ()
    heads: tuple[int, ...] = ()
    secondary_channels: int = 0
    secondary_heads: int = 0
    stem_channels: int = 0
    bottleneck_planes: int = 0
    neck_channels: int = 0
    stage1_blocks: int = 2
    stage_blocks: int = 2
    window_size: int = 7
    ffn_ratio: int = 4
    modalities: tuple[str, ...] = ("camera",)
    primary_modality: str = "camera"
    radar_rcs: bool = True
    fusion_variant: str = "mwca"
    fuse_only_high_res: bool = False
    early_fusion: bool = False
    num_classes: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.variant not in PRESETS:
            raise ConfigError(f"unknown variant {self.variant!r}; choose from {sorted(PRESETS)}")
        preset = PRESETS[self.variant]
        names = ("channels", "heads", "secondary_channels", "secondary_heads",
                 "stem_channels", "bottleneck_planes", "neck_channels")
        for name, default in zip(names, preset):
            if not getattr(self, name):
                object.__setattr__(self, name, default)
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        object.__setattr__(self, "heads", tuple(int(h) for h in self.heads))
        object.__setattr__(self, "modalities", tuple(self.modalities))
        self._validate()

    def _validate(self):
        if len(self.channels) != 4 or len(self.heads) != 4:
            raise ConfigError("channels and heads need one entry per stream (4)")
        pairs = list(zip(self.channels, self.heads)) + [(self.secondary_channels, self.secondary_heads)]
        for d, h in pairs:
            if d < 1 or h < 1 or d % h:
                raise ConfigError(f"{d} channels are not divisible by {h} heads")
        if min(self.stem_channels, self.bottleneck_planes, self.neck_channels) < 1:
            raise ConfigError("stem, bottleneck and neck widths must be positive")
        if self.stage1_blocks < 1 or self.stage_blocks < 1:
            raise ConfigError("block counts must be >= 1")
        if self.window_size < 1 or self.ffn_ratio < 1:
            raise ConfigError("window size and FFN ratio must be >= 1")
        if self.fusion_variant not in FUSION_VARIANTS:
            raise ConfigError(f"unknown fusion variant {self.fusion_variant!r}")
        if len(set(self.modalities)) != len(self.modalities):
            raise ConfigError(f"duplicate modality in {self.modalities}")
        for m in self.modalities:
            if m not in MODALITY_CHANNELS:
                raise ConfigError(f"unknown modality {m!r}")
        if self.primary_modality not in self.modalities:
            raise ConfigError(f"primary modality {self.primary_modality!r} not in {self.modalities}")
        if self.num_classes < 1:
            raise ConfigError("num_classes must be >= 1")

    @property
    def secondaries(self) -> tuple[str, ...]:
        if self.early_fusion or self.fusion_variant == "none":
            return ()
        return tuple(m for m in self.modalities if m != self.primary_modality)

    def input_channels(self, modality: str) -> int:
        if modality == "radar" and not self.radar_rcs:
            return 2
        return MODALITY_CHANNELS[modality]

    @property
    def fused_streams(self) -> tuple[tuple[int, ...], ...]:
        """Zero-based primary streams receiving MWCA at each of the three levels."""
        if not self.secondaries:
            return ((), (), ())
        if self.fuse_only_high_res:
            return ((0,), (0,), (0,))
        return ((0, 1), (0, 1, 2), (0, 1, 2, 3))

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, values: Mapping) -> "ModelConfig":
        return config_io.build(cls, dict(values))


def component_rng(seed: int, name: str) -> np.random.Generator:
    """Philox stream keyed by (seed, component name), independent of build order."""
    seq = np.random.SeedSequence([int(seed), *name.encode("utf-8")])
    return np.random.Generator(np.random.Philox(seq))


def _crop(x: Tensor, h: int, w: int) -> Tensor:
    if x.shape[2] == h and x.shape[3] == w:
        return x
    return T.getitem(x, (slice(None), slice(None), slice(0, h), slice(0, w)))


# -- building blocks ---------------------------------------------------------

class Stem(Module):
    """Two stride-2 3x3 conv/BN/ReLU layers: 1/4 resolution."""

    def __init__(self, rng, cin: int, width: int):
        super().__init__()
        self.conv1 = ConvBN(rng, cin, width, 3, stride=2)
        self.conv2 = ConvBN(rng, width, width, 3, stride=2)

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[2] % 4 or x.shape[3] % 4:
            raise ShapeError(f"stem input must be NCHW with H, W divisible by 4, got {x.shape}")
        return self.conv2(self.conv1(x))


class Bottleneck(Module):
    def __init__(self, rng, cin: int, planes: int):
        super().__init__()
        cout = planes * BOTTLENECK_EXPANSION
        self.conv1 = ConvBN(rng, cin, planes, 1)
        self.conv2 = ConvBN(rng, planes, planes, 3)
        self.conv3 = ConvBN(rng, planes, cout, 1, act=False)
        self.shortcut = ConvBN(rng, cin, cout, 1, act=False) if cin != cout else None

    def forward(self, x: Tensor) -> Tensor:
        skip = self.shortcut(x) if self.shortcut is not None else x
        return T.relu(self.conv3(self.conv2(self.conv1(x))) + skip)


class TransformerBlock(Module):
    """Window self-attention with a pre-norm residual, then the FFN."""

    def __init__(self, rng, dim: int, heads: int, window_size: int, ffn_ratio: int):
        super().__init__()
        self.window_size = window_size
        self.norm = LayerNorm(dim)
        self.attn = MultiHeadAttention(rng, dim, heads)
        self.ffn = FeedForward(rng, dim, ffn_ratio)

    def forward(self, x: Tensor) -> Tensor:
        xl = to_channels_last(x)
        windows, grid = window_split(self.norm(xl), self.window_size)
        attended = window_merge(self.attn(windows, windows), grid)
        return self.ffn(to_channels_first(xl + attended))


class StreamStage(Module):
    """``blocks`` transformer blocks on each stream, streams independent."""

    def __init__(self, rng, channels: Sequence[int], heads: Sequence[int], blocks: int, window_size: int, ffn_ratio: int):
        super().__init__()
        self.streams = [
            Sequential(*[TransformerBlock(rng, d, h, window_size, ffn_ratio) for _ in range(blocks)])
            for d, h in zip(channels, heads)
        ]

    def forward(self, xs: Sequence[Tensor]) -> list[Tensor]:
        if len(xs) != len(self.streams):
            raise ShapeError(f"stage built for {len(self.streams)} streams, got {len(xs)}")
        return [s(x) for s, x in zip(self.streams, xs)]


class Exchange(Module):
    """All-to-all resample-and-sum between streams, then ReLU.

    Upsampling: 1x1 conv/BN to the target width, nearest upsample, crop.
    Downsampling: stride-2 3x3 conv/BN chain.  The last BN scale of every
    path starts at zero, so a fresh unit passes each stream through its ReLU
    unchanged.  A single stream is returned as is.
    """

    def __init__(self, rng, channels: Sequence[int]):
        super().__init__()
        self.channels = tuple(channels)
        self.paths: dict[str, Sequential] = {}
        n = len(channels)
        for i in range(n):
            for j in range(n):
                if i == j:
                    continue
                if j > i:
                    layers = [ConvBN(rng, channels[j], channels[i], 1, act=False)]
                else:
                    layers = [ConvBN(rng, channels[j], channels[j], 3, stride=2) for _ in range(i - j - 1)]
                    layers.append(ConvBN(rng, channels[j], channels[i], 3, stride=2, act=False))
                layers[-1].bn.weight.data[...] = 0.0
                self.paths[f"{i}_{j}"] = Sequential(*layers)

    def forward(self, xs: Sequence[Tensor]) -> list[Tensor]:
        if len(xs) != len(self.channels):
            raise ShapeError(f"exchange built for {len(self.channels)} streams, got {len(xs)}")
        if len(xs) == 1:
            return list(xs)
        out = []
        for i, xi in enumerate(xs):
            acc = xi
            h, w = xi.shape[2], xi.shape[3]
            for j, xj in enumerate(xs):
                if i == j:
                    continue
                y = self.paths[f"{i}_{j}"](xj)
                if j > i:
                    y = _crop(T.nearest_upsample(y, 2 ** (j - i)), h, w)
                if y.shape != xi.shape:
                    raise ShapeError(f"resampled stream {j}->{i} has shape {y.shape}, expected {xi.shape}")
                acc = acc + y
            out.append(T.relu(acc))
        return out


def _align_path(rng, cin: int, cout: int, steps: int) -> Sequential:
    if steps == 0:
        return Sequential(*([] if cin == cout else [ConvBN(rng, cin, cout, 1, act=False)]))
    layers = [ConvBN(rng, cin, cin, 3, stride=2) for _ in range(steps - 1)]
    layers.append(ConvBN(rng, cin, cout, 3, stride=2, act=False))
    return Sequential(*layers)


class Align(Module):
    """Per secondary modality: strided convs from the secondary resolution to one primary stream."""

    def __init__(self, rng, modalities: Sequence[str], cin: int, cout: int, stream: int):
        super().__init__()
        self.modalities = tuple(modalities)
        self.paths = {m: _align_path(rng, cin, cout, stream) for m in modalities}

    def forward(self, ys: Mapping[str, Tensor]) -> list[Tensor]:
        return [self.paths[m](ys[m]) for m in self.modalities]


class FusionLevel(Module):
    """Alignment and MWCA blocks for the primary streams fused at one level."""

    def __init__(self, rng, cfg: ModelConfig, streams: Sequence[int]):
        super().__init__()
        self.streams = tuple(streams)
        secondaries = cfg.secondaries
        self.align = {}
        self.blocks = {}
        for s in streams:
            self.align[str(s)] = Align(rng, secondaries, cfg.secondary_channels, cfg.channels[s], s)
            block_cfg = MwcaBlockConfig(
                dim=cfg.channels[s], heads=cfg.heads[s], window_size=cfg.window_size,
                num_modalities=len(secondaries), fusion_variant=cfg.fusion_variant, ffn_ratio=cfg.ffn_ratio,
            )
            self.blocks[str(s)] = MwcaBlock(rng, block_cfg)

    def forward(self, xs: Sequence[Tensor], ys: Mapping[str, Tensor]) -> list[Tensor]:
        out = list(xs)
        for s in self.streams:
            aligned = self.align[str(s)](ys)
            for y in aligned:
                if y.shape[2:] != xs[s].shape[2:]:
                    raise ShapeError(f"aligned secondary {y.shape} does not match stream {s} {xs[s].shape}")
            out[s] = self.blocks[str(s)](xs[s], aligned)
        return out


# -- branches ------------------------------------------------------------------

class PrimaryBranch(Module):
    _scope_name = "@primary"

    def __init__(self, rng, cfg: ModelConfig, cin: int):
        super().__init__()
        d = cfg.channels
        width = cfg.bottleneck_planes * BOTTLENECK_EXPANSION
        self.stem = Stem(rng, cin, cfg.stem_channels)
        self.stage1 = Sequential(*[
            Bottleneck(rng, cfg.stem_channels if i == 0 else width, cfg.bottleneck_planes)
            for i in range(cfg.stage1_blocks)
        ])
        self.transitions = [
            ConvBN(rng, width, d[0], 3),
            ConvBN(rng, width, d[1], 3, stride=2),
            ConvBN(rng, d[1], d[2], 3, stride=2),
            ConvBN(rng, d[2], d[3], 3, stride=2),
        ]
        self.exchanges = [Exchange(rng, d[:s + 1]) for s in (1, 2, 3)]
        self.stages = [
            StreamStage(rng, d[:s + 1], cfg.heads[:s + 1], cfg.stage_blocks, cfg.window_size, cfg.ffn_ratio)
            for s in (1, 2, 3)
        ]

    def forward(self, x: Tensor) -> Tensor:
        return self.stage1(self.stem(x))

    def open_stage(self, stage: int, streams: list[Tensor]) -> list[Tensor]:
        """Add the new stream of ``stage`` (2..4), then run the exchange unit."""
        with scope(self._scope_name):
            if stage == 2:
                streams = [self.transitions[0](streams[0]), self.transitions[1](streams[0])]
            else:
                streams = list(streams) + [self.transitions[stage - 1](streams[-1])]
            return self.exchanges[stage - 2](streams)

    def run_stage(self, stage: int, streams: list[Tensor]) -> list[Tensor]:
        with scope(self._scope_name):
            return self.stages[stage - 2](streams)


class SecondaryBranch(Module):
    """Single-stream branch: stem, bottlenecks, then two transformer stages."""

    def __init__(self, rng, cfg: ModelConfig, modality: str):
        super().__init__()
        self._scope_name = f"@secondary:{modality}"
        width = cfg.bottleneck_planes * BOTTLENECK_EXPANSION
        dim = (cfg.secondary_channels,)
        self.stem = Stem(rng, cfg.input_channels(modality), cfg.stem_channels)
        self.stage1 = Sequential(*[
            Bottleneck(rng, cfg.stem_channels if i == 0 else width, cfg.bottleneck_planes)
            for i in range(cfg.stage1_blocks)
        ])
        self.transition = ConvBN(rng, width, cfg.secondary_channels, 3)
        self.stages = [
            StreamStage(rng, dim, (cfg.secondary_heads,), cfg.stage_blocks, cfg.window_size, cfg.ffn_ratio)
            for _ in range(2)
        ]

    def forward(self, x: Tensor) -> list[Tensor]:
        """Features after stages 1, 2 and 3 (the inputs of the three fusion levels)."""
        y = self.transition(self.stage1(self.stem(x)))
        states = [y]
        for stage in self.stages:
            (y,) = stage([y])
            states.append(y)
        return states


class Neck(Module):
    _scope_name = "@neck"

    def __init__(self, rng, channels: Sequence[int], width: int):
        super().__init__()
        self.proj = ConvBN(rng, int(sum(channels)), width, 1)

    def forward(self, streams: Sequence[Tensor]) -> Tensor:
        if len(streams) != 4:
            raise ShapeError(f"neck expects 4 streams, got {len(streams)}")
        h, w = streams[0].shape[2], streams[0].shape[3]
        ups = [streams[0]] + [_crop(T.nearest_upsample(x, 2 ** s), h, w) for s, x in enumerate(streams[1:], 1)]
        return self.proj(T.concat(ups, axis=1))


class Fusion(Module):
    _scope_name = "@fusion"

    def __init__(self, rng, cfg: ModelConfig):
        super().__init__()
        self.levels = [FusionLevel(rng, cfg, streams) for streams in cfg.fused_streams]

    def forward(self, level: int, xs, ys):
        return self.levels[level](xs, ys)


class HRFuser(Module):
    """Backbone plus neck.  ``forward`` takes a dict of NCHW inputs keyed by modality."""

    _scope_name = "HRFuser"

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        if cfg.early_fusion:
            cin = sum(cfg.input_channels(m) for m in cfg.modalities)
        else:
            cin = cfg.input_channels(cfg.primary_modality)
        self.primary = PrimaryBranch(component_rng(cfg.seed, "primary"), cfg, cin)
        self.secondary = {m: SecondaryBranch(component_rng(cfg.seed, f"secondary:{m}"), cfg, m) for m in cfg.secondaries}
        self.fusion = Fusion(component_rng(cfg.seed, "fusion"), cfg) if cfg.secondaries else None
        self.neck = Neck(component_rng(cfg.seed, "neck"), cfg.channels, cfg.neck_channels)

    def _primary_input(self, inputs: Mapping[str, Tensor]) -> Tensor:
        cfg = self.cfg
        missing = [m for m in cfg.modalities if m not in inputs]
        if missing:
            raise ConfigError(f"missing inputs for modalities {missing}")
        if cfg.early_fusion:
            return early_fusion_input(inputs, cfg.modalities)
        return inputs[cfg.primary_modality]

    def forward_streams(self, inputs: Mapping[str, Tensor]) -> list[Tensor]:
        x = self._primary_input(inputs)
        secondary_states = {m: branch(inputs[m]) for m, branch in self.secondary.items()}
        streams = [self.primary(x)]
        for stage in (2, 3, 4):
            streams = self.primary.open_stage(stage, streams)
            if self.fusion is not None:
                ys = {m: states[stage - 2] for m, states in secondary_states.items()}
                streams = self.fusion(stage - 2, streams, ys)
            streams = self.primary.run_stage(stage, streams)
        return streams

    def forward(self, inputs: Mapping[str, Tensor]) -> Tensor:
        return self.neck(self.forward_streams(inputs))

    def num_mwca_blocks(self) -> int:
        return 0 if self.fusion is None else sum(len(level.blocks) for level in self.fusion.levels)


def early_fusion_input(inputs: Mapping[str, Tensor], modalities: Sequence[str]) -> Tensor:
    """Channel concatenation of all modality images, in configuration order."""
    return T.concat([inputs[m] for m in modalities], axis=1)


def build_model(cfg: ModelConfig) -> HRFuser:
    return HRFuser(cfg)


# -- accounting ------------------------------------------------------------------

def _component_of_param(name: str) -> str:
    head, _, rest = name.partition(".")
    if head == "secondary":
        return "secondary:" + rest.split(".", 1)[0]
    if head == "fusion":
        # fusion.levels.L.align.S.paths.<modality>... / fusion.levels.L.blocks.S.(attn|norm_y).<beta>...
        parts = rest.split(".")
        if parts[2] == "align":
            return "align:" + parts[5]
        if parts[4] in ("attn", "norm_y"):
            return f"fusion:modality{parts[5]}"
        return "fusion:shared"
    return head


def count_params(model: Module) -> dict[str, int]:
    """Exact trainable-parameter counts per component, plus ``total``."""
    table: dict[str, int] = {}
    for name, p in model.named_parameters():
        comp = _component_of_param(name)
        table[comp] = table.get(comp, 0) + p.size
    table["total"] = sum(table.values())
    return table


def _component_of_scope(path: str) -> str:
    for part in path.split("."):
        if part.startswith("@"):
            return part[1:]
    return "other"


def count_flops(model: HRFuser, height: int, width: int, batch: int = 1) -> dict[str, float]:
    """Forward flops per component (MACs x2 for conv/matmul, plus softmax and norm costs)."""
    cfg = model.cfg
    rng = np.random.default_rng(0)
    inputs = {m: Tensor(rng.normal(size=(batch, cfg.input_channels(m), height, width))) for m in cfg.modalities}
    table: dict[str, float] = {}

    def hook(kind, amount):
        comp = _component_of_scope(current_scope())
        table[comp] = table.get(comp, 0.0) + amount

    was_training = model.training
    model.eval()
    try:
        with T.no_grad(), T.flop_hook(hook):
            model(inputs)
    finally:
        model.train(was_training)
    table["total"] = sum(table.values())
    return table


# -- checkpoints -----------------------------------------------------------------

def sidecar_path(path) -> str:
    return os.fspath(path) + ".json"


def save_checkpoint(path, module: Module, model_cfg: ModelConfig, extra: dict | None = None) -> None:
    """Tensor file plus a JSON sidecar holding the model configuration."""
    T.save_tensors(path, module.state_dict())
    meta = {"model": model_cfg.to_dict(), **(extra or {})}
    with open(sidecar_path(path), "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)


def read_sidecar(path) -> dict:
    try:
        with open(sidecar_path(path), encoding="utf-8") as fh:
            meta = json.load(fh)
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot read checkpoint sidecar for {path}: {exc}") from exc
    model = dict(meta.get("model", {}))
    for key in ("channels", "heads", "modalities"):
        if key in model:
            model[key] = tuple(model[key])
    meta["model"] = ModelConfig(**model)
    return meta


def load_checkpoint(path, module: Module, model_cfg: ModelConfig | None = None) -> dict:
    """Load weights into ``module``; the sidecar config must match ``model_cfg`` when given."""
    meta = read_sidecar(path)
    if model_cfg is not None and meta["model"] != model_cfg:
        raise ConfigError(f"checkpoint {path} was trained with a different model configuration")
    try:
        module.load_state_dict(T.load_tensors(path))
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"checkpoint {path} does not fit the model: {exc}") from exc
    return meta
