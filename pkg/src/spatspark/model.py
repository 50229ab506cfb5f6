"""Sparse hierarchical encoder-decoder with a latent translation network.

Frames enter as channels of a 2-D network (``[N, T, H, W]``). The encoder is
a ResNet-style pyramid whose convolutions are dense but whose normalization
statistics and outputs are restricted to visible positions, so every feature
map stays exactly zero under hidden patches. Densify fills those holes with a
learnable per-level embedding before the light UNet-style decoder runs.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Dict, Iterator, List, Optional, Sequence

import numpy as np

from . import masking
from .masking import LEVEL_FACTORS, TubeMask
from .numcore import (ContractError, DimensionError, Param, RunningStats,
                      Tensor, add, as_tensor, batchnorm_masked, conv2d,
                      maxpool2x2, relu, reshape, tanh_act, transposed_conv2d,
                      where)

PRESETS = {
    "resnet18-like": dict(stem_channels=64, stage_channels=(64, 128, 256, 512), blocks_per_stage=(2, 2, 2, 2)),
    "nano": dict(stem_channels=8, stage_channels=(8, 16, 32, 64), blocks_per_stage=(1, 1, 1, 1)),
}


@dataclass(frozen=True)
class ModelConfig:
    frames: int = 12
    height: int = 128
    width: int = 128
    preset: str = "nano"
    stem_channels: int = 8
    stage_channels: tuple = (8, 16, 32, 64)
    blocks_per_stage: tuple = (1, 1, 1, 1)
    patch_size: int = 32
    translation: bool = True
    densify_mode: str = "fill"  # "fill" replaces hidden cells, "add" adds [M] everywhere

    @classmethod
    def from_preset(cls, preset: str, frames: int, height: int, width: int, **overrides) -> "ModelConfig":
        if preset not in PRESETS:
            raise ContractError(f"unknown model preset {preset!r}; choose from {sorted(PRESETS)}")
        return cls(frames=frames, height=height, width=width, preset=preset,
                   **{**PRESETS[preset], **overrides})

    def validate(self) -> None:
        if self.height % 32 or self.width % 32:
            raise ContractError(f"H, W must be divisible by 32; got {self.height}x{self.width}")
        if len(self.stage_channels) != 4 or len(self.blocks_per_stage) != 4:
            raise ContractError("encoder needs exactly 4 stages")
        if min(self.blocks_per_stage) < 1 or min(self.stage_channels) < 1 or self.frames < 1:
            raise ContractError("stage depths, widths and frame count must be positive")
        if self.densify_mode not in ("fill", "add"):
            raise ContractError(f"densify_mode must be 'fill' or 'add', got {self.densify_mode!r}")
        masking.PatchGrid.for_image(self.height, self.width, self.patch_size)

    def canonical(self) -> str:
        """Stable text form, used for fingerprinting checkpoints."""
        return "\n".join([
            f"frames = {self.frames}",
            f"height = {self.height}",
            f"width = {self.width}",
            f"stem_channels = {self.stem_channels}",
            f"stage_channels = {','.join(map(str, self.stage_channels))}",
            f"blocks_per_stage = {','.join(map(str, self.blocks_per_stage))}",
            f"patch_size = {self.patch_size}",
            f"translation = {int(self.translation)}",
            f"densify_mode = {self.densify_mode}",
        ])


@dataclass
class FeaturePyramid:
    """Four feature maps at H/4 .. H/32, tagged with their role in the pipeline."""

    levels: List[Tensor]
    role: str  # sparse | dense | decoded | past | future
    active: Optional[Dict[int, np.ndarray]] = field(default=None, repr=False)

    def shapes(self) -> list:
        return [lvl.data.shape for lvl in self.levels]


# ---------------------------------------------------------------------------
# layers


class Layer:
    def params(self) -> Iterator[Param]:
        for value in vars(self).values():
            if isinstance(value, Param):
                yield value
            elif isinstance(value, Layer):
                yield from value.params()
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Layer):
                        yield from item.params()

    def norms(self) -> Iterator["BatchNorm"]:
        for value in vars(self).values():
            if isinstance(value, BatchNorm):
                yield value
            elif isinstance(value, Layer):
                yield from value.norms()
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Layer):
                        yield from item.norms()


def he_normal(rng: np.random.Generator, shape: tuple, fan_in: float) -> np.ndarray:
    return rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)


def truncated_normal(rng: np.random.Generator, shape: tuple, std: float, bound: float = 2.0) -> np.ndarray:
    out = rng.standard_normal(shape)
    bad = np.abs(out) > bound
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > bound
    return out * std


class Conv(Layer):
    def __init__(self, name, rng, c_in, c_out, k, stride=1, padding=0, bias=True):
        self.weight = Param(he_normal(rng, (c_out, c_in, k, k), c_in * k * k), f"{name}.weight")
        self.bias = Param(np.zeros(c_out), f"{name}.bias") if bias else None
        self.stride, self.padding = stride, padding

    def __call__(self, x):
        return conv2d(x, self.weight, self.bias, self.stride, self.padding)


class TransposedConv(Layer):
    def __init__(self, name, rng, c_in, c_out, k=4, stride=2, padding=1, bias=True):
        fan_in = c_in * k * k / (stride * stride)
        self.weight = Param(he_normal(rng, (c_in, c_out, k, k), fan_in), f"{name}.weight")
        self.bias = Param(np.zeros(c_out), f"{name}.bias") if bias else None
        self.stride, self.padding = stride, padding

    def __call__(self, x):
        return transposed_conv2d(x, self.weight, self.bias, self.stride, self.padding)


class BatchNorm(Layer):
    def __init__(self, name, channels, eps=1e-5, momentum=0.1):
        self.name = name
        self.gamma = Param(np.ones(channels), f"{name}.gamma")
        self.beta = Param(np.zeros(channels), f"{name}.beta")
        self.stats = RunningStats(channels, momentum)
        self.eps = eps

    def __call__(self, x, active=None, mode="train"):
        if active is not None and mode == "train" and not active.any():
            # nothing visible at this level: the sparse output is identically zero
            return where(np.zeros((1, 1, 1, 1), dtype=bool), x, 0.0)
        return batchnorm_masked(x, active, self.gamma, self.beta, self.eps, self.stats, mode)


# ---------------------------------------------------------------------------
# encoder


class BasicBlock(Layer):
    """conv3x3-BN-ReLU-conv3x3-BN plus identity or projection skip, then ReLU."""

    def __init__(self, name, rng, c_in, c_out, stride):
        self.conv1 = Conv(f"{name}.conv1", rng, c_in, c_out, 3, stride, 1, bias=False)
        self.bn1 = BatchNorm(f"{name}.bn1", c_out)
        self.conv2 = Conv(f"{name}.conv2", rng, c_out, c_out, 3, 1, 1, bias=False)
        self.bn2 = BatchNorm(f"{name}.bn2", c_out)
        if stride != 1 or c_in != c_out:
            self.proj = Conv(f"{name}.proj", rng, c_in, c_out, 1, stride, 0, bias=False)
            self.proj_bn = BatchNorm(f"{name}.proj_bn", c_out)
        else:
            self.proj = self.proj_bn = None

    def __call__(self, x, active, mode):
        out = relu(self.bn1(self.conv1(x), active, mode))
        out = self.bn2(self.conv2(out), active, mode)
        skip = x if self.proj is None else self.proj_bn(self.proj(x), active, mode)
        return relu(add(out, skip))


class Encoder(Layer):
    def __init__(self, cfg: ModelConfig, rng):
        self.stem = Conv("encoder.stem.conv", rng, cfg.frames, cfg.stem_channels, 3, 2, 1, bias=False)
        self.stem_bn = BatchNorm("encoder.stem.bn", cfg.stem_channels)
        self.stages: List[List[BasicBlock]] = []
        c_prev = cfg.stem_channels
        for i, (c, n) in enumerate(zip(cfg.stage_channels, cfg.blocks_per_stage), start=1):
            blocks = []
            for b in range(n):
                stride = 2 if (b == 0 and i > 1) else 1
                blocks.append(BasicBlock(f"encoder.stage{i}.block{b}", rng, c_prev, c, stride))
                c_prev = c
            self.stages.append(blocks)

    def params(self):
        yield from self.stem.params()
        yield from self.stem_bn.params()
        for blocks in self.stages:
            for blk in blocks:
                yield from blk.params()

    def norms(self):
        yield self.stem_bn
        for blocks in self.stages:
            for blk in blocks:
                yield from blk.norms()

    def __call__(self, x, actives: Optional[Dict[int, np.ndarray]], mode: str) -> List[Tensor]:
        get = (lambda f: None) if actives is None else actives.__getitem__
        h = relu(self.stem_bn(self.stem(x), get(2), mode))
        h = maxpool2x2(h)
        if actives is not None:
            h = where(actives[4][:, None], h, 0.0)
        feats = []
        for factor, blocks in zip(LEVEL_FACTORS, self.stages):
            for blk in blocks:
                h = blk(h, get(factor), mode)
            feats.append(h)
        return feats


# ---------------------------------------------------------------------------
# decoder


class UpBlock(Layer):
    """x2 transposed-conv upsample, conv3x3, BN, ReLU."""

    def __init__(self, name, rng, c_in, c_out):
        self.up = TransposedConv(f"{name}.up", rng, c_in, c_out, 4, 2, 1)
        self.conv = Conv(f"{name}.conv", rng, c_out, c_out, 3, 1, 1, bias=False)
        self.bn = BatchNorm(f"{name}.bn", c_out)

    def __call__(self, x, mode):
        return relu(self.bn(self.conv(self.up(x)), None, mode))


class Projection(Layer):
    """Normalization followed by a 1x1 convolution (phi_i)."""

    def __init__(self, name, rng, c_in, c_out):
        self.bn = BatchNorm(f"{name}.bn", c_in)
        self.conv = Conv(f"{name}.conv", rng, c_in, c_out, 1)

    def __call__(self, x, mode):
        return self.conv(self.bn(x, None, mode))


class Decoder(Layer):
    def __init__(self, cfg: ModelConfig, rng):
        d = cfg.stage_channels  # decoder widths mirror the encoder stages
        self.widths = tuple(d)
        self.phi = [Projection(f"decoder.phi{i + 1}", rng, cfg.stage_channels[i], d[i]) for i in range(4)]
        self.blocks = [UpBlock(f"decoder.block{i + 1}", rng, d[i + 1], d[i]) for i in range(3)]
        self.head_up = [UpBlock(f"decoder.head_up{j}", rng, d[0], d[0]) for j in range(2)]
        self.head = Conv("decoder.head", rng, d[0], cfg.frames, 1)

    def recurrence(self, levels: Sequence[Tensor], mode: str) -> List[Tensor]:
        """Return [D1, D2, D3, D4] with D4 = phi4(S4') and Di = Bi(Di+1) + phi_i(Si')."""
        decoded = [None] * 4
        decoded[3] = self.phi[3](levels[3], mode)
        for i in (2, 1, 0):
            decoded[i] = add(self.blocks[i](decoded[i + 1], mode), self.phi[i](levels[i], mode))
        return decoded

    def project(self, d1: Tensor, mode: str) -> Tensor:
        h = d1
        for up in self.head_up:
            h = up(h, mode)
        return self.head(h)


class Translation(Layer):
    """theta_i = tanh(conv3x3(.)) per level."""

    def __init__(self, cfg: ModelConfig, rng):
        self.theta = [Conv(f"translation.theta{i + 1}", rng, c, c, 3, 1, 1)
                      for i, c in enumerate(cfg.stage_channels)]

    def __call__(self, levels: Sequence[Tensor]) -> List[Tensor]:
        return [tanh_act(theta(s)) for theta, s in zip(self.theta, levels)]


# ---------------------------------------------------------------------------
# full network


def batch_active_maps(masks: Sequence[TubeMask], h: int, w: int) -> Dict[int, np.ndarray]:
    """Stack per-sample visibility for factors 1, 2, 4, 8, 16, 32 into [N, h/f, w/f]."""
    return {f: np.stack([masking.active_at(m, h, w, f) for m in masks])
            for f in (1, 2) + LEVEL_FACTORS}


class SpatSpark(Layer):
    def __init__(self, cfg: ModelConfig, seed: int):
        cfg.validate()
        self.config = cfg
        rng = np.random.default_rng(seed)
        self.encoder = Encoder(cfg, rng)
        self.mask_embed = [Param(truncated_normal(rng, (c,), 0.02), f"densify.mask_embed{i + 1}")
                           for i, c in enumerate(cfg.stage_channels)]
        self.decoder = Decoder(cfg, rng)
        self.translation = Translation(cfg, rng) if cfg.translation else None

    # -- parameter bookkeeping

    def params(self) -> Iterator[Param]:
        yield from self.encoder.params()
        yield from self.mask_embed
        yield from self.decoder.params()
        if self.translation is not None:
            yield from self.translation.params()

    def named_params(self) -> Dict[str, Param]:
        return {p.name: p for p in self.params()}

    def norms(self) -> Iterator[BatchNorm]:
        yield from self.encoder.norms()
        yield from self.decoder.norms()

    def buffers(self) -> Dict[str, np.ndarray]:
        out = {}
        for bn in self.norms():
            out[f"{bn.name}.running_mean"] = bn.stats.mean
            out[f"{bn.name}.running_var"] = bn.stats.var
        return out

    def set_buffer(self, name: str, value: np.ndarray) -> None:
        base, kind = name.rsplit(".", 1)
        for bn in self.norms():
            if bn.name == base:
                if kind == "running_mean":
                    bn.stats.mean = value.copy()
                elif kind == "running_var":
                    bn.stats.var = value.copy()
                else:
                    break
                return
        raise KeyError(name)

    def zero_grad(self) -> None:
        for p in self.params():
            p.zero_grad()

    # -- stages

    def _check_input(self, seq) -> np.ndarray:
        arr = np.asarray(seq.data if isinstance(seq, Tensor) else seq, dtype=np.float64)
        if arr.ndim == 3:
            arr = arr[None]
        cfg = self.config
        if arr.ndim != 4 or arr.shape[1] != cfg.frames:
            raise DimensionError(f"expected [N,{cfg.frames},H,W] input, got {arr.shape}")
        if arr.shape[2] % 32 or arr.shape[3] % 32:
            raise ContractError(f"resolution {arr.shape[2]}x{arr.shape[3]} not divisible by 32")
        return arr

    def encode(self, masked_seq, masks: Optional[Sequence[TubeMask]], mode: str = "train",
               sparse: bool = True) -> FeaturePyramid:
        """Sparse feature pyramid S1..S4 of (already masked) input frames.

        ``sparse=False`` runs the same weights densely (no visibility maps).
        """
        x = self._check_input(masked_seq)
        n, _, h, w = x.shape
        if sparse:
            if masks is None:
                masks = [masking.full_visible_mask(h, w, self.config.patch_size)] * n
            if len(masks) != n:
                raise DimensionError(f"{len(masks)} masks for a batch of {n}")
            actives = batch_active_maps(masks, h, w)
            x = np.where(actives[1][:, None], x, 0.0)
        else:
            actives = None
        levels = self.encoder(Tensor(x), actives, mode)
        return FeaturePyramid(levels, "sparse", actives)

    def densify(self, pyr: FeaturePyramid) -> FeaturePyramid:
        """S'_i = S_i at visible cells and [M_i] at hidden cells."""
        if pyr.role not in ("sparse", "future"):
            raise ContractError(f"densify expects a sparse or translated pyramid, got role {pyr.role!r}")
        out = []
        for i, (s, emb) in enumerate(zip(pyr.levels, self.mask_embed)):
            m = reshape(emb, (1, -1, 1, 1))
            if self.config.densify_mode == "add":
                out.append(add(s, m))
            elif pyr.active is None:
                out.append(s)
            else:
                out.append(where(pyr.active[LEVEL_FACTORS[i]][:, None], s, m))
        return FeaturePyramid(out, "dense", pyr.active)

    def translate(self, pyr: FeaturePyramid) -> FeaturePyramid:
        if self.translation is None:
            return FeaturePyramid(list(pyr.levels), "future", pyr.active)
        return FeaturePyramid(self.translation(pyr.levels), "future", pyr.active)

    def decode(self, pyr: FeaturePyramid, mode: str = "train") -> Tensor:
        if pyr.role != "dense":
            raise ContractError(f"decode expects a dense pyramid, got role {pyr.role!r}")
        self._check_pyramid(pyr)
        decoded = self.decoder.recurrence(pyr.levels, mode)
        return self.decoder.project(decoded[0], mode)

    def _check_pyramid(self, pyr: FeaturePyramid) -> None:
        if len(pyr.levels) != 4:
            raise DimensionError(f"pyramid needs 4 levels, got {len(pyr.levels)}")
        n, _, h4, w4 = pyr.levels[0].data.shape
        for i, (lvl, c) in enumerate(zip(pyr.levels, self.config.stage_channels)):
            expect = (n, c, h4 >> i, w4 >> i)
            if lvl.data.shape != expect:
                raise DimensionError(f"pyramid level {i + 1} has shape {lvl.data.shape}, expected {expect}")

    # -- compositions

    def forward_pretrain(self, seq, masks: Sequence[TubeMask], mode: str = "train") -> Tensor:
        """DEC(Densify(ENC(masked X))); the translation network is not used."""
        x = self._check_input(seq)
        masked = np.stack([masking.apply_mask(xi, m) for xi, m in zip(x, masks)])
        return self.decode(self.densify(self.encode(masked, masks, mode)), mode)

    def forward_finetune(self, past_seq, masks: Optional[Sequence[TubeMask]] = None,
                         inference: bool = False) -> Tensor:
        """DEC(Densify(Translate(ENC(masked past)))); inference forces ratio 0 and eval-mode BN."""
        x = self._check_input(past_seq)
        n, _, h, w = x.shape
        if inference or masks is None:
            masks = [masking.full_visible_mask(h, w, self.config.patch_size)] * n
        mode = "eval" if inference else "train"
        masked = np.stack([masking.apply_mask(xi, m) for xi, m in zip(x, masks)])
        return self.decode(self.densify(self.translate(self.encode(masked, masks, mode))), mode)


def init_model(config: ModelConfig, seed: int) -> SpatSpark:
    return SpatSpark(config, seed)


def param_group(name: str) -> str:
    """Which sub-network a parameter belongs to."""
    head = name.split(".", 1)[0]
    return {"encoder": "encoder", "densify": "densify", "decoder": "decoder",
            "translation": "translation"}[head]


def with_translation(config: ModelConfig, enabled: bool) -> ModelConfig:
    return replace(config, translation=enabled)
