"""Progressive generator and the shared-trunk three-headed discriminator.

The generator consumes ``z ⊕ e ⊕ y`` (uniform noise, mean word vector,
one-hot label). The discriminator trunk feeds three linear heads: an
unbounded critic score, label logits and a regressed text embedding.
Both networks grow one resolution block at a time; during a fade the new
block is mixed with the previous stage's path by ``alpha``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import NamedTuple

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

__all__ = [
    "GanConfig",
    "StageState",
    "ConditioningVector",
    "DiscriminatorOutputs",
    "Generator",
    "Discriminator",
    "ProgressiveGAN",
    "ModelError",
    "make_conditioning_vector",
    "sample_noise",
    "generator_forward",
    "discriminator_forward",
    "grow",
]


class ModelError(ValueError):
    pass


@dataclass
class GanConfig:
    num_labels: int  # K: sub-categories for O-GAN, main categories for the baseline
    d_z: int = 64
    d_e: int = 50
    base_channels: int = 128
    min_channels: int = 32
    max_resolution: int = 32
    channels: list | None = None  # explicit per-stage override
    use_ontology: bool = True
    gp_lambda: float = 10.0
    head_weights: tuple = (1.0, 1.0, 1.0)  # (adversarial, classification, regression)
    drift: float = 1e-3
    mbstd: bool = True
    init_seed: int = 0

    def __post_init__(self):
        self.head_weights = tuple(float(w) for w in self.head_weights)
        if self.channels is not None:
            self.channels = [int(c) for c in self.channels]
        r = self.max_resolution
        if r < 8 or r & (r - 1):
            raise ModelError(f"max_resolution must be a power of two >= 8, got {r}")
        for name in ("num_labels", "d_z", "d_e", "base_channels", "min_channels"):
            if getattr(self, name) <= 0:
                raise ModelError(f"{name} must be positive")
        if self.gp_lambda < 0 or self.drift < 0:
            raise ModelError("gp_lambda and drift must be non-negative")
        if len(self.head_weights) != 3 or min(self.head_weights) < 0:
            raise ModelError("head_weights must be three non-negative numbers")
        if self.channels is not None and len(self.channels) < self.num_stages:
            raise ModelError(f"channels needs {self.num_stages} entries")

    @property
    def num_stages(self) -> int:
        return int(math.log2(self.max_resolution)) - 1

    @property
    def cond_dim(self) -> int:
        return self.d_z + self.d_e + self.num_labels

    def stage_channels(self, s: int) -> int:
        if self.channels is not None:
            return self.channels[s]
        return max(self.min_channels, self.base_channels >> s)

    @staticmethod
    def resolution(s: int) -> int:
        return 4 * 2**s

    def to_dict(self) -> dict:
        d = asdict(self)
        d["head_weights"] = list(self.head_weights)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GanConfig":
        return cls(**d)


@dataclass
class StageState:
    stage: int = 0
    alpha: float = 1.0

    def __post_init__(self):
        if self.stage < 0:
            raise ModelError(f"stage must be >= 0, got {self.stage}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ModelError(f"alpha must lie in [0, 1], got {self.alpha}")

    @property
    def resolution(self) -> int:
        return 4 * 2**self.stage


@dataclass
class ConditioningVector:
    z: torch.Tensor
    e: torch.Tensor
    y: torch.Tensor
    concat: torch.Tensor = field(init=False)

    def __post_init__(self):
        self.concat = torch.cat([self.z, self.e, self.y], dim=-1)


class DiscriminatorOutputs(NamedTuple):
    critic: torch.Tensor  # (B,)
    label_logits: torch.Tensor  # (B, K)
    regressed_e: torch.Tensor  # (B, d_e)


def _as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x.float()
    return torch.as_tensor(np.asarray(x), dtype=torch.float32)


def make_conditioning_vector(z, e, y, config: GanConfig | None = None) -> ConditioningVector:
    """Concatenate noise, text embedding and one-hot label in that order.

    Accepts single vectors or batches (leading batch dimension).
    """
    z, e, y = _as_tensor(z), _as_tensor(e), _as_tensor(y)
    if not (z.dim() == e.dim() == y.dim()) or z.shape[:-1] != e.shape[:-1] or z.shape[:-1] != y.shape[:-1]:
        raise ModelError(f"batch shapes differ: z{tuple(z.shape)} e{tuple(e.shape)} y{tuple(y.shape)}")
    if config is not None:
        want = (config.d_z, config.d_e, config.num_labels)
        got = (z.shape[-1], e.shape[-1], y.shape[-1])
        if want != got:
            raise ModelError(f"dimension mismatch: expected (d_z, d_e, K)={want}, got {got}")
    ones = (y == 1.0).sum(dim=-1)
    zeros = (y == 0.0).sum(dim=-1)
    if not bool(((ones == 1) & (ones + zeros == y.shape[-1])).all()):
        raise ModelError("y must be one-hot")
    return ConditioningVector(z, e, y)


def sample_noise(d_z: int, batch: int, seed=None, generator: torch.Generator | None = None) -> torch.Tensor:
    """i.i.d. uniform noise on [-1, 1), shape (batch, d_z)."""
    if d_z <= 0:
        raise ModelError("d_z must be positive")
    if generator is None:
        generator = torch.Generator().manual_seed(int(seed or 0))
    return torch.rand(batch, d_z, generator=generator) * 2.0 - 1.0


# ---------------------------------------------------------------- layers

def _layer_generator(init_seed: int, *key: int) -> torch.Generator:
    s = np.random.SeedSequence([int(init_seed), *key]).generate_state(2, dtype=np.uint32)
    return torch.Generator().manual_seed(int(s[0]) << 31 ^ int(s[1]))


class EqualizedLinear(nn.Module):
    """Dense layer with runtime He scaling; weights stored at unit variance."""

    def __init__(self, fan_in, fan_out, gen, gain=math.sqrt(2), zero=False):
        super().__init__()
        w = torch.zeros(fan_out, fan_in) if zero else torch.randn(fan_out, fan_in, generator=gen)
        self.weight = nn.Parameter(w)
        self.bias = nn.Parameter(torch.zeros(fan_out))
        self.scale = gain / math.sqrt(fan_in)

    def forward(self, x):
        return F.linear(x, self.weight * self.scale, self.bias)


class EqualizedConv2d(nn.Module):
    def __init__(self, c_in, c_out, kernel, gen, gain=math.sqrt(2)):
        super().__init__()
        self.weight = nn.Parameter(torch.randn(c_out, c_in, kernel, kernel, generator=gen))
        self.bias = nn.Parameter(torch.zeros(c_out))
        self.scale = gain / math.sqrt(c_in * kernel * kernel)
        self.pad = kernel // 2

    def forward(self, x):
        return F.conv2d(x, self.weight * self.scale, self.bias, padding=self.pad)


def pixel_norm(x, eps=1e-8):
    return x * torch.rsqrt(x.pow(2).mean(dim=1, keepdim=True) + eps)


def minibatch_stddev(x):
    std = torch.sqrt(x.var(dim=0, unbiased=False) + 1e-8).mean()
    return torch.cat([x, std.expand(x.shape[0], 1, x.shape[2], x.shape[3])], dim=1)


def _lrelu(x):
    return F.leaky_relu(x, 0.2)


def upsample2(x):
    return F.interpolate(x, scale_factor=2, mode="nearest")


def downsample2(x):
    return F.avg_pool2d(x, 2)


class _GFirst(nn.Module):
    def __init__(self, cfg: GanConfig, gen):
        super().__init__()
        c = cfg.stage_channels(0)
        self.c = c
        self.dense = EqualizedLinear(cfg.cond_dim, c * 16, gen, gain=math.sqrt(2) / 4)
        self.conv = EqualizedConv2d(c, c, 3, gen)

    def forward(self, cond):
        h = pixel_norm(_lrelu(self.dense(cond)).view(-1, self.c, 4, 4))
        return pixel_norm(_lrelu(self.conv(h)))


class _GBlock(nn.Module):
    def __init__(self, c_in, c_out, gen):
        super().__init__()
        self.conv1 = EqualizedConv2d(c_in, c_out, 3, gen)
        self.conv2 = EqualizedConv2d(c_out, c_out, 3, gen)

    def forward(self, h):
        h = upsample2(h)
        h = pixel_norm(_lrelu(self.conv1(h)))
        return pixel_norm(_lrelu(self.conv2(h)))


class _DBlock(nn.Module):
    def __init__(self, c_in, c_out, gen):
        super().__init__()
        self.conv1 = EqualizedConv2d(c_in, c_in, 3, gen)
        self.conv2 = EqualizedConv2d(c_in, c_out, 3, gen)

    def forward(self, h):
        h = _lrelu(self.conv1(h))
        return downsample2(_lrelu(self.conv2(h)))


class _DFinal(nn.Module):
    def __init__(self, cfg: GanConfig, gen):
        super().__init__()
        c = cfg.stage_channels(0)
        self.mbstd = cfg.mbstd
        self.conv = EqualizedConv2d(c + int(cfg.mbstd), c, 3, gen)
        self.dense = EqualizedLinear(c * 16, c, gen)

    def forward(self, h):
        if self.mbstd:
            h = minibatch_stddev(h)
        h = _lrelu(self.conv(h))
        return _lrelu(self.dense(h.flatten(1)))


# ---------------------------------------------------------------- networks

class Generator(nn.Module):
    def __init__(self, cfg: GanConfig):
        super().__init__()
        self.cfg = cfg
        gen = _layer_generator(cfg.init_seed, 0, 0)
        self.blocks = nn.ModuleList([_GFirst(cfg, gen)])
        self.to_rgb = nn.ModuleList([EqualizedConv2d(cfg.stage_channels(0), 3, 1, gen, gain=1.0)])

    @property
    def built_stage(self) -> int:
        return len(self.blocks) - 1

    def grow(self):
        s = len(self.blocks)
        if s >= self.cfg.num_stages:
            raise ModelError(f"cannot grow past {self.cfg.max_resolution}x{self.cfg.max_resolution}")
        gen = _layer_generator(self.cfg.init_seed, 0, s)
        c_in, c_out = self.cfg.stage_channels(s - 1), self.cfg.stage_channels(s)
        self.blocks.append(_GBlock(c_in, c_out, gen))
        self.to_rgb.append(EqualizedConv2d(c_out, 3, 1, gen, gain=1.0))

    def forward(self, cond: torch.Tensor, stage: StageState) -> torch.Tensor:
        s = stage.stage
        if s > self.built_stage:
            raise ModelError(f"stage {s} not built (built up to {self.built_stage})")
        if cond.shape[-1] != self.cfg.cond_dim:
            raise ModelError(f"conditioning length {cond.shape[-1]} != {self.cfg.cond_dim}")
        h = self.blocks[0](cond)
        prev = None
        for i in range(1, s + 1):
            prev = h
            h = self.blocks[i](h)
        out = torch.tanh(self.to_rgb[s](h))
        if s > 0 and stage.alpha < 1.0:
            old = upsample2(torch.tanh(self.to_rgb[s - 1](prev)))
            out = stage.alpha * out + (1.0 - stage.alpha) * old
        return out


class Discriminator(nn.Module):
    """Shared trunk with critic, label (L) and regression (R) heads."""

    def __init__(self, cfg: GanConfig):
        super().__init__()
        self.cfg = cfg
        gen = _layer_generator(cfg.init_seed, 1, 0)
        c0 = cfg.stage_channels(0)
        self.from_rgb = nn.ModuleList([EqualizedConv2d(3, c0, 1, gen)])
        self.blocks = nn.ModuleList([_DFinal(cfg, gen)])
        self.critic_head = EqualizedLinear(c0, 1, gen, gain=1.0, zero=True)
        self.label_head = EqualizedLinear(c0, cfg.num_labels, gen, gain=1.0, zero=True)
        self.regress_head = EqualizedLinear(c0, cfg.d_e, gen, gain=1.0, zero=True)

    @property
    def built_stage(self) -> int:
        return len(self.blocks) - 1

    def grow(self):
        s = len(self.blocks)
        if s >= self.cfg.num_stages:
            raise ModelError(f"cannot grow past {self.cfg.max_resolution}x{self.cfg.max_resolution}")
        gen = _layer_generator(self.cfg.init_seed, 1, s)
        c_hi, c_lo = self.cfg.stage_channels(s), self.cfg.stage_channels(s - 1)
        self.from_rgb.append(EqualizedConv2d(3, c_hi, 1, gen))
        self.blocks.append(_DBlock(c_hi, c_lo, gen))

    def head_parameters(self):
        return {
            "critic": list(self.critic_head.parameters()),
            "label": list(self.label_head.parameters()),
            "regress": list(self.regress_head.parameters()),
        }

    def features(self, x: torch.Tensor, stage: StageState) -> torch.Tensor:
        s = stage.stage
        if s > self.built_stage:
            raise ModelError(f"stage {s} not built (built up to {self.built_stage})")
        if x.shape[-1] != stage.resolution or x.shape[-2] != stage.resolution:
            raise ModelError(
                f"image resolution {tuple(x.shape[-2:])} does not match stage resolution "
                f"{stage.resolution}"
            )
        h = _lrelu(self.from_rgb[s](x))
        if s > 0:
            h = self.blocks[s](h)
            if stage.alpha < 1.0:
                old = _lrelu(self.from_rgb[s - 1](downsample2(x)))
                h = stage.alpha * h + (1.0 - stage.alpha) * old
            for i in range(s - 1, 0, -1):
                h = self.blocks[i](h)
        return self.blocks[0](h)

    def forward(self, x: torch.Tensor, stage: StageState) -> DiscriminatorOutputs:
        f = self.features(x, stage)
        return DiscriminatorOutputs(
            self.critic_head(f).squeeze(-1), self.label_head(f), self.regress_head(f)
        )


class ProgressiveGAN(nn.Module):
    """Generator/discriminator pair plus the current stage and fade coefficient."""

    def __init__(self, cfg: GanConfig):
        super().__init__()
        self.cfg = cfg
        self.G = Generator(cfg)
        self.D = Discriminator(cfg)
        self.stage = StageState(0, 1.0)

    def grow_to(self, stage: int):
        while self.G.built_stage < stage:
            grow(self, self.G.built_stage + 1)


def generator_forward(G: Generator, cond, stage: StageState) -> torch.Tensor:
    if isinstance(cond, ConditioningVector):
        cond = cond.concat
    return G(cond, stage)


def discriminator_forward(D: Discriminator, images: torch.Tensor, stage: StageState) -> DiscriminatorOutputs:
    return D(images, stage)


def grow(model: ProgressiveGAN, next_stage: int) -> ProgressiveGAN:
    """Add the next resolution block to both networks; fade restarts at alpha = 0."""
    current = model.G.built_stage
    if next_stage != current + 1:
        raise ModelError(f"can only grow from stage {current} to {current + 1}, not {next_stage}")
    if next_stage >= model.cfg.num_stages:
        raise ModelError(
            f"cannot grow past {model.cfg.max_resolution}x{model.cfg.max_resolution}"
        )
    model.G.grow()
    model.D.grow()
    model.stage = StageState(next_stage, 0.0)
    return model
