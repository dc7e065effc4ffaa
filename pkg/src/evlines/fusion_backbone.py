"""Frame-event feature fusion backbone.

A two-branch shallow stem with channel-attention fusion blocks, followed by a
stack of dual hourglass encoder-decoders whose per-level fusion blocks are
small transformers (lightweight multi-head self-attention plus an
inverted-residual feed-forward network). Tensors are NCHW.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, ShapeError

INPUT_MODES = ("fused", "frame", "event", "concat")


@dataclass
class BackboneConfig:
    input_size: int = 512
    image_channels: int = 3
    event_channels: int = 10
    num_dual_hourglass: int = 2
    encoder_depth: int = 5
    feature_channels: int = 256
    mhsa_heads: int = 4
    mhsa_reduction: int = 2
    head_dim: Optional[int] = None
    ca_reduction: int = 4
    ffn_expansion: int = 4
    use_sfb: bool = True
    use_dfb: bool = True
    input_mode: str = "fused"

    def __post_init__(self):
        if self.input_mode not in INPUT_MODES:
            raise ConfigError(f"input_mode must be one of {INPUT_MODES}")
        if self.input_size % 4:
            raise ConfigError("input_size must be divisible by 4")
        if self.feature_size % (2 ** self.encoder_depth):
            raise ConfigError(f"feature size {self.feature_size} not divisible by 2^{self.encoder_depth}")
        if self.feature_channels % 4:
            raise ConfigError("feature_channels must be divisible by 4")
        if self.head_dim is None:
            self.head_dim = self.feature_channels // self.mhsa_heads
        if self.head_dim * self.mhsa_heads != self.feature_channels:
            raise ConfigError("mhsa_heads * head_dim must equal feature_channels")
        bottleneck = self.feature_size // 2 ** self.encoder_depth
        if self.use_dfb and bottleneck % self.mhsa_reduction:
            raise ConfigError(f"bottleneck size {bottleneck} not divisible by the attention reduction "
                              f"{self.mhsa_reduction}")

    @property
    def feature_size(self) -> int:
        return self.input_size // 4

    @classmethod
    def toy(cls, **overrides) -> "BackboneConfig":
        base = dict(input_size=64, feature_channels=32, encoder_depth=3, num_dual_hourglass=1)
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        return asdict(self)


def init_weights(module: nn.Module) -> None:
    """He-uniform convolutions and linears with zero biases."""
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            nn.init.kaiming_uniform_(m.weight, nonlinearity="relu")
            if m.bias is not None:
                nn.init.zeros_(m.bias)


class ConvBNReLU(nn.Sequential):
    def __init__(self, cin, cout, kernel, stride=1):
        super().__init__(nn.Conv2d(cin, cout, kernel, stride, kernel // 2, bias=False),
                         nn.BatchNorm2d(cout), nn.ReLU(inplace=True))


class ResidualBlock(nn.Module):
    """Bottleneck residual block (1x1 -> 3x3 -> 1x1) with a projection skip when widths differ."""

    def __init__(self, cin: int, cout: int):
        super().__init__()
        mid = max(cout // 2, 1)
        self.body = nn.Sequential(
            nn.Conv2d(cin, mid, 1, bias=False), nn.BatchNorm2d(mid), nn.ReLU(inplace=True),
            nn.Conv2d(mid, mid, 3, padding=1, bias=False), nn.BatchNorm2d(mid), nn.ReLU(inplace=True),
            nn.Conv2d(mid, cout, 1, bias=False), nn.BatchNorm2d(cout),
        )
        self.skip = nn.Identity() if cin == cout else nn.Sequential(nn.Conv2d(cin, cout, 1, bias=False),
                                                                     nn.BatchNorm2d(cout))

    def forward(self, x):
        return F.relu(self.body(x) + self.skip(x))


class ChannelAttention(nn.Module):
    """Squeeze-excite gate: one weight in [0, 1] per channel."""

    def __init__(self, channels: int, reduction: int = 4):
        super().__init__()
        hidden = max(channels // reduction, 1)
        self.gate = nn.Sequential(nn.AdaptiveAvgPool2d(1), nn.Conv2d(channels, hidden, 1), nn.ReLU(inplace=True),
                                  nn.Conv2d(hidden, channels, 1), nn.Sigmoid())

    def forward(self, x):
        return self.gate(x)


class ShallowFusionBlock(nn.Module):
    """Cross-modal fusion: each branch receives the other gated by channel attention.

    ``attn_f`` / ``attn_e`` override the computed attention, e.g. zeros to
    cut one direction of exchange.
    """

    def __init__(self, channels: int, reduction: int = 4):
        super().__init__()
        self.mix = nn.Conv2d(2 * channels, channels, 1)
        self.ca_f = ChannelAttention(channels, reduction)
        self.ca_e = ChannelAttention(channels, reduction)
        self.res_f = ResidualBlock(channels, channels)
        self.res_e = ResidualBlock(channels, channels)

    def forward(self, xf, xe, attn_f=None, attn_e=None):
        if xf.shape != xe.shape:
            raise ShapeError(f"branch shapes differ: {tuple(xf.shape)} vs {tuple(xe.shape)}")
        x = self.mix(torch.cat([xf, xe], dim=1))
        attn_f = self.ca_f(x) if attn_f is None else attn_f
        attn_e = self.ca_e(x) if attn_e is None else attn_e
        return self.res_f(xf + xe * attn_e), self.res_e(xe + xf * attn_f)


class LayerNorm2d(nn.LayerNorm):
    """LayerNorm over the channel axis of an NCHW tensor."""

    def forward(self, x):
        return super().forward(x.permute(0, 2, 3, 1)).permute(0, 3, 1, 2)


class LightweightMHSA(nn.Module):
    """Multi-head self-attention with keys/values on a k-times reduced grid.

    Keys get a learnable position encoding of the reduced grid's size, and
    logits are divided by the head dimension. With ``reduction == 1`` no
    reduction convolution is applied.
    """

    def __init__(self, channels: int, spatial: tuple[int, int], heads: int = 4, reduction: int = 2,
                 head_dim: Optional[int] = None):
        super().__init__()
        head_dim = channels // heads if head_dim is None else head_dim
        if head_dim * heads != channels:
            raise ConfigError("heads * head_dim must equal channels")
        h, w = spatial
        if h % reduction or w % reduction:
            raise ConfigError(f"spatial size {spatial} not divisible by reduction {reduction}")
        self.heads, self.head_dim, self.reduction = heads, head_dim, reduction
        self.spatial = (h, w)
        self.reduce = nn.Conv2d(channels, channels, reduction, stride=reduction) if reduction > 1 else None
        self.q = nn.Conv2d(channels, channels, 1)
        self.k = nn.Conv2d(channels, channels, 1)
        self.v = nn.Conv2d(channels, channels, 1)
        self.rpe = nn.Parameter(torch.zeros(1, channels, h // reduction, w // reduction))

    def _split(self, t):
        b, c, h, w = t.shape
        return t.reshape(b, self.heads, self.head_dim, h * w).transpose(-1, -2)

    def forward(self, x, return_attention: bool = False):
        b, c, h, w = x.shape
        if (h, w) != self.spatial:
            raise ShapeError(f"attention built for {self.spatial}, got {(h, w)}")
        xr = x if self.reduce is None else self.reduce(x)
        q = self._split(self.q(x))
        k = self._split(self.k(xr) + self.rpe)
        v = self._split(self.v(xr))
        if return_attention:
            attn = torch.softmax(q @ k.transpose(-1, -2) / self.head_dim, dim=-1)
            y = attn @ v
        else:
            attn = None
            y = F.scaled_dot_product_attention(q, k, v, scale=1.0 / self.head_dim)
        y = y.transpose(-1, -2).reshape(b, c, h, w)
        return (y, attn) if return_attention else y


class IRFFN(nn.Module):
    """Inverted-residual feed-forward: expand, depthwise 3x3 with a shortcut, project."""

    def __init__(self, channels: int, expansion: int = 4):
        super().__init__()
        hidden = channels * expansion
        self.expand = nn.Sequential(nn.Conv2d(channels, hidden, 1), nn.GELU(), nn.BatchNorm2d(hidden))
        self.dw = nn.Sequential(nn.Conv2d(hidden, hidden, 3, padding=1, groups=hidden), nn.GELU(),
                                nn.BatchNorm2d(hidden))
        self.project = nn.Conv2d(hidden, channels, 1)

    def forward(self, x):
        x = self.expand(x)
        return self.project(self.dw(x) + x)


class DecoderFusionBlock(nn.Module):
    """Concat + 1x1 fusion, then a pre-norm transformer layer with zero-initialized branch scales."""

    def __init__(self, channels: int, spatial: tuple[int, int], heads: int = 4, reduction: int = 2,
                 head_dim: Optional[int] = None, expansion: int = 4):
        super().__init__()
        self.mix = nn.Conv2d(2 * channels, channels, 1)
        self.norm1 = LayerNorm2d(channels)
        self.attn = LightweightMHSA(channels, spatial, heads, reduction, head_dim)
        self.norm2 = LayerNorm2d(channels)
        self.ffn = IRFFN(channels, expansion)
        self.gamma_attn = nn.Parameter(torch.zeros(1, channels, 1, 1))
        self.gamma_ffn = nn.Parameter(torch.zeros(1, channels, 1, 1))

    def forward(self, xf, xe):
        x = self.mix(torch.cat([xf, xe], dim=1))
        x = x + self.gamma_attn * self.attn(self.norm1(x))
        return x + self.gamma_ffn * self.ffn(self.norm2(x))


class AddFusion(nn.Module):
    def forward(self, xf, xe):
        return xf + xe


class EncoderDecoder(nn.Module):
    """Two encoder pyramids fused per level, decoded by one shared decoder.

    Level ``l`` runs at ``size / 2**l`` for ``l = 0..depth``; level ``depth``
    is the bottleneck. The decoder upsamples by 2 and adds the fused skip of
    the matching level.
    """

    def __init__(self, channels: int, depth: int, size: int, use_dfb: bool = True, heads: int = 4,
                 reduction: int = 2, head_dim: Optional[int] = None, expansion: int = 4):
        super().__init__()
        if size % (2 ** depth):
            raise ConfigError(f"size {size} not divisible by 2^{depth}")
        self.depth = depth
        self.enc_f = nn.ModuleList(ResidualBlock(channels, channels) for _ in range(depth + 1))
        self.enc_e = nn.ModuleList(ResidualBlock(channels, channels) for _ in range(depth + 1))
        fusions = []
        for level in range(depth + 1):
            s = size // 2 ** level
            if use_dfb:
                r = reduction if s % reduction == 0 and s >= reduction else 1
                fusions.append(DecoderFusionBlock(channels, (s, s), heads, r, head_dim, expansion))
            else:
                fusions.append(AddFusion())
        self.fuse = nn.ModuleList(fusions)
        self.dec = nn.ModuleList(ResidualBlock(channels, channels) for _ in range(depth))

    def forward(self, xf, xe, trace: Optional[list] = None):
        if xf.shape != xe.shape:
            raise ShapeError("branch shapes differ")
        skips = []
        f, e = xf, xe
        for level in range(self.depth + 1):
            if level:
                f, e = F.max_pool2d(f, 2), F.max_pool2d(e, 2)
            f, e = self.enc_f[level](f), self.enc_e[level](e)
            skips.append(self.fuse[level](f, e))
            if trace is not None:
                trace.append(tuple(f.shape[-2:]))
        y = skips[-1]
        for level in reversed(range(self.depth)):
            y = self.dec[level](F.interpolate(y, scale_factor=2, mode="nearest") + skips[level])
            if trace is not None:
                trace.append(tuple(y.shape[-2:]))
        return y


class DualHourglassStack(nn.Module):
    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        c = cfg.feature_channels
        self.blocks = nn.ModuleList(
            EncoderDecoder(c, cfg.encoder_depth, cfg.feature_size, cfg.use_dfb, cfg.mhsa_heads,
                           cfg.mhsa_reduction, cfg.head_dim, cfg.ffn_expansion)
            for _ in range(cfg.num_dual_hourglass))
        self.res = nn.ModuleList(ResidualBlock(c, c) for _ in range(cfg.num_dual_hourglass))

    def forward(self, xf, xe):
        y = None
        for block, res in zip(self.blocks, self.res):
            y = res(block(xf, xe))
            xf, xe = xf + y, xe + y
        return y


def _stem_layer2(c1: int, c2: int, c: int) -> nn.Sequential:
    return nn.Sequential(ResidualBlock(c1, c2), nn.MaxPool2d(2), ResidualBlock(c2, c2), ResidualBlock(c2, c))


class ShallowStem(nn.Module):
    """Stride-4 two-branch stem with a fusion block after each of its two stages."""

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        c = cfg.feature_channels
        c1, c2 = c // 4, c // 2
        self.layer1_f = ConvBNReLU(cfg.image_channels, c1, 7, 2)
        self.layer1_e = ConvBNReLU(cfg.event_channels, c1, 7, 2)
        self.layer2_f = _stem_layer2(c1, c2, c)
        self.layer2_e = _stem_layer2(c1, c2, c)
        self.sfb1 = ShallowFusionBlock(c1, cfg.ca_reduction) if cfg.use_sfb else None
        self.sfb2 = ShallowFusionBlock(c, cfg.ca_reduction) if cfg.use_sfb else None

    def forward(self, image, events):
        if image.shape[-2:] != events.shape[-2:]:
            raise ShapeError(f"image {tuple(image.shape)} and events {tuple(events.shape)} are not aligned")
        f, e = self.layer1_f(image), self.layer1_e(events)
        if self.sfb1 is not None:
            of, oe = self.sfb1(f, e)
            f, e = f + of, e + oe
        f, e = self.layer2_f(f), self.layer2_e(e)
        if self.sfb2 is not None:
            of, oe = self.sfb2(f, e)
            f, e = f + of, e + oe
        return f, e


class FusionBackbone(nn.Module):
    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.cfg = cfg
        self.stem = ShallowStem(cfg)
        self.stack = DualHourglassStack(cfg)
        init_weights(self)

    def forward(self, image, events):
        _check_input(self.cfg, image, events)
        return self.stack(*self.stem(image, events))


class Hourglass(nn.Module):
    def __init__(self, channels: int, depth: int):
        super().__init__()
        self.depth = depth
        self.enc = nn.ModuleList(ResidualBlock(channels, channels) for _ in range(depth + 1))
        self.dec = nn.ModuleList(ResidualBlock(channels, channels) for _ in range(depth))

    def forward(self, x):
        skips = []
        for level in range(self.depth + 1):
            if level:
                x = F.max_pool2d(x, 2)
            x = self.enc[level](x)
            skips.append(x)
        y = skips[-1]
        for level in reversed(range(self.depth)):
            y = self.dec[level](F.interpolate(y, scale_factor=2, mode="nearest") + skips[level])
        return y


class SingleStreamBackbone(nn.Module):
    """Plain stacked hourglass over frames, events, or their channel concatenation."""

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.cfg = cfg
        c = cfg.feature_channels
        cin = {"frame": cfg.image_channels, "event": cfg.event_channels,
               "concat": cfg.image_channels + cfg.event_channels}[cfg.input_mode]
        self.stem = nn.Sequential(ConvBNReLU(cin, c // 4, 7, 2), _stem_layer2(c // 4, c // 2, c))
        self.hourglasses = nn.ModuleList(Hourglass(c, cfg.encoder_depth) for _ in range(cfg.num_dual_hourglass))
        self.res = nn.ModuleList(ResidualBlock(c, c) for _ in range(cfg.num_dual_hourglass))
        init_weights(self)

    def forward(self, image, events):
        _check_input(self.cfg, image, events)
        mode = self.cfg.input_mode
        x = image if mode == "frame" else events if mode == "event" else torch.cat([image, events], dim=1)
        x = self.stem(x)
        y = None
        for hg, res in zip(self.hourglasses, self.res):
            y = res(hg(x))
            x = x + y
        return y


def _check_input(cfg: BackboneConfig, image, events) -> None:
    if image.shape[1] != cfg.image_channels or events.shape[1] != cfg.event_channels:
        raise ShapeError(f"expected {cfg.image_channels} image and {cfg.event_channels} event channels, "
                         f"got {image.shape[1]} and {events.shape[1]}")
    if image.shape[-2:] != events.shape[-2:]:
        raise ShapeError("image and event grids are not spatially aligned")
    size = cfg.input_size
    if tuple(image.shape[-2:]) != (size, size):
        raise ShapeError(f"expected {size}x{size} inputs, got {tuple(image.shape[-2:])}")


def build_backbone(cfg: BackboneConfig) -> nn.Module:
    if cfg.input_mode == "fused":
        return FusionBackbone(cfg)
    return SingleStreamBackbone(cfg)


def count_attention_modules(model: nn.Module) -> int:
    return sum(isinstance(m, (LightweightMHSA, ChannelAttention)) for m in model.modules())


def parameter_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())

