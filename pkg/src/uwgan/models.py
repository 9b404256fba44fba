"""Generator and 3D dense U-Net discriminator.

The generator is an 8-layer encoder-decoder of stride-1 3x3x3 convolutions
(4 conv + 4 transposed conv) with additive short connections, so a patch maps
to a patch of the same size.

The discriminator downsamples 5 times with stride-2 convolutions, scores the
flattened bottleneck with a linear layer (global head ``D_enc``) and
upsamples back with transposed convolutions to a per-voxel map
(``D_dec``). Inside every resolution level, each convolution sees the
concatenation of all earlier feature maps of that level.
"""

from __future__ import annotations

import hashlib
import json
from typing import Literal

import torch
from pydantic import BaseModel, ConfigDict, field_validator
from torch import nn
from torch.nn.utils.parametrizations import spectral_norm


class GeneratorSpec(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    layer_filters: tuple[int, ...] = (32, 64, 128, 256, 128, 64, 32, 1)
    negative_slope: float = 0.2
    residual_input: bool = True

    @field_validator("layer_filters")
    @classmethod
    def _symmetric(cls, v):
        if len(v) != 8 or v[-1] != 1:
            raise ValueError("generator needs 8 layer filters ending in 1")
        if tuple(v[4:7]) != tuple(reversed(v[0:3])):
            raise ValueError(f"deconv filters {v[4:7]} must mirror conv filters {v[0:3]} for short connections")
        return tuple(int(f) for f in v)

    def scaled(self, divisor: int) -> GeneratorSpec:
        return self.model_copy(update={"layer_filters": tuple(max(1, f // divisor) if f > 1 else 1 for f in self.layer_filters)})


class DiscriminatorSpec(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    encoder_filters: tuple[int, ...] = (32, 64, 128, 256, 512)
    variant: Literal["dense", "unet", "classic"] = "dense"
    convs_per_level: int = 2
    patch_size: int = 32
    negative_slope: float = 0.2

    @field_validator("encoder_filters")
    @classmethod
    def _five_levels(cls, v):
        if len(v) != 5:
            raise ValueError("discriminator needs exactly 5 encoder filter counts")
        return tuple(int(f) for f in v)

    @property
    def decoder_filters(self) -> tuple[int, ...]:
        # levels at resolutions 2, 4, 8, 16, 32 (for a 32^3 input)
        enc = self.encoder_filters
        return (enc[3], enc[2], enc[1], enc[0], enc[0])

    def scaled(self, divisor: int) -> DiscriminatorSpec:
        return self.model_copy(update={"encoder_filters": tuple(max(1, f // divisor) for f in self.encoder_filters)})


def spec_hash(*specs: BaseModel) -> str:
    payload = json.dumps([s.model_dump(mode="json") for s in specs], sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


def init_weights(module: nn.Module, std: float = 0.02) -> None:
    """N(0, std) weights, zero biases, unit/zero batch-norm affine."""
    for m in module.modules():
        if isinstance(m, (nn.Conv3d, nn.ConvTranspose3d, nn.Conv2d, nn.Linear)):
            nn.init.normal_(m.weight, 0.0, std)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.BatchNorm3d):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)


class Generator(nn.Module):
    def __init__(self, spec: GeneratorSpec | None = None):
        super().__init__()
        self.spec = spec or GeneratorSpec()
        f = self.spec.layer_filters
        slope = self.spec.negative_slope
        chans = (1, *f)
        self.convs = nn.ModuleList(nn.Conv3d(chans[i], chans[i + 1], 3, padding=1) for i in range(4))
        self.deconvs = nn.ModuleList(nn.ConvTranspose3d(chans[i], chans[i + 1], 3, padding=1) for i in range(4, 8))
        # all layers except the final one are batch-normalized
        self.norms = nn.ModuleList(nn.BatchNorm3d(c) for c in f[:7])
        self.acts = nn.ModuleList(nn.LeakyReLU(slope) for _ in range(8))
        init_weights(self)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() != 5 or x.shape[1] != 1:
            raise ValueError(f"generator expects (B, 1, X, Y, Z), got {tuple(x.shape)}")
        feats = [x]
        h = x
        for i, conv in enumerate(self.convs):
            h = self.acts[i](self.norms[i](conv(h)))
            feats.append(h)
        # deconv layer k (5..8) adds the output of conv layer 8-k; layer 8 adds the input
        for j, deconv in enumerate(self.deconvs):
            k = 5 + j
            h = deconv(h)
            if k < 8:
                h = self.norms[k - 1](h)
            if k < 8 or self.spec.residual_input:
                h = h + feats[8 - k]
            h = self.acts[k - 1](h)
        return h


def _sn(layer: nn.Module) -> nn.Module:
    # initialise before wrapping so the stored power-iteration vectors match the weights
    init_weights(layer)
    return spectral_norm(layer, n_power_iterations=1)


class _Level(nn.Module):
    """One resolution level: a list of convs where conv j reads ``routes[j]``.

    ``routes[j]`` indexes into the level's running feature list, which starts
    with the level inputs and grows by one entry per conv.
    """

    def __init__(self, in_channels: list[int], out_channels: int, n_convs: int, dense: bool, slope: float):
        super().__init__()
        self.n_inputs = len(in_channels)
        channels = list(in_channels)
        self.routes: list[list[int]] = []
        self.convs = nn.ModuleList()
        self.acts = nn.ModuleList()
        for j in range(n_convs):
            if dense or j == 0:
                route = list(range(len(channels)))
            else:
                route = [len(channels) - 1]
            c_in = sum(channels[r] for r in route)
            self.routes.append(route)
            self.convs.append(_sn(nn.Conv3d(c_in, out_channels, 3, padding=1)))
            self.acts.append(nn.LeakyReLU(slope))
            channels.append(out_channels)
        self.channels = channels
        for conv, route in zip(self.convs, self.routes):
            assert conv.in_channels == sum(channels[r] for r in route), "dense routing channel mismatch"

    def forward(self, inputs: list[torch.Tensor]) -> torch.Tensor:
        feats = list(inputs)
        for conv, act, route in zip(self.convs, self.acts, self.routes):
            x = feats[route[0]] if len(route) == 1 else torch.cat([feats[r] for r in route], dim=1)
            feats.append(act(conv(x)))
        return feats[-1]


class Discriminator(nn.Module):
    """Returns ``(D_enc, D_dec)``: scores of shape (B,) and maps of shape (B, 1, X, Y, Z).

    The ``classic`` variant has no decoder and returns ``D_dec = None``.
    """

    n_levels = 5

    def __init__(self, spec: DiscriminatorSpec | None = None):
        super().__init__()
        self.spec = spec or DiscriminatorSpec()
        s = self.spec
        if s.patch_size % 2**self.n_levels:
            raise ValueError(f"patch size {s.patch_size} not divisible by {2 ** self.n_levels}")
        slope = s.negative_slope
        dense = s.variant == "dense"
        enc = s.encoder_filters

        self.down = nn.ModuleList()
        self.enc_levels = nn.ModuleList()
        self.down_acts = nn.ModuleList()
        prev = 1
        for c in enc:
            self.down.append(_sn(nn.Conv3d(prev, c, 4, stride=2, padding=1)))
            self.down_acts.append(nn.LeakyReLU(slope))
            self.enc_levels.append(_Level([c], c, s.convs_per_level, dense, slope))
            prev = c
        bottleneck = s.patch_size // 2**self.n_levels
        self.fc = nn.Linear(enc[-1] * bottleneck**3, 1)

        self.up = nn.ModuleList()
        self.up_acts = nn.ModuleList()
        self.dec_levels = nn.ModuleList()
        if s.variant != "classic":
            skip_channels = [enc[3], enc[2], enc[1], enc[0], 1]
            for d, skip in zip(s.decoder_filters, skip_channels):
                self.up.append(_sn(nn.ConvTranspose3d(prev, d, 4, stride=2, padding=1)))
                self.up_acts.append(nn.LeakyReLU(slope))
                # the first conv of a decoder level always reads [upsampled, skip]
                self.dec_levels.append(_Level([d, skip], d, s.convs_per_level, dense, slope))
                prev = d
            self.head = nn.Conv3d(prev, 1, 3, padding=1)
            init_weights(self.head)
        init_weights(self.fc)

    def routing(self) -> list[dict]:
        """Per-conv record of input routes and channel counts, for inspection."""
        out = []
        for name, levels in (("enc", self.enc_levels), ("dec", self.dec_levels)):
            for i, level in enumerate(levels):
                for j, (conv, route) in enumerate(zip(level.convs, level.routes)):
                    out.append({
                        "level": f"{name}{i}",
                        "conv": j,
                        "route": list(route),
                        "route_channels": [level.channels[r] for r in route],
                        "in_channels": conv.in_channels,
                    })
        return out

    def forward(self, x: torch.Tensor):
        if x.dim() != 5 or x.shape[1] != 1:
            raise ValueError(f"discriminator expects (B, 1, X, Y, Z), got {tuple(x.shape)}")
        if tuple(x.shape[2:]) != (self.spec.patch_size,) * 3:
            raise ValueError(f"discriminator built for {self.spec.patch_size}^3 patches, got {tuple(x.shape[2:])}")
        skips = []
        h = x
        for down, act, level in zip(self.down, self.down_acts, self.enc_levels):
            h = level([act(down(h))])
            skips.append(h)
        d_enc = self.fc(h.flatten(1)).view(-1)
        if self.spec.variant == "classic":
            return d_enc, None
        skip_inputs = [skips[3], skips[2], skips[1], skips[0], x]
        for up, act, level, skip in zip(self.up, self.up_acts, self.dec_levels, skip_inputs):
            h = level([act(up(h)), skip])
        return d_enc, self.head(h)


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())
