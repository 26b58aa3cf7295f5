"""Stage One: posed depth/mask pair -> canonical-pose depth/mask pair.

Three parts run in sequence: a local feature extractor (LFE) producing one
per-pixel feature channel, a multi-scale feature extractor (MSFE) of three
dilated encoders plus a fusing decoder producing a second channel, and an
encoder-decoder that reads (depth, mask, LF, MSF) and emits the canonical pair.
"""

import hashlib
import json
from dataclasses import asdict, dataclass, field

import torch
from torch import nn

from ..errors import ConfigError, ShapeError
from .blocks import DownBlock, UpPath, pooled_sizes, zero_map

FUSER_OUT_BIAS = 0.1
FUSER_OUT_WEIGHT_SCALE = 0.1


@dataclass
class Stage1Config:
    input_resolution: tuple = (64, 64)
    n_down: int = 3
    n_up: int = 5
    encoder_latent_dim: int = 256
    fused_latent_dim: int = 128
    dilations: tuple = (1, 2, 3)
    channel_widths: tuple = (16, 32, 64)
    up_kernels: tuple = (5, 3, 2)
    encoder_pool: int = 4
    fuser_channels: tuple = (32, 32, 16, 16, 8, 8)
    fuser_kernels: tuple = (4, 4, 4, 4, 3, 3)
    fuser_upsamples: int = 4
    enable_lfe: bool = True
    enable_msfe: bool = True

    def __post_init__(self):
        self.input_resolution = tuple(int(v) for v in self.input_resolution)
        self.dilations = tuple(self.dilations)
        self.channel_widths = tuple(self.channel_widths)
        self.up_kernels = tuple(self.up_kernels)
        self.fuser_channels = tuple(self.fuser_channels)
        self.fuser_kernels = tuple(self.fuser_kernels)
        self.validate()

    def validate(self):
        if self.dilations != (1, 2, 3):
            raise ConfigError(f"dilations must be (1, 2, 3), got {self.dilations}")
        if self.n_down < 1 or self.n_up < self.n_down:
            raise ConfigError("need n_down >= 1 and n_up >= n_down")
        if len(self.channel_widths) != self.n_down:
            raise ConfigError("channel_widths needs one width per down block")
        if self.encoder_latent_dim < 1 or self.fused_latent_dim < 1:
            raise ConfigError("latent dims must be positive")
        if len(self.fuser_channels) != 6 or len(self.fuser_kernels) != 6:
            raise ConfigError("the fusing decoder has exactly six transpose convolutions")
        if not 0 <= self.fuser_upsamples <= 6:
            raise ConfigError("fuser_upsamples must lie in [0, 6]")
        h, w = self.input_resolution
        if min(pooled_sizes(h, self.n_down)[-1], pooled_sizes(w, self.n_down)[-1]) < 1:
            raise ConfigError(f"input {h}x{w} too small for {self.n_down} pooling steps")

    def to_dict(self):
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    def fingerprint(self):
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    @classmethod
    def paper(cls, **overrides):
        """Full-size configuration: 500x500 input, 1600-d encoder codes, 500-d fused code."""
        base = dict(input_resolution=(500, 500), encoder_latent_dim=1600, fused_latent_dim=500)
        base.update(overrides)
        return cls(**base)


class LocalFeatureExtractor(nn.Module):
    def __init__(self, cfg, in_ch=2, out_ch=1, final_act=None):
        super().__init__()
        w = cfg.channel_widths
        chans = [in_ch, *w]
        self.down = nn.Sequential(*[DownBlock(chans[i], chans[i + 1]) for i in range(cfg.n_down)])
        # up path mirrors the widths, then stays at the first width for refinement blocks
        up = [w[-1], *w[::-1][1:]]
        up += [w[0]] * (cfg.n_up - len(up))
        self.up = UpPath([*up, out_ch], cfg.up_kernels, cfg.input_resolution, cfg.n_down, final_act)

    def forward(self, x):
        return self.up(self.down(x))


class DilatedEncoder(nn.Module):
    def __init__(self, cfg, dilation, in_ch=3):
        super().__init__()
        chans = [in_ch, *cfg.channel_widths]
        self.dilation = dilation
        self.down = nn.Sequential(*[DownBlock(chans[i], chans[i + 1], dilation=dilation) for i in range(cfg.n_down)])
        self.pool = nn.AdaptiveAvgPool2d(cfg.encoder_pool)
        self.fc = nn.Linear(chans[-1] * cfg.encoder_pool ** 2, cfg.encoder_latent_dim)

    def forward(self, x):
        return self.fc(torch.flatten(self.pool(self.down(x)), 1))


class FusingDecoder(nn.Module):
    """Concatenated codes -> two-layer MLP -> spatial seed -> six transpose convs (each + ReLU)."""

    def __init__(self, cfg):
        super().__init__()
        self.mlp = nn.Sequential(
            nn.Linear(3 * cfg.encoder_latent_dim, cfg.fused_latent_dim), nn.ReLU(),
            nn.Linear(cfg.fused_latent_dim, cfg.fused_latent_dim), nn.ReLU(),
        )
        channels = list(cfg.fuser_channels)
        self.up = UpPath([channels[0], *channels[1:], 1], cfg.fuser_kernels, cfg.input_resolution,
                         cfg.fuser_upsamples, final_act=nn.ReLU())
        # the map ends in a ReLU and its pre-activation is nearly constant at init;
        # a small last layer with a positive bias keeps it from starting dead
        last = self.up.net[-2]
        with torch.no_grad():
            last.weight.mul_(FUSER_OUT_WEIGHT_SCALE)
        nn.init.constant_(last.bias, FUSER_OUT_BIAS)
        self.seed_shape = (channels[0], *self.up.in_hw)
        self.seed = nn.Sequential(nn.Linear(cfg.fused_latent_dim, channels[0] * self.up.in_hw[0] * self.up.in_hw[1]),
                                  nn.ReLU())

    def forward(self, z):
        code = self.mlp(z)
        return self.up(self.seed(code).view(-1, *self.seed_shape))


class Stage1Net(nn.Module):
    def __init__(self, cfg=None):
        super().__init__()
        self.cfg = cfg = cfg or Stage1Config()
        self.lfe = LocalFeatureExtractor(cfg) if cfg.enable_lfe else None
        if cfg.enable_msfe:
            self.encoders = nn.ModuleList([DilatedEncoder(cfg, d) for d in cfg.dilations])
            self.fuser = FusingDecoder(cfg)
        else:
            self.encoders = None
            self.fuser = None
        self.reconstruct = LocalFeatureExtractor(cfg, in_ch=4, out_ch=2, final_act=nn.Sigmoid())

    def _check(self, x, channels, what):
        h, w = self.cfg.input_resolution
        if x.dim() != 4 or x.shape[1] != channels or tuple(x.shape[-2:]) != (h, w):
            raise ShapeError(f"{what}: expected (B, {channels}, {h}, {w}), got {tuple(x.shape)}")

    def local_features(self, x):
        """LF map (B, 1, H, W); all zeros when the LFE is disabled."""
        self._check(x, 2, "LFE input")
        if self.lfe is None:
            return zero_map(x)
        return self.lfe(x)

    def encode(self, x, lf, dilation):
        if dilation not in self.cfg.dilations:
            raise ConfigError(f"dilation must be one of {self.cfg.dilations}, got {dilation}")
        if self.encoders is None:
            raise ConfigError("multi-scale encoders are disabled in this configuration")
        self._check(x, 2, "encoder input")
        self._check(lf, 1, "encoder LF input")
        return self.encoders[self.cfg.dilations.index(dilation)](torch.cat([x, lf], 1))

    def fuse(self, z1, z2, z3):
        dim = self.cfg.encoder_latent_dim
        for z in (z1, z2, z3):
            if z.dim() != 2 or z.shape[1] != dim:
                raise ShapeError(f"latent codes must be (B, {dim}), got {tuple(z.shape)}")
        return self.fuser(torch.cat([z1, z2, z3], 1))

    def multi_scale_features(self, x, lf):
        """MSF map (B, 1, H, W); all zeros when the MSFE is disabled."""
        if self.encoders is None:
            self._check(x, 2, "MSFE input")
            return zero_map(x)
        return self.fuse(*(self.encode(x, lf, d) for d in self.cfg.dilations))

    def canonical(self, x, lf, msf):
        self._check(x, 2, "reconstruction input")
        self._check(lf, 1, "reconstruction LF input")
        self._check(msf, 1, "reconstruction MSF input")
        return self.reconstruct(torch.cat([x, lf, msf], 1))

    def forward(self, x):
        """Return (lf, msf, canonical) for a (B, 2, H, W) depth/mask batch."""
        lf = self.local_features(x)
        msf = self.multi_scale_features(x, lf)
        return lf, msf, self.canonical(x, lf, msf)
