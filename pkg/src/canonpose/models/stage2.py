"""Stage Two: (posed pair, canonical pair) -> voxel occupancy, plus the vector critic."""

import hashlib
import json
import math
from dataclasses import asdict, dataclass

import torch
from torch import nn

from ..errors import ConfigError, ShapeError
from .blocks import LEAK, DownBlock

VOXEL_RESOLUTIONS = (8, 16, 32, 64, 128, 256)
# Output squashing margin: keeps probabilities strictly inside (0, 1) at float32.
PROB_MARGIN = 1e-6


@dataclass
class Stage2Config:
    input_resolution: tuple = (64, 64)
    voxel_resolution: int = 32
    pose_latent_dim: int = 128
    shape_latent_dim: int = 128
    enable_shape_encoder: bool = True
    disc_output_dim: int = 16
    encoder_widths: tuple = (16, 32, 64)
    encoder_pool: int = 4
    seed_resolution: int = 4
    decoder_base_channels: int = 64
    disc_widths: tuple = (8, 16, 32)
    cond_widths: tuple = (8, 16)
    cond_dim: int = 32

    def __post_init__(self):
        self.input_resolution = tuple(int(v) for v in self.input_resolution)
        self.encoder_widths = tuple(self.encoder_widths)
        self.disc_widths = tuple(self.disc_widths)
        self.cond_widths = tuple(self.cond_widths)
        self.validate()

    def validate(self):
        if self.voxel_resolution not in VOXEL_RESOLUTIONS:
            raise ConfigError(f"voxel_resolution must be one of {VOXEL_RESOLUTIONS}")
        if self.disc_output_dim < 2:
            raise ConfigError("the critic emits a vector: disc_output_dim must be >= 2")
        if min(self.pose_latent_dim, self.shape_latent_dim, self.cond_dim) < 1:
            raise ConfigError("latent dims must be positive")
        if self.seed_resolution > self.voxel_resolution or self.voxel_resolution % self.seed_resolution:
            raise ConfigError("seed_resolution must divide voxel_resolution")
        ratio = self.voxel_resolution // self.seed_resolution
        if ratio & (ratio - 1):
            raise ConfigError("voxel_resolution / seed_resolution must be a power of two")

    def to_dict(self):
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    def fingerprint(self):
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    @classmethod
    def paper(cls, **overrides):
        base = dict(input_resolution=(500, 500), voxel_resolution=256)
        base.update(overrides)
        return cls(**base)


def squash(logits):
    """Occupancy probabilities kept strictly inside (0, 1)."""
    return PROB_MARGIN + (1 - 2 * PROB_MARGIN) * torch.sigmoid(logits)


class ImageEncoder(nn.Module):
    """2-channel depth/mask image -> latent vector."""

    def __init__(self, widths, pool, out_dim, in_ch=2):
        super().__init__()
        chans = [in_ch, *widths]
        self.down = nn.Sequential(*[DownBlock(chans[i], chans[i + 1]) for i in range(len(widths))])
        self.pool = nn.AdaptiveAvgPool2d(pool)
        self.fc = nn.Linear(chans[-1] * pool * pool, out_dim)

    def forward(self, x):
        return self.fc(torch.flatten(self.pool(self.down(x)), 1))


class VoxelDecoder(nn.Module):
    def __init__(self, cfg):
        super().__init__()
        n_up = int(math.log2(cfg.voxel_resolution // cfg.seed_resolution))
        chans = [max(cfg.decoder_base_channels >> i, 4) for i in range(n_up + 1)]
        self.seed_shape = (chans[0],) + (cfg.seed_resolution,) * 3
        self.fc = nn.Linear(cfg.pose_latent_dim + cfg.shape_latent_dim, chans[0] * cfg.seed_resolution ** 3)
        layers = []
        for i in range(n_up):
            layers += [nn.ConvTranspose3d(chans[i], chans[i + 1], 4, stride=2, padding=1), nn.ReLU()]
        layers.append(nn.Conv3d(chans[-1], 1, 3, padding=1))
        self.net = nn.Sequential(*layers)

    def logits(self, z):
        x = torch.relu(self.fc(z)).view(-1, *self.seed_shape)
        return self.net(x).squeeze(1)

    def forward(self, z):
        return squash(self.logits(z))


class Generator(nn.Module):
    def __init__(self, cfg=None):
        super().__init__()
        self.cfg = cfg = cfg or Stage2Config()
        self.pose_encoder = ImageEncoder(cfg.encoder_widths, cfg.encoder_pool, cfg.pose_latent_dim)
        self.shape_encoder = (ImageEncoder(cfg.encoder_widths, cfg.encoder_pool, cfg.shape_latent_dim)
                              if cfg.enable_shape_encoder else None)
        self.decoder = VoxelDecoder(cfg)

    def _check(self, x, what):
        h, w = self.cfg.input_resolution
        if x.dim() != 4 or x.shape[1] != 2 or tuple(x.shape[-2:]) != (h, w):
            raise ShapeError(f"{what}: expected (B, 2, {h}, {w}), got {tuple(x.shape)}")

    def encode_pose(self, x):
        self._check(x, "pose encoder input")
        return self.pose_encoder(x)

    def encode_shape(self, c):
        """Shape code of the canonical pair; zeros when the shape encoder is ablated."""
        self._check(c, "shape encoder input")
        if self.shape_encoder is None:
            return c.new_zeros(c.shape[0], self.cfg.shape_latent_dim)
        return self.shape_encoder(c)

    def _latent(self, z_pose, z_shape):
        if z_pose.dim() != 2 or z_pose.shape[1] != self.cfg.pose_latent_dim:
            raise ShapeError(f"z_pose must be (B, {self.cfg.pose_latent_dim}), got {tuple(z_pose.shape)}")
        if z_shape.shape != (z_pose.shape[0], self.cfg.shape_latent_dim):
            raise ShapeError(f"z_shape must be (B, {self.cfg.shape_latent_dim}), got {tuple(z_shape.shape)}")
        return torch.cat([z_pose, z_shape], 1)

    def decode(self, z_pose, z_shape):
        return self.decoder(self._latent(z_pose, z_shape))

    def logits(self, x, c):
        """Pre-sigmoid occupancy scores; ``squash(logits(x, c))`` equals ``forward(x, c)``."""
        return self.decoder.logits(self._latent(self.encode_pose(x), self.encode_shape(c)))

    def forward(self, x, c):
        return self.decode(self.encode_pose(x), self.encode_shape(c))


class Critic(nn.Module):
    """Conditional WGAN critic D(y | x) with a vector output and no normalization layers.

    The posed pair x is embedded by a small 2-D conv stack and broadcast-
    concatenated with the 3-D features of y at 1/4 of the voxel resolution.
    """

    def __init__(self, cfg=None):
        super().__init__()
        self.cfg = cfg = cfg or Stage2Config()
        w = cfg.disc_widths
        self.cond = ImageEncoder(cfg.cond_widths, cfg.encoder_pool, cfg.cond_dim)
        self.head = nn.Sequential(
            nn.Conv3d(1, w[0], 4, stride=2, padding=1), nn.LeakyReLU(LEAK),
            nn.Conv3d(w[0], w[1], 4, stride=2, padding=1), nn.LeakyReLU(LEAK),
        )
        self.fuse = nn.Sequential(nn.Conv3d(w[1] + cfg.cond_dim, w[2], 3, padding=1), nn.LeakyReLU(LEAK))
        size = cfg.voxel_resolution // 4
        tail = []
        while size > 4:
            tail += [nn.Conv3d(w[2], w[2], 4, stride=2, padding=1), nn.LeakyReLU(LEAK)]
            size //= 2
        self.tail = nn.Sequential(*tail)
        self.out = nn.Linear(w[2] * size ** 3, cfg.disc_output_dim)

    def forward(self, y, x):
        r = self.cfg.voxel_resolution
        h, w = self.cfg.input_resolution
        if y.dim() != 4 or tuple(y.shape[1:]) != (r, r, r):
            raise ShapeError(f"critic voxels must be (B, {r}, {r}, {r}), got {tuple(y.shape)}")
        if x.dim() != 4 or tuple(x.shape[1:]) != (2, h, w) or x.shape[0] != y.shape[0]:
            raise ShapeError(f"critic condition must be (B, 2, {h}, {w}), got {tuple(x.shape)}")
        feat = self.head(y.unsqueeze(1))
        cond = self.cond(x)[:, :, None, None, None].expand(-1, -1, *feat.shape[2:])
        feat = self.tail(self.fuse(torch.cat([feat, cond], 1)))
        return self.out(torch.flatten(feat, 1))
