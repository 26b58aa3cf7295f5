import torch
from torch import nn

from ..errors import ConfigError

LEAK = 0.2


class DownBlock(nn.Sequential):
    """5x5 convolution (stride 1, optional dilation), LeakyReLU, 2x max-pool."""

    def __init__(self, in_ch, out_ch, kernel=5, dilation=1):
        super().__init__(
            nn.Conv2d(in_ch, out_ch, kernel, stride=1, padding=dilation * (kernel // 2), dilation=dilation),
            nn.LeakyReLU(LEAK),
            nn.MaxPool2d(2),
        )


def pooled_sizes(size, n):
    """Spatial sizes after each of ``n`` floor-halving pools, starting with ``size``."""
    sizes = [int(size)]
    for _ in range(n):
        sizes.append(sizes[-1] // 2)
    return sizes


def transpose_padding(kernel, stride, in_size, out_size):
    """Solve (in - 1) * stride - 2 * pad + kernel + out_pad == out for (pad, out_pad)."""
    for pad in range(kernel):
        out_pad = out_size - ((in_size - 1) * stride - 2 * pad + kernel)
        if 0 <= out_pad < stride:
            return pad, out_pad
    raise ConfigError(f"no padding maps {in_size} -> {out_size} with kernel {kernel}, stride {stride}")


def up_conv(in_ch, out_ch, kernel, stride, in_hw, out_hw):
    """ConvTranspose2d whose output lands exactly on ``out_hw``."""
    (ph, oph), (pw, opw) = (transpose_padding(kernel, stride, i, o) for i, o in zip(in_hw, out_hw))
    return nn.ConvTranspose2d(in_ch, out_ch, kernel, stride=stride, padding=(ph, pw), output_padding=(oph, opw))


class UpPath(nn.Module):
    """Transpose-convolution decoder from a pooled map back to full resolution.

    The first ``n_stride2`` blocks double the size (landing on the recorded
    encoder sizes); the rest refine at full resolution. Kernel sizes cycle
    through ``kernels``.
    """

    def __init__(self, channels, kernels, hw, n_stride2, final_act=None):
        super().__init__()
        n_blocks = len(channels) - 1
        if n_stride2 > n_blocks:
            raise ConfigError("more upsampling steps than up blocks")
        hs, ws = pooled_sizes(hw[0], n_stride2), pooled_sizes(hw[1], n_stride2)
        layers = []
        cur = (hs[-1], ws[-1])
        for i in range(n_blocks):
            k = kernels[i % len(kernels)]
            if i < n_stride2:
                nxt, stride = (hs[n_stride2 - 1 - i], ws[n_stride2 - 1 - i]), 2
            else:
                nxt, stride = tuple(hw), 1
            layers.append(up_conv(channels[i], channels[i + 1], k, stride, cur, nxt))
            if i < n_blocks - 1:
                layers.append(nn.ReLU())
            cur = nxt
        if final_act is not None:
            layers.append(final_act)
        self.net = nn.Sequential(*layers)
        self.in_hw = (hs[-1], ws[-1])

    def forward(self, x):
        return self.net(x)


def zero_map(x, channels=1):
    b, _, h, w = x.shape
    return torch.zeros(b, channels, h, w, dtype=x.dtype, device=x.device)
