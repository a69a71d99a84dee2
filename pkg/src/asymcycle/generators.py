"""Encoder / transformer / decoder generators.

``F`` (Y -> X) is the relaxed generator: a plain residual trunk.  ``G`` (X -> Y)
is the strict generator: a shorter residual trunk followed by a dense-fusion
block whose 1x1 fusion conv sees the block input and every dense layer output.

Convolutions that feed an instance norm carry no bias, since the norm removes
any per-channel constant anyway.
"""

from dataclasses import dataclass

import torch
from torch import nn


@dataclass(frozen=True)
class GeneratorSpec:
    base_channels: int = 64
    n_residual_blocks_F: int = 6
    n_residual_blocks_G: int = 2
    dense_layers: int = 6
    dense_growth: int = 288
    norm_kind: str = "instance"
    output_activation: str = "tanh"

    def __post_init__(self):
        for name in ("base_channels", "n_residual_blocks_F", "n_residual_blocks_G",
                     "dense_layers", "dense_growth"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.base_channels % 2:
            raise ValueError("base_channels must be even")
        if self.norm_kind != "instance":
            raise ValueError(f"unsupported norm_kind {self.norm_kind!r}")
        if self.output_activation != "tanh":
            raise ValueError(f"unsupported output_activation {self.output_activation!r}")

    @classmethod
    def from_config(cls, config):
        return cls(
            base_channels=config["model.base_channels"],
            n_residual_blocks_F=config["model.n_residual_blocks_F"],
            n_residual_blocks_G=config["model.n_residual_blocks_G"],
            dense_layers=config["model.dense_layers"],
            dense_growth=config["model.dense_growth"],
        )


def _norm(channels):
    return nn.InstanceNorm2d(channels, affine=True)


def conv_norm_relu(c_in, c_out, kernel, stride=1, reflect=True):
    pad = kernel // 2
    layers = []
    if reflect:
        layers += [nn.ReflectionPad2d(pad), nn.Conv2d(c_in, c_out, kernel, stride, bias=False)]
    else:
        layers += [nn.Conv2d(c_in, c_out, kernel, stride, padding=pad, bias=False)]
    return layers + [_norm(c_out), nn.ReLU(inplace=True)]


class ResidualBlock(nn.Module):
    def __init__(self, channels):
        super().__init__()
        self.body = nn.Sequential(
            *conv_norm_relu(channels, channels, 3),
            nn.ReflectionPad2d(1),
            nn.Conv2d(channels, channels, 3, bias=False),
            _norm(channels),
        )

    def forward(self, x):
        return x + self.body(x)


class DenseFusionBlock(nn.Module):
    """Dense block plus fusion conv.

    Dense layer ``i`` (1-based) sees ``in_channels + (i-1)*growth`` channels:
    the block input and every earlier layer output.  The fusion input is the
    concatenation ``[input, out_1, ..., out_L]``, so layer ``i`` occupies
    channels ``[in + (i-1)*growth, in + i*growth)``; a 1x1 conv maps it back to
    ``in_channels``.
    """

    def __init__(self, in_channels, n_layers, growth):
        super().__init__()
        self.in_channels, self.growth = in_channels, growth
        self.layers = nn.ModuleList(
            nn.Sequential(*conv_norm_relu(in_channels + i * growth, growth, 3))
            for i in range(n_layers)
        )
        self.fusion_in_channels = in_channels + n_layers * growth
        self.fusion = nn.Sequential(
            nn.Conv2d(self.fusion_in_channels, in_channels, 1, bias=False),
            _norm(in_channels),
        )

    def dense_features(self, x):
        features = [x]
        for layer in self.layers:
            features.append(layer(torch.cat(features, dim=1)))
        return torch.cat(features, dim=1)

    def forward(self, x):
        return self.fusion(self.dense_features(x))


class Generator(nn.Module):
    """Shared encoder/decoder around an arbitrary intermediate trunk."""

    def __init__(self, base_channels, trunk, topology_id):
        super().__init__()
        c = base_channels
        self.topology_id = topology_id
        self.encoder = nn.Sequential(
            *conv_norm_relu(3, c, 7),
            *conv_norm_relu(c, 2 * c, 3, stride=2, reflect=False),
            *conv_norm_relu(2 * c, 4 * c, 3, stride=2, reflect=False),
        )
        self.trunk = trunk
        self.decoder = nn.Sequential(
            nn.ConvTranspose2d(4 * c, 2 * c, 3, stride=2, padding=1, output_padding=1, bias=False),
            _norm(2 * c),
            nn.ReLU(inplace=True),
            nn.ConvTranspose2d(2 * c, c, 3, stride=2, padding=1, output_padding=1, bias=False),
            _norm(c),
            nn.ReLU(inplace=True),
            nn.ReflectionPad2d(3),
        )
        self.output = nn.Conv2d(c, 3, 7)

    @property
    def parameter_count(self):
        return count_parameters(self)

    def forward(self, x):
        h, w = x.shape[-2:]
        if h % 4 or w % 4:
            raise ValueError(f"generator input height and width must be divisible by 4, got {h}x{w}")
        return torch.tanh(self.output(self.decoder(self.trunk(self.encoder(x)))))


def build_residual_generator(spec=GeneratorSpec()):
    """Relaxed generator ``F``: residual trunk only."""
    width = 4 * spec.base_channels
    trunk = nn.Sequential(*(ResidualBlock(width) for _ in range(spec.n_residual_blocks_F)))
    return Generator(spec.base_channels, trunk, f"residual-c{spec.base_channels}-r{spec.n_residual_blocks_F}")


def build_dense_fusion_generator(spec=GeneratorSpec()):
    """Strict generator ``G``: residual blocks followed by one dense-fusion block."""
    width = 4 * spec.base_channels
    trunk = nn.Sequential(
        *(ResidualBlock(width) for _ in range(spec.n_residual_blocks_G)),
        DenseFusionBlock(width, spec.dense_layers, spec.dense_growth),
    )
    topology = (f"dense-fusion-c{spec.base_channels}-r{spec.n_residual_blocks_G}"
                f"-l{spec.dense_layers}-g{spec.dense_growth}")
    return Generator(spec.base_channels, trunk, topology)


def forward_generate(net, x):
    """Translate a 3xHxW image or an Nx3xHxW batch."""
    single = x.dim() == 3
    if single:
        x = x.unsqueeze(0)
    if x.dim() != 4 or x.shape[1] != 3:
        raise ValueError(f"expected 3xHxW or Nx3xHxW input, got shape {tuple(x.shape)}")
    out = net(x)
    return out[0] if single else out


def count_parameters(net):
    """Exact number of learnable scalars."""
    return sum(p.numel() for p in net.parameters() if p.requires_grad)
