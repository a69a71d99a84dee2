"""Patch discriminators emitting raw (un-squashed) score maps."""

from dataclasses import dataclass

from torch import nn

from .generators import count_parameters


@dataclass(frozen=True)
class DiscriminatorSpec:
    base_channels: int = 64
    n_down_layers: int = 4
    kernel: int = 4
    activation: str = "relu"

    def __post_init__(self):
        if self.n_down_layers < 1:
            raise ValueError("n_down_layers must be >= 1")
        if self.base_channels < 1 or self.kernel < 1:
            raise ValueError("base_channels and kernel must be >= 1")
        if self.activation not in ("relu", "leaky_relu"):
            raise ValueError(f"unsupported activation {self.activation!r}")

    @classmethod
    def from_config(cls, config):
        return cls(
            base_channels=config["model.discriminator.base_channels"],
            n_down_layers=config["model.discriminator.n_down_layers"],
            kernel=config["model.discriminator.kernel"],
            activation=config["model.discriminator.activation"],
        )


def score_map_size(size, spec=DiscriminatorSpec()):
    """Spatial side of the score map for an input side ``size`` (padding 1)."""
    for _ in range(spec.n_down_layers):
        size = (size + 2 - spec.kernel) // 2 + 1
    return size + 2 - spec.kernel + 1


def min_input_size(spec=DiscriminatorSpec()):
    size = 1
    while score_map_size(size, spec) < 1:
        size += 1
    return size


class PatchDiscriminator(nn.Module):
    def __init__(self, spec=DiscriminatorSpec()):
        super().__init__()
        self.spec = spec
        self.topology_id = f"patch-c{spec.base_channels}-d{spec.n_down_layers}-k{spec.kernel}-{spec.activation}"
        act = (lambda: nn.ReLU(inplace=True)) if spec.activation == "relu" else (lambda: nn.LeakyReLU(0.2, inplace=True))
        c, k = spec.base_channels, spec.kernel
        layers = [nn.Conv2d(3, c, k, stride=2, padding=1), act()]
        c_in = c
        for i in range(1, spec.n_down_layers):
            c_out = c * min(2 ** i, 8)
            layers += [nn.Conv2d(c_in, c_out, k, stride=2, padding=1, bias=False),
                       nn.InstanceNorm2d(c_out, affine=True), act()]
            c_in = c_out
        layers.append(nn.Conv2d(c_in, 1, k, stride=1, padding=1))
        self.model = nn.Sequential(*layers)
        self.min_size = min_input_size(spec)

    @property
    def parameter_count(self):
        return count_parameters(self)

    def forward(self, x):
        h, w = x.shape[-2:]
        if min(h, w) < self.min_size:
            raise ValueError(f"discriminator input must be at least {self.min_size}x{self.min_size}, got {h}x{w}")
        return self.model(x)


def build_patch_discriminator(spec=DiscriminatorSpec()):
    return PatchDiscriminator(spec)


def forward_discriminate(net, img):
    """Score map 1xH'xW' for a 3xHxW image, or Nx1xH'xW' for a batch."""
    single = img.dim() == 3
    out = net(img.unsqueeze(0) if single else img)
    return out[0] if single else out
