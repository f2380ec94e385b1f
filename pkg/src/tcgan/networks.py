"""Generator, discriminator and model-selection classifier networks.

All networks work on batches laid out as ``(N, C, H, W)`` in the ``[-1, 1]``
image range. Parameters are drawn from a private ``torch.Generator`` so that
building a network never touches the global RNG stream.
"""
from __future__ import annotations

import torch
import torch.nn as nn

INIT_STD = 0.02
# Small enough that normalized activations have unit variance to ~1e-6 even
# for low-energy channels; zero-variance channels still map to exactly 0.
NORM_EPS = 1e-10
RESIDUAL_SCALE = 2.0


def _norm(channels: int) -> nn.InstanceNorm2d:
    return nn.InstanceNorm2d(channels, affine=True, eps=NORM_EPS, track_running_stats=False)


def init_params(module: nn.Module, seed: int, std: float = INIT_STD) -> nn.Module:
    """Re-initialise ``module`` in place, deterministically from ``seed``.

    Convolution and linear weights are drawn i.i.d. from N(0, std^2) and their
    biases zeroed; instance-norm scales are set to 1 and offsets to 0.
    Modules are visited in registration order, so the same architecture and
    seed always give bit-identical parameters.
    """
    gen = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for m in module.modules():
            if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
                nn.init.normal_(m.weight, 0.0, std, generator=gen)
                if m.bias is not None:
                    m.bias.zero_()
            elif isinstance(m, nn.InstanceNorm2d) and m.affine:
                m.weight.fill_(1.0)
                m.bias.zero_()
    return module


# Instance norm needs more than one spatial element, which bounds the input size
# from below: 16 for the generator (3 stride-2 stages), 32 for the 4-stage nets.
def _check_image_batch(x: torch.Tensor, name: str, multiple: int = 1, min_size: int = 1) -> None:
    if x.dim() != 4 or x.shape[1] != 3:
        raise ValueError(f"{name} expects a (N, 3, H, W) batch, got shape {tuple(x.shape)}")
    h, w = x.shape[-2:]
    if h % multiple or w % multiple or h < min_size or w < min_size:
        raise ValueError(
            f"{name} needs H and W to be multiples of {multiple} and at least {min_size}, got {h}x{w}"
        )


class ResidualBlock(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(channels, channels, 3, padding=1, padding_mode="reflect"),
            _norm(channels),
            nn.ReLU(),
            nn.Conv2d(channels, channels, 3, padding=1, padding_mode="reflect"),
            _norm(channels),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x + self.body(x)


class ShadowTransformEncoder(nn.Module):
    """Three stride-2 convolutions followed by a stack of residual blocks.

    Maps a ``(N, 3, H, W)`` image to ``(N, 4*base, H/8, W/8)`` features.
    """

    def __init__(self, base_channels: int = 64, n_blocks: int = 9):
        super().__init__()
        layers: list[nn.Module] = []
        c_in = 3
        for c_out in (base_channels, base_channels * 2, base_channels * 4):
            layers += [
                nn.Conv2d(c_in, c_out, 3, stride=2, padding=1, padding_mode="reflect"),
                _norm(c_out),
                nn.ReLU(),
            ]
            c_in = c_out
        layers += [ResidualBlock(c_in) for _ in range(n_blocks)]
        self.layers = nn.Sequential(*layers)
        self.out_channels = c_in

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        _check_image_batch(x, "encoder", multiple=8, min_size=16)
        return self.layers(x)


class ShadowResidualDecoder(nn.Module):
    """Three stride-2 transposed convolutions back to a 3-channel residual.

    The last stage ends in ``2 * tanh`` so residuals lie in ``[-2, 2]``.
    """

    def __init__(self, base_channels: int = 64):
        super().__init__()
        c = base_channels
        self.layers = nn.Sequential(
            nn.ConvTranspose2d(4 * c, 2 * c, 3, stride=2, padding=1, output_padding=1),
            _norm(2 * c),
            nn.ReLU(),
            nn.ConvTranspose2d(2 * c, c, 3, stride=2, padding=1, output_padding=1),
            _norm(c),
            nn.ReLU(),
            nn.ConvTranspose2d(c, 3, 3, stride=2, padding=1, output_padding=1),
            nn.Tanh(),
        )

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        return RESIDUAL_SCALE * self.layers(features)


class ResidualGenerator(nn.Module):
    """Encoder + decoder producing a shadow residual for an input image."""

    def __init__(self, base_channels: int = 64, n_blocks: int = 9):
        super().__init__()
        self.encoder = ShadowTransformEncoder(base_channels, n_blocks)
        self.decoder = ShadowResidualDecoder(base_channels)

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        return self.encoder(x)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.decoder(self.encoder(x))


class PatchDiscriminator(nn.Module):
    """Four stride-2 convolutions and a 1-channel scoring convolution.

    Returns raw (unsquashed) patch scores of shape ``(N, 1, H/16, W/16)``.
    """

    def __init__(self, base_channels: int = 64):
        super().__init__()
        c = base_channels
        self.layers = nn.Sequential(
            nn.Conv2d(3, c, 4, stride=2, padding=1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(c, 2 * c, 4, stride=2, padding=1),
            _norm(2 * c),
            nn.LeakyReLU(0.2),
            nn.Conv2d(2 * c, 4 * c, 4, stride=2, padding=1),
            _norm(4 * c),
            nn.LeakyReLU(0.2),
            nn.Conv2d(4 * c, 8 * c, 4, stride=2, padding=1),
            _norm(8 * c),
            nn.LeakyReLU(0.2),
            nn.Conv2d(8 * c, 1, 3, stride=1, padding=1),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        _check_image_batch(x, "discriminator", min_size=32)
        return self.layers(x)


class SelectionClassifier(nn.Module):
    """Shadow / non-shadow classifier used to pick between the two branches.

    The body mirrors the discriminator (four stride-2 convolutions, instance
    norm on stages 2-4) with ReLU activations, followed by global average
    pooling and one linear unit. ``forward`` gives the probability that each
    image is a real shadow-free image; ``logits`` exposes the pre-sigmoid
    value for training.
    """

    def __init__(self, base_channels: int = 64):
        super().__init__()
        layers: list[nn.Module] = []
        c_in = 3
        for stage, c_out in enumerate((base_channels, 2 * base_channels, 4 * base_channels, 8 * base_channels)):
            layers.append(nn.Conv2d(c_in, c_out, 4, stride=2, padding=1))
            if stage > 0:
                layers.append(_norm(c_out))
            layers.append(nn.ReLU())
            c_in = c_out
        self.body = nn.Sequential(*layers)
        self.head = nn.Linear(c_in, 1)

    def logits(self, x: torch.Tensor) -> torch.Tensor:
        _check_image_batch(x, "classifier", min_size=32)
        return self.head(self.body(x).mean(dim=(2, 3))).squeeze(1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.logits(x))


class GeneratorPair(nn.Module):
    """The two residual generators, initialised from distinct seeds."""

    def __init__(
        self,
        seed1: int = 1,
        seed2: int = 2,
        base_channels: int = 64,
        n_blocks: int = 9,
        init_std: float = INIT_STD,
        allow_same_seed: bool = False,
    ):
        super().__init__()
        if seed1 == seed2 and not allow_same_seed:
            raise ValueError("generator seeds must differ so the two branches start apart")
        self.seed1, self.seed2 = int(seed1), int(seed2)
        self.g1 = build(ResidualGenerator, seed1, init_std, base_channels, n_blocks)
        self.g2 = build(ResidualGenerator, seed2, init_std, base_channels, n_blocks)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        return self.g1(x), self.g2(x)


def build(cls, seed: int, init_std: float = INIT_STD, *args, **kwargs) -> nn.Module:
    """Construct ``cls(*args, **kwargs)`` and seed its parameters.

    PyTorch's default layer initialisation draws from the global RNG; that
    draw is sandboxed so construction has no global side effects.
    """
    with torch.random.fork_rng(devices=[]):
        net = cls(*args, **kwargs)
    return init_params(net, seed, init_std)


def params_differ(a: nn.Module, b: nn.Module) -> bool:
    """True if at least one pair of corresponding tensors differs."""
    return any(not torch.equal(p, q) for p, q in zip(a.state_dict().values(), b.state_dict().values()))
