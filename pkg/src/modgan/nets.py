"""The five module kinds: generator, encoder, transformer, reconstructor, discriminator.

Every module that produces or consumes an intermediate representation uses the
same feature-map shape ``(feat_channels, h/4, w/4)``, so transformers can be
chained in any order between an encoder (or generator) and the reconstructor.

Channel counts are the full-size architecture scaled by a single
``width`` multiplier (``width=1`` gives 64/128/256 for the encoder and
64..2048 for the discriminator).
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F


class ShapeError(ValueError):
    pass


@dataclass(frozen=True)
class NetSpec:
    """Size parameters shared by every module of one model."""

    image_size: int = 64
    width: float = 1.0
    z_dim: int = 64
    n_res: int = 6
    d_layers: int = 6

    def ch(self, base: int) -> int:
        return max(1, int(round(base * self.width)))

    @property
    def feat_channels(self) -> int:
        return self.ch(256)

    @property
    def feat_size(self) -> int:
        return self.image_size // 4

    def check(self) -> None:
        if self.image_size % 4:
            raise ShapeError(f"image size {self.image_size} not divisible by 4")
        if self.image_size % (2 ** self.d_layers):
            raise ShapeError(
                f"image size {self.image_size} not divisible by 2**d_layers={2 ** self.d_layers}"
            )


def init_weights(module: nn.Module) -> None:
    """N(0, 0.02) conv weights, zero biases; instance-norm affine left at (1, 0)."""
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
            nn.init.normal_(m.weight, 0.0, 0.02)
            if m.bias is not None:
                nn.init.zeros_(m.bias)


def _conv_in_relu(c_in: int, c_out: int, k: int, s: int, p: int) -> list[nn.Module]:
    return [
        nn.Conv2d(c_in, c_out, k, s, p, bias=False),
        nn.InstanceNorm2d(c_out, affine=True),
        nn.ReLU(inplace=True),
    ]


def _deconv_in_relu(c_in: int, c_out: int, k: int, s: int, p: int) -> list[nn.Module]:
    return [
        nn.ConvTranspose2d(c_in, c_out, k, s, p, bias=False),
        nn.InstanceNorm2d(c_out, affine=True),
        nn.ReLU(inplace=True),
    ]


class ResidualBlock(nn.Module):
    """x + ReLU(IN(conv3x3(x))): a single conv per block."""

    def __init__(self, channels: int):
        super().__init__()
        self.body = nn.Sequential(*_conv_in_relu(channels, channels, 3, 1, 1))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x + self.body(x)


class Encoder(nn.Module):
    kind = "E"

    def __init__(self, spec: NetSpec):
        super().__init__()
        spec.check()
        self.spec = spec
        c1, c2, c3 = spec.ch(64), spec.ch(128), spec.feat_channels
        layers = _conv_in_relu(3, c1, 7, 1, 3)
        layers += _conv_in_relu(c1, c2, 4, 2, 1)
        layers += _conv_in_relu(c2, c3, 4, 2, 1)
        layers += [ResidualBlock(c3) for _ in range(spec.n_res)]
        self.main = nn.Sequential(*layers)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] % 4 or x.shape[-2] % 4:
            raise ShapeError(f"encoder input {tuple(x.shape)} not divisible by 4")
        return self.main(x)


class Generator(nn.Module):
    """Noise plus content condition to a feature map via four transposed convs.

    The first layer's kernel equals ``image_size / 32`` so the output lands on
    ``(h/32, w/32)`` from a 1x1 input; the remaining three double the size.
    Instance norm is skipped on a 1x1 output (32px images), where it is undefined.
    """

    kind = "G"

    def __init__(self, spec: NetSpec, c0: int):
        super().__init__()
        spec.check()
        if spec.image_size % 32:
            raise ShapeError(f"generator needs image size divisible by 32, got {spec.image_size}")
        self.spec = spec
        self.c0 = c0
        k0 = spec.image_size // 32
        chans = [spec.ch(2048), spec.ch(1024), spec.ch(512), spec.feat_channels]
        layers = _deconv_in_relu(spec.z_dim + c0, chans[0], k0, 1, 0)
        if k0 == 1:
            del layers[1]
        for a, b in zip(chans, chans[1:]):
            layers += _deconv_in_relu(a, b, 4, 2, 1)
        self.main = nn.Sequential(*layers)

    def forward(self, z: torch.Tensor, a0: torch.Tensor) -> torch.Tensor:
        h = torch.cat([z, a0.to(z.dtype)], dim=1)
        return self.main(h[:, :, None, None])


def blend(f: torch.Tensor, f_prime: torch.Tensor, g: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Alpha-blend two feature maps with a tanh-range gate ``g``.

    Returns ``(f_t, g')`` where ``g' = (1 + g) / 2`` and
    ``f_t = g' * f' + (1 - g') * f`` (``g'`` broadcast over channels).
    """
    g_prime = (1.0 + g) / 2.0
    return g_prime * f_prime + (1.0 - g_prime) * f, g_prime


class Transformer(nn.Module):
    """Mask-gated feature-map transformer for one attribute."""

    kind = "T"

    def __init__(self, spec: NetSpec, n_values: int, use_mask: bool = True):
        super().__init__()
        self.spec = spec
        self.n_values = n_values
        self.use_mask = use_mask
        c = spec.feat_channels
        layers = _conv_in_relu(c + n_values, c, 3, 1, 1)
        layers += [ResidualBlock(c) for _ in range(spec.n_res)]
        self.body = nn.Sequential(*layers)
        self.mask = nn.Conv2d(c, 1, 7, 1, 3)

    def forward(
        self, f: torch.Tensor, a: torch.Tensor
    ) -> tuple[torch.Tensor, torch.Tensor | None]:
        """Return ``(f_t, g')``; ``g'`` is None when the mask is disabled."""
        if f.shape[1] != self.spec.feat_channels or a.shape[-1] != self.n_values:
            raise ShapeError(
                f"transformer expects {self.spec.feat_channels} channels and a condition of "
                f"length {self.n_values}, got {tuple(f.shape)} and {tuple(a.shape)}"
            )
        cond = a.to(f.dtype)[:, :, None, None].expand(-1, -1, f.shape[2], f.shape[3])
        f_prime = self.body(torch.cat([f, cond], dim=1))
        if not self.use_mask:
            return f_prime, None
        g = torch.tanh(self.mask(f_prime))
        return blend(f, f_prime, g)


class Reconstructor(nn.Module):
    kind = "R"

    def __init__(self, spec: NetSpec):
        super().__init__()
        self.spec = spec
        c, c2, c1 = spec.feat_channels, spec.ch(128), spec.ch(64)
        layers = _conv_in_relu(c, c2, 7, 1, 3)
        layers += _deconv_in_relu(c2, c1, 4, 2, 1)
        layers += [nn.ConvTranspose2d(c1, 3, 4, 2, 1), nn.Tanh()]
        self.main = nn.Sequential(*layers)

    def forward(self, f: torch.Tensor) -> torch.Tensor:
        if f.shape[1] != self.spec.feat_channels:
            raise ShapeError(f"reconstructor expects {self.spec.feat_channels} channels, got {f.shape[1]}")
        return self.main(f)


class Discriminator(nn.Module):
    """Critic with a realism map head and an attribute-logit head.

    Neither head is normalized or activated: the realism map is an unbounded
    Wasserstein score and the logits feed a softmax cross-entropy.
    """

    kind = "D"

    def __init__(self, spec: NetSpec, n_values: int):
        super().__init__()
        spec.check()
        self.spec = spec
        self.n_values = n_values
        layers: list[nn.Module] = []
        c_in = 3
        for i in range(spec.d_layers):
            c_out = spec.ch(64 * 2**i)
            layers += [nn.Conv2d(c_in, c_out, 4, 2, 1), nn.LeakyReLU(0.01)]
            c_in = c_out
        self.main = nn.Sequential(*layers)
        self.realism = nn.Conv2d(c_in, 1, 3, 1, 1, bias=False)
        k = spec.image_size // 2**spec.d_layers
        self.classify = nn.Conv2d(c_in, n_values, k, 1, 0, bias=False)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        if x.shape[-1] != self.spec.image_size or x.shape[-2] != self.spec.image_size:
            raise ShapeError(
                f"discriminator built for {self.spec.image_size}px input, got {tuple(x.shape)}"
            )
        h = self.main(x)
        return self.realism(h), self.classify(h).flatten(1)


def realism_score(realism_map: torch.Tensor) -> torch.Tensor:
    """Per-sample scalar critic score: mean over the spatial realism map."""
    return realism_map.flatten(1).mean(dim=1)


def count_params(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


class ModularGAN(nn.Module):
    """Container for all modules of one model, keyed by schema attribute order.

    ``transformers[i]`` and ``discriminators[i]`` own attribute ``i``. For the
    generation task ``generator`` and ``content_disc`` (the content critic
    scoring ``R(G(z, a0))``) are present and ``encoder`` may be absent.
    """

    def __init__(
        self,
        spec: NetSpec,
        value_counts: list[int],
        *,
        with_encoder: bool = True,
        content_values: int | None = None,
        use_mask: bool = True,
    ):
        super().__init__()
        self.spec = spec
        self.value_counts = list(value_counts)
        self.encoder = Encoder(spec) if with_encoder else None
        self.generator = Generator(spec, content_values) if content_values else None
        self.content_disc = Discriminator(spec, content_values) if content_values else None
        self.transformers = nn.ModuleList(
            Transformer(spec, c, use_mask=use_mask) for c in value_counts
        )
        self.reconstructor = Reconstructor(spec)
        self.discriminators = nn.ModuleList(Discriminator(spec, c) for c in value_counts)
        init_weights(self)

    def generator_side(self) -> list[nn.Module]:
        mods: list[nn.Module] = [self.reconstructor, *self.transformers]
        if self.encoder is not None:
            mods.insert(0, self.encoder)
        if self.generator is not None:
            mods.insert(0, self.generator)
        return mods

    def critic_side(self) -> list[nn.Module]:
        mods: list[nn.Module] = list(self.discriminators)
        if self.content_disc is not None:
            mods.append(self.content_disc)
        return mods

    def named_blocks(self) -> dict[str, nn.Module]:
        """Stable block names used for checkpoint files."""
        out: dict[str, nn.Module] = {}
        if self.generator is not None:
            out["G"] = self.generator
        if self.encoder is not None:
            out["E"] = self.encoder
        for i, t in enumerate(self.transformers):
            out[f"T{i}"] = t
        out["R"] = self.reconstructor
        for i, d in enumerate(self.discriminators):
            out[f"D{i}"] = d
        if self.content_disc is not None:
            out["D_content"] = self.content_disc
        return out
