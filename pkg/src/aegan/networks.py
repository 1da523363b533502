"""The six AEGAN sub-networks built from one geometry description.

    H    encoder            image (B,3,R,R)      -> embedding (B,Ce,Se,Se)
    F    decoder            embedding            -> image in [-1, 1]
    G_E  embedding generator noise (B, noise_dim) -> embedding
    D_E  embedding critic   embedding            -> logits (B,)
    phi  denoiser           image                -> image in [-1, 1]
    D_R  image critic       image                -> logits (B,)

Strided layers use kernel 4, padding 1 so every block scales spatial extent
by exactly 2.  The decoder instance is shared between reconstruction and
generation.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from . import functional as F
from .nn import BatchNorm, Conv2d, ConvTranspose2d, Linear, Module
from .tensor import Tensor, make_result, as_tensor

SUBNETWORKS = ("H", "F", "G_E", "D_E", "phi", "D_R")


def _log2_exact(value: int, what: str) -> int:
    if value < 1 or value & (value - 1):
        raise ValueError(f"{what} must be a positive power of two, got {value}")
    return value.bit_length() - 1


@dataclass(frozen=True)
class NetworkConfig:
    resolution: int = 512
    embedding_spatial: int = 32
    embedding_channels: int = 64
    noise_dim: int = 100
    base_channels: int = 64
    generator_seed_spatial: int = 4
    denoiser_downsample: int = 8
    leaky_slope: float = 0.2

    def __post_init__(self) -> None:
        _log2_exact(self.resolution, "resolution")
        _log2_exact(self.embedding_spatial, "embedding_spatial")
        _log2_exact(self.generator_seed_spatial, "generator_seed_spatial")
        _log2_exact(self.denoiser_downsample, "denoiser_downsample")
        if self.embedding_spatial >= self.resolution:
            raise ValueError("embedding_spatial must be smaller than resolution")
        if self.generator_seed_spatial > self.embedding_spatial:
            raise ValueError("generator_seed_spatial must not exceed embedding_spatial")
        if self.denoiser_downsample >= self.resolution:
            raise ValueError("denoiser_downsample must be smaller than resolution")
        for name in ("embedding_channels", "noise_dim", "base_channels"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.embedding_size >= self.image_size:
            raise ValueError(
                f"embedding ({self.embedding_size} values) must be smaller than the image "
                f"({self.image_size} values)"
            )

    @classmethod
    def full(cls) -> "NetworkConfig":
        return cls()

    @classmethod
    def desk(cls, **overrides) -> "NetworkConfig":
        values = dict(resolution=64, embedding_spatial=8, embedding_channels=64, base_channels=32)
        values.update(overrides)
        return cls(**values)

    def replace(self, **changes) -> "NetworkConfig":
        return dataclasses.replace(self, **changes)

    @property
    def encoder_blocks(self) -> int:
        return _log2_exact(self.resolution // self.embedding_spatial, "resolution/embedding_spatial")

    @property
    def decoder_blocks(self) -> int:
        return self.encoder_blocks

    @property
    def generator_blocks(self) -> int:
        return _log2_exact(self.embedding_spatial // self.generator_seed_spatial, "embedding/seed spatial")

    @property
    def denoiser_blocks(self) -> int:
        return _log2_exact(self.denoiser_downsample, "denoiser_downsample")

    @property
    def embedding_shape(self) -> tuple[int, int, int]:
        return (self.embedding_channels, self.embedding_spatial, self.embedding_spatial)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return (3, self.resolution, self.resolution)

    @property
    def embedding_size(self) -> int:
        return self.embedding_channels * self.embedding_spatial**2

    @property
    def image_size(self) -> int:
        return 3 * self.resolution**2

    @property
    def compression_ratio(self) -> float:
        return self.image_size / self.embedding_size

    def channels(self, spatial: int) -> int:
        """Feature width at a given spatial extent: doubles per halving, clamped to [base, 8*base]."""
        width = self.base_channels * self.resolution // (2 * spatial)
        return int(min(max(width, self.base_channels), 8 * self.base_channels))


def _check_shape(x: Tensor, expected: tuple[int, ...], what: str) -> None:
    if tuple(x.shape[1:]) != tuple(expected):
        raise ValueError(f"{what}: expected input shape (B, {', '.join(map(str, expected))}), got {x.shape}")


class ResidualBlock(Module):
    """Two 3x3 conv + BN layers with an identity skip."""

    def __init__(self, channels: int, rng, slope: float):
        super().__init__()
        self.slope = slope
        self.conv1 = Conv2d(channels, channels, 3, 1, 1, rng, bias=False)
        self.bn1 = BatchNorm(channels, rng)
        self.conv2 = Conv2d(channels, channels, 3, 1, 1, rng, bias=False)
        self.bn2 = BatchNorm(channels, rng)

    def forward(self, x):
        y = F.leaky_relu(self.bn1(self.conv1(x)), self.slope)
        y = self.bn2(self.conv2(y))
        return F.leaky_relu(x + y, self.slope)

    def out_shape(self, shape):
        return self.conv2.out_shape(self.conv1.out_shape(shape))


class DownBlock(Module):
    def __init__(self, cin: int, cout: int, rng, slope: float, residual: bool = True, norm: bool = True):
        super().__init__()
        self.slope = slope
        self.conv = Conv2d(cin, cout, 4, 2, 1, rng, bias=not norm)
        self.bn = BatchNorm(cout, rng) if norm else None
        self.res = ResidualBlock(cout, rng, slope) if residual else None

    def forward(self, x):
        y = self.conv(x)
        if self.bn is not None:
            y = self.bn(y)
        y = F.leaky_relu(y, self.slope)
        return self.res(y) if self.res is not None else y

    def out_shape(self, shape):
        shape = self.conv.out_shape(shape)
        return self.res.out_shape(shape) if self.res is not None else shape


class UpBlock(Module):
    def __init__(self, cin: int, cout: int, rng, residual: bool = True):
        super().__init__()
        self.deconv = ConvTranspose2d(cin, cout, 4, 2, 1, rng, bias=False)
        self.bn = BatchNorm(cout, rng)
        self.res = ResidualBlock(cout, rng, 0.0) if residual else None

    def forward(self, x):
        y = F.relu(self.bn(self.deconv(x)))
        return self.res(y) if self.res is not None else y

    def out_shape(self, shape):
        shape = self.deconv.out_shape(shape)
        return self.res.out_shape(shape) if self.res is not None else shape


class Encoder(Module):
    def __init__(self, cfg: NetworkConfig, rng):
        super().__init__()
        self.cfg = cfg
        blocks, cin, spatial = [], 3, cfg.resolution
        for _ in range(cfg.encoder_blocks):
            spatial //= 2
            cout = cfg.channels(spatial)
            blocks.append(DownBlock(cin, cout, rng, cfg.leaky_slope))
            cin = cout
        self.down = blocks
        self.head = Conv2d(cin, cfg.embedding_channels, 3, 1, 1, rng)

    def forward(self, x):
        _check_shape(x, self.cfg.image_shape, "encode")
        for block in self.down:
            x = block(x)
        return self.head(x)

    def out_shape(self, shape):
        for block in self.down:
            shape = block.out_shape(shape)
        return self.head.out_shape(shape)


class Decoder(Module):
    def __init__(self, cfg: NetworkConfig, rng):
        super().__init__()
        self.cfg = cfg
        spatial = cfg.embedding_spatial
        cin = cfg.channels(spatial)
        self.stem = Conv2d(cfg.embedding_channels, cin, 3, 1, 1, rng, bias=False)
        self.stem_bn = BatchNorm(cin, rng)
        blocks = []
        for _ in range(cfg.decoder_blocks):
            spatial *= 2
            cout = cfg.channels(spatial)
            blocks.append(UpBlock(cin, cout, rng))
            cin = cout
        self.up = blocks
        self.head = Conv2d(cin, 3, 3, 1, 1, rng)

    def forward(self, e):
        _check_shape(e, self.cfg.embedding_shape, "decode")
        x = F.relu(self.stem_bn(self.stem(e)))
        for block in self.up:
            x = block(x)
        return F.tanh(self.head(x))

    def out_shape(self, shape):
        shape = self.stem.out_shape(shape)
        for block in self.up:
            shape = block.out_shape(shape)
        return self.head.out_shape(shape)


class EmbeddingGenerator(Module):
    def __init__(self, cfg: NetworkConfig, rng):
        super().__init__()
        self.cfg = cfg
        spatial = cfg.generator_seed_spatial
        cin = cfg.channels(spatial)
        self.seed_channels = cin
        self.project = Linear(cfg.noise_dim, cin * spatial * spatial, rng, bias=False)
        self.project_bn = BatchNorm(cin, rng)
        blocks = []
        for _ in range(cfg.generator_blocks):
            spatial *= 2
            cout = cfg.channels(spatial)
            blocks.append(UpBlock(cin, cout, rng))
            cin = cout
        self.up = blocks
        self.head = Conv2d(cin, cfg.embedding_channels, 3, 1, 1, rng)

    def forward(self, z):
        z = as_tensor(z)
        if z.ndim != 2 or z.shape[1] != self.cfg.noise_dim:
            raise ValueError(f"generate_embedding: expected noise of shape (B, {self.cfg.noise_dim}), got {z.shape}")
        s = self.cfg.generator_seed_spatial
        x = self.project(z).reshape(z.shape[0], self.seed_channels, s, s)
        x = F.relu(self.project_bn(x))
        for block in self.up:
            x = block(x)
        return self.head(x)

    def out_shape(self, shape):
        s = self.cfg.generator_seed_spatial
        (flat,) = self.project.out_shape(tuple(shape))
        shape = (flat // (s * s), s, s)
        for block in self.up:
            shape = block.out_shape(shape)
        return self.head.out_shape(shape)


class Discriminator(Module):
    """Stride-2 convolutions down to 4x4, then one linear logit.

    With ``residual`` each stride-2 layer is followed by a residual unit, as in
    the encoder's down-sampling blocks.  The first layer skips BN unless
    ``first_norm`` is set.
    """

    def __init__(
        self,
        in_shape: tuple[int, int, int],
        base: int,
        rng,
        slope: float,
        residual: bool = False,
        first_norm: bool = False,
    ):
        super().__init__()
        self.in_shape = tuple(in_shape)
        self.slope = slope
        cin, spatial, _ = in_shape
        layers, width = [], base
        while spatial > 4:
            layers.append(DownBlock(cin, width, rng, slope, residual=residual, norm=first_norm or bool(layers)))
            spatial //= 2
            cin, width = width, min(width * 2, 8 * base)
        self.layers = layers
        self.head = Linear(cin * spatial * spatial, 1, rng)

    def forward(self, x):
        _check_shape(x, self.in_shape, "discriminate")
        for layer in self.layers:
            x = layer(x)
        return self.head(x.reshape(x.shape[0], -1)).reshape(x.shape[0])

    def out_shape(self, shape):
        for layer in self.layers:
            shape = layer.out_shape(shape)
        self.head.out_shape((int(np.prod(shape)),))
        return ()


def _atanh(x: Tensor, limit: float = 0.999) -> Tensor:
    clipped = np.clip(x.data, -limit, limit)
    inside = (np.abs(x.data) < limit).astype(x.dtype)
    return make_result(np.arctanh(clipped), (x,), lambda g: (g * inside / (1.0 - clipped**2),))


class Denoiser(Module):
    """Encoder-decoder refiner.

    Down modules (conv + BN + LeakyReLU) shrink the image by ``denoiser_downsample``;
    mirrored up modules (deconv + BN + ReLU) restore it.  The last deconv emits a
    3-channel correction added to ``atanh(x)`` before the output ``tanh``, so a
    freshly initialized denoiser is close to the identity.
    """

    def __init__(self, cfg: NetworkConfig, rng):
        super().__init__()
        self.cfg = cfg
        spatial, cin, widths = cfg.resolution, 3, []
        down = []
        for _ in range(cfg.denoiser_blocks):
            spatial //= 2
            cout = cfg.channels(spatial)
            down.append(DownBlock(cin, cout, rng, cfg.leaky_slope, residual=False))
            widths.append(cin)
            cin = cout
        self.down = down
        up = []
        for target in reversed(widths[1:]):
            up.append(UpBlock(cin, target, rng, residual=False))
            cin = target
        self.up = up
        self.head = ConvTranspose2d(cin, 3, 4, 2, 1, rng)

    def forward(self, x):
        _check_shape(x, self.cfg.image_shape, "denoise")
        y = x
        for block in self.down:
            y = block(y)
        for block in self.up:
            y = block(y)
        return F.tanh(_atanh(x) + self.head(y))

    def out_shape(self, shape):
        inner = shape
        for block in self.down + self.up:
            inner = block.out_shape(inner)
        out = self.head.out_shape(inner)
        if out != tuple(shape):
            raise ValueError(f"denoiser correction shape {out} differs from input {shape}")
        return out


class AEGAN(Module):
    """Container for all six sub-networks; parameter names are prefixed by sub-network."""

    def __init__(self, cfg: NetworkConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        rngs = [np.random.default_rng([seed, i]) for i in range(len(SUBNETWORKS))]
        self.H = Encoder(cfg, rngs[0])
        self.F = Decoder(cfg, rngs[1])
        self.G_E = EmbeddingGenerator(cfg, rngs[2])
        # the embedding is only a few stride-2 steps from 4x4, so its critic needs the extra depth;
        # embeddings are unbounded with uneven channel scales, so its first layer is normalized too
        self.D_E = Discriminator(
            cfg.embedding_shape, cfg.base_channels, rngs[3], cfg.leaky_slope, residual=True, first_norm=True
        )
        self.phi = Denoiser(cfg, rngs[4])
        self.D_R = Discriminator(cfg.image_shape, cfg.base_channels, rngs[5], cfg.leaky_slope)

    def forward(self, z):
        return self.sample_from_noise(z)

    def sub(self, name: str) -> Module:
        if name not in SUBNETWORKS:
            raise KeyError(f"unknown sub-network {name!r}; expected one of {SUBNETWORKS}")
        return getattr(self, name)

    def encode(self, image):
        return self.H(image)

    def decode(self, embedding):
        return self.F(embedding)

    def generate_embedding(self, z):
        return self.G_E(z)

    def discriminate_embedding(self, embedding):
        return self.D_E(embedding)

    def denoise(self, image):
        return self.phi(image)

    def discriminate_image(self, image):
        return self.D_R(image)

    def reconstruct(self, image):
        return self.F(self.H(image))

    def sample_from_noise(self, z, denoise: bool = True):
        x = self.F(self.G_E(z))
        return self.phi(x) if denoise else x

    def trace_shapes(self, batch: int = 1) -> dict[str, tuple[int, ...]]:
        """Shapes along every path, from the size formulas alone (no arithmetic on tensors)."""
        image = self.cfg.image_shape
        noise = (self.cfg.noise_dim,)
        embedding = self.G_E.out_shape(noise)
        shapes = {
            "noise": noise,
            "generated_embedding": embedding,
            "encoded_embedding": self.H.out_shape(image),
            "decoded_image": self.F.out_shape(embedding),
            "denoised_image": self.phi.out_shape(self.F.out_shape(embedding)),
            "embedding_logits": self.D_E.out_shape(embedding),
            "image_logits": self.D_R.out_shape(image),
        }
        return {k: (batch, *v) for k, v in shapes.items()}
