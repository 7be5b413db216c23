"""Network definitions for the DSED baseline and the FEN beta-VAE."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import torch
from torch import nn

from .errors import ConfigurationError
from .losses import GaussianParams, reparameterize

FEATURE_SIZE = 4  # spatial extent of the last encoder feature map


@dataclass(frozen=True)
class StyleLabel:
    index: int
    name: str


@dataclass
class LatentCode:
    mu: torch.Tensor
    logvar: torch.Tensor
    sample: torch.Tensor
    content_dim: int

    def __post_init__(self):
        n = self.sample.shape[-1]
        if not (self.mu.shape == self.logvar.shape == self.sample.shape):
            raise ValueError("mu, logvar and sample must share a shape")
        if not 0 <= self.content_dim <= n:
            raise ValueError(f"content_dim {self.content_dim} outside [0, {n}]")


@dataclass(frozen=True)
class ModelConfig:
    image_channels: int = 3
    image_size: int = 32
    latent_dim: int = 32
    content_dim: int = 12
    num_styles: int = 3
    encoder_channels: tuple[int, ...] = (32, 32, 64, 64)
    variant: str = "fen"

    def __post_init__(self):
        object.__setattr__(self, "encoder_channels", tuple(int(c) for c in self.encoder_channels))
        if self.variant not in ("dsed", "fen"):
            raise ConfigurationError(f"variant must be 'dsed' or 'fen', got {self.variant!r}")
        if len(self.encoder_channels) != 4:
            raise ConfigurationError("encoder_channels must list exactly 4 layer widths")
        if self.num_styles < 1 or (self.variant == "fen" and self.num_styles < 2):
            raise ConfigurationError(f"num_styles={self.num_styles} too small for {self.variant}")
        if self.latent_dim < 1:
            raise ConfigurationError("latent_dim must be positive")
        if not 0 <= self.content_dim < self.latent_dim:
            raise ConfigurationError(
                f"content_dim must satisfy 0 <= content_dim < latent_dim, "
                f"got {self.content_dim} and {self.latent_dim}"
            )
        if self.variant == "fen" and self.content_dim < 1:
            raise ConfigurationError("fen needs a nonempty content slice")
        downsampling_stages(self.image_size)

    @property
    def style_dim(self) -> int:
        return self.latent_dim - self.content_dim

    def to_dict(self) -> dict:
        d = asdict(self)
        d["encoder_channels"] = list(self.encoder_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)

    @classmethod
    def with_content_fraction(cls, latent_dim: int, content: int, style: int, **kw) -> "ModelConfig":
        """Scale a content:style ratio (e.g. 20:12) to an arbitrary latent size."""
        content_dim = (latent_dim * content) // (content + style)
        return cls(latent_dim=latent_dim, content_dim=content_dim, **kw)


def downsampling_stages(image_size: int) -> int:
    """Number of stride-2 stages needed to reach a 4x4 map (at most 4)."""
    if image_size % 8 or image_size < 8:
        raise ConfigurationError(f"image_size must be divisible by 8, got {image_size}")
    ratio = image_size // FEATURE_SIZE
    stages = ratio.bit_length() - 1
    if 1 << stages != ratio or stages > 4:
        raise ConfigurationError(
            f"image_size {image_size} does not reduce to {FEATURE_SIZE}x{FEATURE_SIZE} "
            "with four conv layers"
        )
    return stages


def _strides(image_size: int) -> list[int]:
    n = downsampling_stages(image_size)
    return [2] * n + [1] * (4 - n)


def _fan_in(module: nn.Module) -> int:
    w = module.weight
    if isinstance(module, nn.Linear):
        return w.shape[1]
    if isinstance(module, nn.ConvTranspose2d):
        s = module.stride[0] * module.stride[1]
        return max(1, w.shape[0] * w.shape[2] * w.shape[3] // s)
    return w.shape[1] * w.shape[2] * w.shape[3]


def init_uniform_fan_in(module: nn.Module, generator: torch.Generator, gain: float = 1.0) -> None:
    """Uniform(-b, b) weights with b = gain * sqrt(3 / fan_in); zero biases."""
    for m in module.modules():
        if isinstance(m, (nn.Linear, nn.Conv2d, nn.ConvTranspose2d)):
            bound = gain * math.sqrt(3.0 / _fan_in(m))
            with torch.no_grad():
                m.weight.copy_(torch.rand(m.weight.shape, generator=generator) * 2 * bound - bound)
                if m.bias is not None:
                    m.bias.zero_()


RELU_GAIN = math.sqrt(2.0)


def latent_from_features(features: torch.Tensor, latent_dim: int | None = None,
                         projection: nn.Linear | None = None) -> GaussianParams:
    """Average each filter over its spatial map and read the pooled vector as (mu, logvar).

    With C pooled channels and ``2 * latent_dim == C`` the first half is mu and
    the second half logvar. Otherwise ``projection`` maps C values to
    ``2 * latent_dim``.
    """
    if features.dim() != 4 or features.shape[2:] != (FEATURE_SIZE, FEATURE_SIZE):
        raise ValueError(
            f"expected (batch, C, {FEATURE_SIZE}, {FEATURE_SIZE}) features, got {tuple(features.shape)}"
        )
    pooled = features.mean(dim=(2, 3))
    if projection is not None:
        pooled = projection(pooled)
    if pooled.shape[1] % 2:
        raise ValueError(f"cannot split {pooled.shape[1]} pooled values into mu and logvar")
    half = pooled.shape[1] // 2
    if latent_dim is not None and half != latent_dim:
        raise ValueError(f"pooled vector gives latent size {half}, expected {latent_dim}")
    return GaussianParams(pooled[:, :half], pooled[:, half:])


class Encoder(nn.Module):
    """Four conv layers down to a C x 4 x 4 map, then a Gaussian head.

    ``fen`` encoders average each filter spatially (projecting when the
    channel count is not 2 * latent_dim); ``dsed`` encoders flatten the map
    into a fully connected layer, as in the original beta-VAE.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        layers: list[nn.Module] = []
        in_ch = cfg.image_channels
        strides = _strides(cfg.image_size)
        for i, (out_ch, stride) in enumerate(zip(cfg.encoder_channels, strides)):
            if stride == 2:
                layers.append(nn.Conv2d(in_ch, out_ch, 4, stride=2, padding=1))
            else:
                layers.append(nn.Conv2d(in_ch, out_ch, 3, stride=1, padding=1))
            if i < 3:
                layers.append(nn.ReLU())
            in_ch = out_ch
        self.features = nn.Sequential(*layers)
        feat_ch = cfg.encoder_channels[-1]
        self.projection: nn.Linear | None = None
        if cfg.variant == "dsed":
            self.projection = nn.Linear(feat_ch * FEATURE_SIZE**2, 2 * cfg.latent_dim)
        elif 2 * cfg.latent_dim != feat_ch:
            self.projection = nn.Linear(feat_ch, 2 * cfg.latent_dim)

    def forward(self, x: torch.Tensor) -> GaussianParams:
        feats = self.features(x)
        if self.cfg.variant == "dsed":
            out = self.projection(torch.relu(feats).flatten(1))
            d = self.cfg.latent_dim
            return GaussianParams(out[:, :d], out[:, d:])
        return latent_from_features(feats, self.cfg.latent_dim, self.projection)


class Decoder(nn.Module):
    """Mirror of the encoder: linear seed to C x 4 x 4, transposed convs, sigmoid."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        chans = list(cfg.encoder_channels)
        self.seed = nn.Linear(cfg.latent_dim, chans[-1] * FEATURE_SIZE**2)
        strides = _strides(cfg.image_size)[::-1]
        outs = chans[::-1][1:] + [cfg.image_channels]
        layers: list[nn.Module] = []
        in_ch = chans[-1]
        for i, (out_ch, stride) in enumerate(zip(outs, strides)):
            if stride == 2:
                layers.append(nn.ConvTranspose2d(in_ch, out_ch, 4, stride=2, padding=1))
            else:
                layers.append(nn.Conv2d(in_ch, out_ch, 3, stride=1, padding=1))
            layers.append(nn.ReLU() if i < 3 else nn.Sigmoid())
            in_ch = out_ch
        self.body = nn.Sequential(*layers)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        h = torch.relu(self.seed(z)).view(-1, self.cfg.encoder_channels[-1], FEATURE_SIZE, FEATURE_SIZE)
        return self.body(h)

    @torch.no_grad()
    def init_output_bias(self, pixel_mean: torch.Tensor) -> None:
        """Start the sigmoid output at the given per-channel mean instead of 0.5.

        On mostly dark images a 0.5 start lets early steps drive every output
        into the saturated region, where MSE gradients through the sigmoid
        vanish and the decoder stays all dark.
        """
        p = torch.as_tensor(pixel_mean, dtype=torch.float32).clamp(1e-3, 1 - 1e-3)
        if p.shape != (self.cfg.image_channels,):
            raise ValueError(f"pixel_mean must have shape ({self.cfg.image_channels},), got {tuple(p.shape)}")
        self.body[-2].bias.copy_(torch.log(p / (1 - p)))


class StyleHead(nn.Module):
    """Single affine layer with per-class sigmoid outputs."""

    def __init__(self, in_features: int, num_styles: int):
        super().__init__()
        self.linear = nn.Linear(in_features, num_styles)

    def forward(self, v: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.linear(v))


def _generator(seed: int) -> torch.Generator:
    return torch.Generator().manual_seed(int(seed))


def build_encoder(cfg: ModelConfig, seed: int = 0, generator: torch.Generator | None = None) -> Encoder:
    gen = generator if generator is not None else _generator(seed)
    enc = Encoder(cfg)
    init_uniform_fan_in(enc.features, gen, RELU_GAIN)
    last_conv = enc.features[-1]
    init_uniform_fan_in(last_conv, gen, 1.0 / math.sqrt(3.0))
    if enc.projection is not None:
        init_uniform_fan_in(enc.projection, gen, 1.0 / math.sqrt(3.0))
    return enc


def build_decoder(cfg: ModelConfig, seed: int = 0, generator: torch.Generator | None = None) -> Decoder:
    gen = generator if generator is not None else _generator(seed)
    dec = Decoder(cfg)
    init_uniform_fan_in(dec, gen, RELU_GAIN)
    init_uniform_fan_in(dec.body[-2], gen, 1.0)
    return dec


def build_head(in_features: int, num_styles: int, generator: torch.Generator) -> StyleHead:
    head = StyleHead(in_features, num_styles)
    init_uniform_fan_in(head, generator, 1.0)
    return head


class FENModel(nn.Module):
    """Shared encoder/decoder plus Friend (style slice) and Enemy (content slice) heads."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        super().__init__()
        if cfg.variant != "fen":
            raise ConfigurationError("FENModel needs variant='fen'")
        self.cfg = cfg
        gen = _generator(seed)
        self.encoder = build_encoder(cfg, generator=gen)
        self.decoder = build_decoder(cfg, generator=gen)
        self.friend = build_head(cfg.style_dim, cfg.num_styles, gen)
        self.enemy = build_head(cfg.content_dim, cfg.num_styles, gen)

    def autoencoder_parameters(self):
        return list(self.encoder.parameters()) + list(self.decoder.parameters())

    def head_parameters(self):
        return list(self.friend.parameters()) + list(self.enemy.parameters())


class DSEDModel(nn.Module):
    """One independent encoder and decoder per style."""

    def __init__(self, cfg: ModelConfig, style_names: Sequence[str], seed: int = 0):
        super().__init__()
        if cfg.variant != "dsed":
            raise ConfigurationError("DSEDModel needs variant='dsed'")
        if len(style_names) != cfg.num_styles or len(set(style_names)) != len(style_names):
            raise ConfigurationError(
                f"need {cfg.num_styles} distinct style names, got {list(style_names)}"
            )
        self.cfg = cfg
        self.style_names = list(style_names)
        gen = _generator(seed)
        self.encoders = nn.ModuleList(build_encoder(cfg, generator=gen) for _ in style_names)
        self.decoders = nn.ModuleList(build_decoder(cfg, generator=gen) for _ in style_names)


def build_model(cfg: ModelConfig, style_names: Sequence[str], seed: int = 0) -> nn.Module:
    if cfg.variant == "dsed":
        return DSEDModel(cfg, style_names, seed)
    return FENModel(cfg, seed)


@dataclass
class DSEDOutput:
    """``recon[s][t]`` decodes the style-s latent with decoder t; compare to style t."""

    recon: list[list[torch.Tensor]]
    params: list[GaussianParams]
    samples: list[torch.Tensor] = field(default_factory=list)


def _style_order(styles: Sequence[str], model_styles: Sequence[str]) -> list[int]:
    if sorted(styles) != sorted(model_styles) or len(set(styles)) != len(styles):
        raise ValueError(f"triplet styles {list(styles)} do not match model styles {list(model_styles)}")
    return [list(styles).index(name) for name in model_styles]


def dsed_forward(images: torch.Tensor, styles: Sequence[str], model: DSEDModel,
                 generator: torch.Generator) -> DSEDOutput:
    """Route each style through its own encoder and every latent through every decoder.

    ``images`` is ``(batch, K, C, H, W)`` with axis 1 ordered as ``styles``;
    outputs are indexed in the model's style order.
    """
    order = _style_order(styles, model.style_names)
    params, samples = [], []
    for s, enc in enumerate(model.encoders):
        g = enc(images[:, order[s]])
        params.append(g)
        samples.append(reparameterize(g, generator))
    recon = [[dec(z) for dec in model.decoders] for z in samples]
    return DSEDOutput(recon, params, samples)


@dataclass
class FENOutput:
    recon: torch.Tensor
    params: GaussianParams
    code: LatentCode
    friend_probs: torch.Tensor
    enemy_probs: torch.Tensor


def split_latent(code: LatentCode) -> tuple[torch.Tensor, torch.Tensor]:
    c = code.content_dim
    return code.sample[..., :c], code.sample[..., c:]


def fen_forward(images: torch.Tensor, labels: torch.Tensor | None, model: FENModel,
                generator: torch.Generator) -> FENOutput:
    cfg = model.cfg
    expected = (cfg.image_channels, cfg.image_size, cfg.image_size)
    if tuple(images.shape[1:]) != expected:
        raise ValueError(f"images must be (batch, {expected}), got {tuple(images.shape)}")
    if labels is not None and ((labels < 0) | (labels >= cfg.num_styles)).any():
        raise ValueError(f"style labels must lie in [0, {cfg.num_styles})")
    g = model.encoder(images)
    z = reparameterize(g, generator)
    code = LatentCode(g.mu, g.logvar, z, cfg.content_dim)
    content, style = split_latent(code)
    return FENOutput(
        recon=model.decoder(z),
        params=g,
        code=code,
        friend_probs=model.friend(style),
        enemy_probs=model.enemy(content),
    )
