"""Variational autoencoders for the state, coarse precipitation and high-resolution precipitation.

Each codec resamples its input to a square working grid of
``latent_size * 2**n_down`` cells, then convolves down to the latent grid.
The decoder mirrors this and resamples back to the native shape.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

CODEC_IDS = ("V_x", "V_p", "V_cmpas")


class CodecError(ValueError):
    pass


@dataclass(frozen=True)
class CodecSpec:
    codec_id: str
    in_channels: int
    input_shape: tuple[int, int]
    latent_channels: int
    latent_size: tuple[int, int] = (32, 32)
    widths: tuple[int, ...] = (64, 128, 256, 256)

    def __post_init__(self):
        if self.codec_id not in CODEC_IDS:
            raise CodecError(f"unknown codec id {self.codec_id!r}")
        object.__setattr__(self, "input_shape", tuple(self.input_shape))
        object.__setattr__(self, "latent_size", tuple(self.latent_size))
        object.__setattr__(self, "widths", tuple(self.widths))
        if len(self.widths) < 1:
            raise CodecError("need at least one width")

    @property
    def n_down(self) -> int:
        return len(self.widths) - 1

    @property
    def working_size(self) -> tuple[int, int]:
        f = 2 ** self.n_down
        return (self.latent_size[0] * f, self.latent_size[1] * f)

    @property
    def latent_shape(self) -> tuple[int, int, int]:
        return (self.latent_channels, *self.latent_size)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> CodecSpec:
        return cls(**d)


def full_scale_specs() -> dict[str, CodecSpec]:
    return {
        "V_x": CodecSpec("V_x", 69, (181, 281), 256, (32, 32), (64, 128, 256, 256)),
        "V_p": CodecSpec("V_p", 1, (181, 281), 16, (32, 32), (32, 64, 128, 128)),
        "V_cmpas": CodecSpec("V_cmpas", 1, (900, 1400), 16, (32, 32), (32, 64, 128, 128, 128)),
    }


@dataclass
class LatentBlock:
    """Posterior of one encode call; ``sample = mean + exp(logvar / 2) * eps``."""

    mean: torch.Tensor
    logvar: torch.Tensor
    eps: torch.Tensor
    codec_id: str

    @property
    def sample(self) -> torch.Tensor:
        return self.mean + torch.exp(0.5 * self.logvar) * self.eps

    def kl(self) -> torch.Tensor:
        """KL to the standard normal, summed over latent elements, averaged over the batch."""
        kl = 0.5 * (self.mean**2 + (torch.expm1(self.logvar) - self.logvar).clamp_min(0.0))
        return kl.flatten(1).sum(dim=1).mean()


def _groups(ch: int) -> int:
    for g in (32, 16, 8, 4, 2):
        if ch % g == 0 and ch // g >= 2:
            return g
    return 1


class ResBlock(nn.Module):
    def __init__(self, cin, cout):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(cin), cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.norm2 = nn.GroupNorm(_groups(cout), cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x):
        h = self.conv1(F.silu(self.norm1(x)))
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class Encoder(nn.Module):
    def __init__(self, spec: CodecSpec):
        super().__init__()
        w = spec.widths
        self.conv_in = nn.Conv2d(spec.in_channels, w[0], 3, padding=1)
        self.blocks = nn.ModuleList()
        for i in range(spec.n_down):
            self.blocks.append(ResBlock(w[i], w[i + 1]))
            self.blocks.append(nn.Conv2d(w[i + 1], w[i + 1], 3, stride=2, padding=1))
        self.mid = ResBlock(w[-1], w[-1])
        self.norm_out = nn.GroupNorm(_groups(w[-1]), w[-1])
        self.conv_out = nn.Conv2d(w[-1], 2 * spec.latent_channels, 3, padding=1)

    def forward(self, x):
        h = self.conv_in(x)
        for blk in self.blocks:
            h = blk(h)
        h = self.mid(h)
        return self.conv_out(F.silu(self.norm_out(h)))


class Decoder(nn.Module):
    def __init__(self, spec: CodecSpec):
        super().__init__()
        w = spec.widths[::-1]
        self.conv_in = nn.Conv2d(spec.latent_channels, w[0], 3, padding=1)
        self.mid = ResBlock(w[0], w[0])
        self.blocks = nn.ModuleList()
        for i in range(spec.n_down):
            self.blocks.append(nn.Upsample(scale_factor=2, mode="nearest"))
            self.blocks.append(ResBlock(w[i], w[i + 1]))
        self.norm_out = nn.GroupNorm(_groups(w[-1]), w[-1])
        self.conv_out = nn.Conv2d(w[-1], spec.in_channels, 3, padding=1)

    def forward(self, z):
        h = self.mid(self.conv_in(z))
        for blk in self.blocks:
            h = blk(h)
        return self.conv_out(F.silu(self.norm_out(h)))


def _resize(x, size):
    if tuple(x.shape[-2:]) == tuple(size):
        return x
    down = x.shape[-2] > size[0] or x.shape[-1] > size[1]
    return F.interpolate(x, size=size, mode="bilinear", align_corners=False, antialias=down)


class Codec(nn.Module):
    def __init__(self, spec: CodecSpec):
        super().__init__()
        self.spec = spec
        self.encoder = Encoder(spec)
        self.decoder = Decoder(spec)

    @property
    def last_layer(self) -> torch.Tensor:
        return self.decoder.conv_out.weight

    def encode(self, x: torch.Tensor, eps: torch.Tensor | None = None,
               generator: torch.Generator | None = None) -> LatentBlock:
        spec = self.spec
        if x.ndim != 4 or tuple(x.shape[1:]) != (spec.in_channels, *spec.input_shape):
            raise CodecError(f"{spec.codec_id} expects [B, {spec.in_channels}, "
                             f"{spec.input_shape[0]}, {spec.input_shape[1]}], got {tuple(x.shape)}")
        moments = self.encoder(_resize(x, spec.working_size))
        mean, logvar = moments.chunk(2, dim=1)
        logvar = logvar.clamp(-30.0, 20.0)
        if eps is None:
            eps = torch.randn(mean.shape, generator=generator, dtype=mean.dtype)
        return LatentBlock(mean, logvar, eps, spec.codec_id)

    def decode(self, latent) -> torch.Tensor:
        spec = self.spec
        if isinstance(latent, LatentBlock):
            if latent.codec_id != spec.codec_id:
                raise CodecError(f"{spec.codec_id} cannot decode a {latent.codec_id} latent")
            latent = latent.sample
        if tuple(latent.shape[1:]) != spec.latent_shape:
            raise CodecError(f"{spec.codec_id} latent must be {spec.latent_shape}, "
                             f"got {tuple(latent.shape[1:])}")
        return _resize(self.decoder(latent), spec.input_shape)

    def forward(self, x, generator=None):
        post = self.encode(x, generator=generator)
        return self.decode(post.sample), post


class FeaturePyramid(nn.Module):
    """Frozen, seeded convolutional features used as the perceptual distance backbone.

    A pretrained network can be swapped in by passing any module returning a
    list of feature maps as ``backbone``.
    """

    def __init__(self, in_channels: int, widths=(16, 32, 64), seed: int = 0, backbone=None):
        super().__init__()
        if backbone is None:
            gen = torch.Generator().manual_seed(seed)
            layers, cin = [], in_channels
            for w in widths:
                conv = nn.Conv2d(cin, w, 3, stride=2, padding=1)
                with torch.no_grad():
                    conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen)
                                      * math.sqrt(2.0 / (cin * 9)))
                    conv.bias.zero_()
                layers.append(conv)
                cin = w
            backbone = nn.ModuleList(layers)
        self.backbone = backbone
        for p in self.parameters():
            p.requires_grad_(False)

    def features(self, x):
        if not isinstance(self.backbone, nn.ModuleList):
            return self.backbone(x)
        feats, h = [], x
        for conv in self.backbone:
            h = F.leaky_relu(conv(h), 0.2)
            feats.append(h)
        return feats

    def forward(self, x, y):
        """Mean over layers and positions of squared unit-normalized feature differences."""
        total = 0.0
        fx, fy = self.features(x), self.features(y)
        for a, b in zip(fx, fy):
            a = a / (a.norm(dim=1, keepdim=True) + 1e-10)
            b = b / (b.norm(dim=1, keepdim=True) + 1e-10)
            total = total + ((a - b) ** 2).sum(dim=1).mean()
        return total / len(fx)


class PatchDiscriminator(nn.Module):
    def __init__(self, in_channels: int, width: int = 32, n_layers: int = 3):
        super().__init__()
        layers = [nn.Conv2d(in_channels, width, 4, 2, 1), nn.LeakyReLU(0.2)]
        cin = width
        for i in range(1, n_layers):
            cout = width * min(2**i, 8)
            layers += [nn.Conv2d(cin, cout, 4, 2, 1), nn.GroupNorm(_groups(cout), cout),
                       nn.LeakyReLU(0.2)]
            cin = cout
        layers.append(nn.Conv2d(cin, 1, 3, 1, 1))
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        return self.net(x)


@dataclass(frozen=True)
class GenLossWeights:
    perceptual: float = 0.1  # lambda
    kl: float = 1e-6  # gamma
    disc_start: int = 500
    psi_max: float = 1e4

    def __post_init__(self):
        if self.perceptual < 0 or self.kl < 0:
            raise CodecError("loss weights must be non-negative")


def _check(name, value):
    if not torch.isfinite(value).all():
        raise CodecError(f"non-finite {name} loss component")


def generator_loss(x, reconstruction, posterior: LatentBlock, fake_score, weights: GenLossWeights,
                   psi, perceptual=None) -> dict:
    """Reconstruction MAE + weighted perceptual, KL and adversarial terms.

    The adversarial term is the generator-side hinge objective
    ``-mean(D(G(x)))``. Returns the total and each unweighted component.
    """
    mae = torch.mean(torch.abs(x - reconstruction))
    if perceptual is not None and weights.perceptual > 0:
        lp = perceptual(x, reconstruction)
    else:
        lp = torch.zeros((), dtype=mae.dtype)
    kl = posterior.kl()
    adv = -torch.mean(fake_score) if fake_score is not None else torch.zeros((), dtype=mae.dtype)
    for name, v in (("mae", mae), ("lpips", lp), ("kl", kl), ("adversarial", adv)):
        _check(name, v)
    psi = torch.as_tensor(psi, dtype=mae.dtype)
    total = mae + weights.perceptual * lp + weights.kl * kl + psi * adv
    return {"total": total, "mae": mae, "lpips": lp, "kl": kl, "adversarial": adv}


def discriminator_loss(real_score, fake_score):
    """Hinge loss: mean(relu(1 - real)) + mean(relu(1 + fake))."""
    for name, v in (("real", real_score), ("fake", fake_score)):
        if not torch.isfinite(torch.as_tensor(v)).all():
            raise CodecError(f"non-finite {name} discriminator score")
    return torch.mean(F.relu(1.0 - real_score)) + torch.mean(F.relu(1.0 + fake_score))


def adaptive_psi(grad_norm_rec: float, grad_norm_adv: float, step: int = 0,
                 disc_start: int = 0, psi_max: float = 1e4) -> float:
    """Gradient-norm ratio balancing the adversarial term at the decoder's last layer."""
    if step < disc_start:
        return 0.0
    psi = float(grad_norm_rec) / (float(grad_norm_adv) + 1e-6)
    return float(min(max(psi, 0.0), psi_max))


@dataclass
class CodecTrainer:
    """Alternating generator / discriminator updates for one codec."""

    codec: Codec
    weights: GenLossWeights = field(default_factory=GenLossWeights)
    lr: float = 1e-3
    disc_lr: float = 1e-3
    seed: int = 0
    perceptual_widths: tuple = (16, 32)

    def __post_init__(self):
        spec = self.codec.spec
        torch.manual_seed(self.seed)
        self.discriminator = PatchDiscriminator(spec.in_channels, width=16, n_layers=2)
        self.perceptual = FeaturePyramid(spec.in_channels, self.perceptual_widths, seed=self.seed)
        self.opt_g = torch.optim.Adam(self.codec.parameters(), lr=self.lr, betas=(0.5, 0.9))
        self.opt_d = torch.optim.Adam(self.discriminator.parameters(), lr=self.disc_lr,
                                      betas=(0.5, 0.9))
        self.generator = torch.Generator().manual_seed(self.seed)
        self.step_count = 0

    def step(self, x: torch.Tensor) -> dict:
        self.codec.train()
        recon, post = self.codec(x, generator=self.generator)
        use_disc = self.step_count >= self.weights.disc_start
        fake = self.discriminator(recon) if use_disc else None
        psi = 0.0
        if use_disc:
            nll = torch.mean(torch.abs(x - recon))
            if self.weights.perceptual > 0:
                nll = nll + self.weights.perceptual * self.perceptual(x, recon)
            g_rec = torch.autograd.grad(nll, self.codec.last_layer, retain_graph=True)[0]
            g_adv = torch.autograd.grad(-torch.mean(fake), self.codec.last_layer,
                                        retain_graph=True)[0]
            psi = adaptive_psi(g_rec.norm().item(), g_adv.norm().item(), self.step_count,
                               self.weights.disc_start, self.weights.psi_max)
        parts = generator_loss(x, recon, post, fake, self.weights, psi, self.perceptual)
        self.opt_g.zero_grad(set_to_none=True)
        parts["total"].backward()
        self.opt_g.step()
        out = {k: float(v.detach()) for k, v in parts.items()}
        out["psi"] = psi
        if use_disc:
            self.opt_d.zero_grad(set_to_none=True)
            d_loss = discriminator_loss(self.discriminator(x), self.discriminator(recon.detach()))
            d_loss.backward()
            self.opt_d.step()
            out["disc"] = float(d_loss.detach())
        self.step_count += 1
        return out


def toy_specs(n_channels: int, state_shape: tuple[int, int], precip_shape: tuple[int, int],
              latent: int = 8) -> dict[str, CodecSpec]:
    return {
        "V_x": CodecSpec("V_x", n_channels, state_shape, 8, (latent, latent), (16, 32, 32)),
        "V_p": CodecSpec("V_p", 1, state_shape, 2, (latent, latent), (8, 16, 16)),
        "V_cmpas": CodecSpec("V_cmpas", 1, precip_shape, 2, (latent, latent), (8, 16, 16, 16)),
    }
