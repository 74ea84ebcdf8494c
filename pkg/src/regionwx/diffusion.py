"""Latent DDPM with a DiT denoiser for high-resolution precipitation diagnosis.

Timesteps are 1-based: ``t`` runs from 1 (least noise) to ``T``;
``alphas_cumprod[0] == 1`` by convention.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn


class DiffusionError(ValueError):
    pass


class NoiseSchedule:
    """Derived DDPM quantities for a beta sequence over the timesteps in ``timestep_map``.

    ``timestep_map[i]`` is the original training timestep simulated by
    internal step ``i`` (1-based; index 0 is unused). For the full schedule
    it is the identity.
    """

    def __init__(self, betas: np.ndarray, timestep_map: np.ndarray | None = None):
        betas = np.asarray(betas, dtype=np.float64)
        if betas.ndim != 1 or not np.all((betas > 0) & (betas < 1)):
            raise DiffusionError("betas must lie in (0, 1)")
        self.T = len(betas)
        self.betas = np.concatenate([[0.0], betas])
        self.alphas = 1.0 - self.betas
        self.alphas_cumprod = np.cumprod(self.alphas)
        prev = np.concatenate([[1.0], self.alphas_cumprod[:-1]])
        self.alphas_cumprod_prev = prev
        with np.errstate(divide="ignore", invalid="ignore"):
            self.posterior_variance = self.betas * (1.0 - prev) / (1.0 - self.alphas_cumprod)
            self.posterior_mean_coef1 = self.betas * np.sqrt(prev) / (1.0 - self.alphas_cumprod)
            self.posterior_mean_coef2 = (1.0 - prev) * np.sqrt(self.alphas) / (1.0 - self.alphas_cumprod)
        self.posterior_variance[0] = 0.0
        self.posterior_mean_coef1[0] = self.posterior_mean_coef2[0] = 0.0
        pv = self.posterior_variance.copy()
        if self.T > 1:
            pv[1] = pv[2]
        else:
            pv[1] = self.betas[1]
        pv[0] = 1.0
        self.posterior_log_variance_clipped = np.log(pv)
        self.log_betas = np.log(np.where(self.betas > 0, self.betas, 1.0))
        if timestep_map is None:
            timestep_map = np.arange(self.T + 1)
        self.timestep_map = np.asarray(timestep_map, dtype=np.int64)

    @classmethod
    def linear(cls, T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02):
        if T < 1:
            raise DiffusionError("T must be >= 1")
        return cls(np.linspace(beta_start, beta_end, T, dtype=np.float64))

    def respace(self, n_steps: int) -> NoiseSchedule:
        """Evenly spaced ``n_steps``-step subsequence with recomputed betas.

        Consecutive kept timesteps reuse the original beta unchanged, so the
        identity respacing reproduces this schedule bit for bit.
        """
        if not 1 <= n_steps <= self.T:
            raise DiffusionError(f"n_steps must be in [1, {self.T}], got {n_steps}")
        keep = np.unique(np.round(np.linspace(1, self.T, n_steps)).astype(np.int64))
        if len(keep) != n_steps:
            raise DiffusionError(f"cannot respace {self.T} steps to {n_steps}")
        betas, last = [], 0
        for s in keep:
            if s == last + 1:
                betas.append(self.betas[s])
            else:
                betas.append(1.0 - self.alphas_cumprod[s] / self.alphas_cumprod[last])
            last = s
        return NoiseSchedule(np.array(betas), np.concatenate([[0], self.timestep_map[keep]]))

    def _take(self, arr, t, like):
        t = torch.as_tensor(t, dtype=torch.long)
        if torch.any(t < 1) or torch.any(t > self.T):
            raise DiffusionError(f"timestep out of range [1, {self.T}]")
        out = torch.as_tensor(arr, dtype=like.dtype)[t]
        return out.view(-1, *([1] * (like.ndim - 1)))

    def q_sample(self, x0, t, eps):
        """Sample x_t ~ q(x_t | x0) as sqrt(abar_t) x0 + sqrt(1 - abar_t) eps."""
        a = self._take(np.sqrt(self.alphas_cumprod), t, x0)
        s = self._take(np.sqrt(1.0 - self.alphas_cumprod), t, x0)
        return a * x0 + s * eps

    def q_posterior(self, x0, xt, t):
        mean = self._take(self.posterior_mean_coef1, t, xt) * x0 + \
            self._take(self.posterior_mean_coef2, t, xt) * xt
        return mean, self._take(self.posterior_log_variance_clipped, t, xt)

    def predict_x0(self, xt, t, eps):
        return (xt - self._take(np.sqrt(1.0 - self.alphas_cumprod), t, xt) * eps) / \
            self._take(np.sqrt(self.alphas_cumprod), t, xt)

    def model_log_variance(self, v, t):
        """Interpolate between log beta_t and the clipped posterior log variance.

        ``v`` is the raw network output in roughly [-1, 1]; -1 selects the
        posterior variance, +1 selects beta_t.
        """
        frac = (v + 1.0) / 2.0
        max_log = self._take(self.log_betas, t, v)
        min_log = self._take(self.posterior_log_variance_clipped, t, v)
        return frac * max_log + (1.0 - frac) * min_log

    def p_mean_logvar(self, eps_hat, v, xt, t):
        x0 = self.predict_x0(xt, t, eps_hat)
        mean, _ = self.q_posterior(x0, xt, t)
        return mean, self.model_log_variance(v, t)


def normal_kl(mean1, logvar1, mean2, logvar2):
    return 0.5 * (-1.0 + logvar2 - logvar1 + torch.exp(logvar1 - logvar2)
                  + (mean1 - mean2) ** 2 * torch.exp(-logvar2))


def gaussian_nll(x, mean, logvar):
    return 0.5 * (math.log(2 * math.pi) + logvar + (x - mean) ** 2 * torch.exp(-logvar))


def hybrid_loss(schedule: NoiseSchedule, eps, eps_hat, v, x0, xt, t) -> dict:
    """Noise MSE plus the variational-bound term for the learned variance.

    The bound term sees a detached noise prediction so it only trains the
    variance output. At t = 1 it is the Gaussian negative log-likelihood of
    x0 instead of a KL. Both terms are in bits per latent element.
    """
    mse = ((eps - eps_hat) ** 2).flatten(1).mean(dim=1)
    true_mean, true_logvar = schedule.q_posterior(x0, xt, t)
    mean, logvar = schedule.p_mean_logvar(eps_hat.detach(), v, xt, t)
    kl = normal_kl(true_mean, true_logvar, mean, logvar).flatten(1).mean(dim=1) / math.log(2.0)
    nll = gaussian_nll(x0, mean, logvar).flatten(1).mean(dim=1) / math.log(2.0)
    t = torch.as_tensor(t)
    vb = torch.where(t == 1, nll, kl)
    loss = mse + vb
    if not torch.isfinite(loss).all():
        raise DiffusionError("non-finite diffusion loss")
    return {"loss": loss.mean(), "mse": mse.mean(), "vb": vb.mean()}


@dataclass(frozen=True)
class DiTConfig:
    latent_channels: int = 16
    cond_channels: int = 256 + 16 + 16
    input_size: tuple[int, int] = (32, 32)
    patch: int = 2
    width: int = 192
    depth: int = 12
    heads: int = 6
    mlp_ratio: float = 4.0
    freq_dim: int = 256

    def __post_init__(self):
        object.__setattr__(self, "input_size", tuple(self.input_size))
        if any(s % self.patch for s in self.input_size):
            raise DiffusionError(f"latent size {self.input_size} not divisible by patch {self.patch}")
        if self.width % self.heads:
            raise DiffusionError("width must be divisible by the head count")

    def to_dict(self) -> dict:
        return asdict(self)


def timestep_embedding(t, dim, max_period=10000.0):
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64) / half)
    args = t[:, None].double() * freqs[None]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = torch.cat([emb, torch.zeros_like(emb[:, :1])], dim=-1)
    return emb


def sincos_2d(h, w, dim):
    def one(n, d):
        omega = 1.0 / 10000 ** (np.arange(d // 2, dtype=np.float64) / (d / 2.0))
        out = np.arange(n, dtype=np.float64)[:, None] * omega[None]
        return np.concatenate([np.sin(out), np.cos(out)], axis=1)

    eh, ew = one(h, dim // 2), one(w, dim // 2)
    grid = np.concatenate([np.repeat(eh, w, axis=0), np.tile(ew, (h, 1))], axis=1)
    return torch.as_tensor(grid, dtype=torch.float32)


def modulate(x, shift, scale):
    return x * (1 + scale[:, None]) + shift[:, None]


class DiTBlock(nn.Module):
    def __init__(self, width, heads, mlp_ratio):
        super().__init__()
        self.heads = heads
        self.norm1 = nn.LayerNorm(width, elementwise_affine=False, eps=1e-6)
        self.qkv = nn.Linear(width, 3 * width)
        self.proj = nn.Linear(width, width)
        self.norm2 = nn.LayerNorm(width, elementwise_affine=False, eps=1e-6)
        hidden = int(width * mlp_ratio)
        self.mlp = nn.Sequential(nn.Linear(width, hidden), nn.GELU(approximate="tanh"),
                                 nn.Linear(hidden, width))
        self.ada = nn.Sequential(nn.SiLU(), nn.Linear(width, 6 * width))

    def attention(self, x):
        b, n, c = x.shape
        qkv = self.qkv(x).view(b, n, 3, self.heads, c // self.heads).permute(2, 0, 3, 1, 4)
        attn = (qkv[0] @ qkv[1].transpose(-2, -1)) * (c // self.heads) ** -0.5
        out = attn.softmax(dim=-1) @ qkv[2]
        return self.proj(out.transpose(1, 2).reshape(b, n, c))

    def forward(self, x, c):
        sh1, sc1, g1, sh2, sc2, g2 = self.ada(c).chunk(6, dim=-1)
        x = x + g1[:, None] * self.attention(modulate(self.norm1(x), sh1, sc1))
        return x + g2[:, None] * self.mlp(modulate(self.norm2(x), sh2, sc2))


class DiT(nn.Module):
    """Transformer denoiser over latent patches.

    The conditioning latents are concatenated channelwise with x_t before
    patching; the noise step enters through adaptive layer-norm modulation.
    Output channels are (noise prediction, variance interpolation).
    """

    def __init__(self, cfg: DiTConfig):
        super().__init__()
        self.cfg = cfg
        p, w = cfg.patch, cfg.width
        self.x_embed = nn.Conv2d(cfg.latent_channels + cfg.cond_channels, w, p, p)
        h, wd = cfg.input_size
        self.register_buffer("pos", sincos_2d(h // p, wd // p, w)[None], persistent=False)
        self.t_embed = nn.Sequential(nn.Linear(cfg.freq_dim, w), nn.SiLU(), nn.Linear(w, w))
        self.blocks = nn.ModuleList(DiTBlock(w, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.depth))
        self.norm_out = nn.LayerNorm(w, elementwise_affine=False, eps=1e-6)
        self.ada_out = nn.Sequential(nn.SiLU(), nn.Linear(w, 2 * w))
        self.out = nn.Linear(w, p * p * 2 * cfg.latent_channels)
        self._init()

    def _init(self):
        for m in self.modules():
            if isinstance(m, nn.Linear):
                nn.init.xavier_uniform_(m.weight)
                nn.init.zeros_(m.bias)
        for blk in self.blocks:
            nn.init.zeros_(blk.ada[-1].weight)
            nn.init.zeros_(blk.ada[-1].bias)
        nn.init.zeros_(self.ada_out[-1].weight)
        nn.init.zeros_(self.ada_out[-1].bias)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    def forward(self, xt, cond, t):
        """(eps_hat, v) for latents ``xt`` [B, C, h, w] at original timesteps ``t`` [B]."""
        cfg = self.cfg
        b = xt.shape[0]
        if tuple(xt.shape[1:]) != (cfg.latent_channels, *cfg.input_size):
            raise DiffusionError(f"x_t shape {tuple(xt.shape[1:])} does not match config")
        if tuple(cond.shape) != (b, cfg.cond_channels, *cfg.input_size):
            raise DiffusionError(f"conditioning shape {tuple(cond.shape)} does not match config")
        x = self.x_embed(torch.cat([xt, cond], dim=1)).flatten(2).transpose(1, 2)
        x = x + self.pos.to(x.dtype)
        c = self.t_embed(timestep_embedding(torch.as_tensor(t), cfg.freq_dim).to(x.dtype))
        for i, blk in enumerate(self.blocks):
            x = blk(x, c)
            if not torch.isfinite(x).all():
                raise DiffusionError(f"non-finite activations after DiT block {i}")
        sh, sc = self.ada_out(c).chunk(2, dim=-1)
        x = self.out(modulate(self.norm_out(x), sh, sc))
        p = cfg.patch
        h, w = cfg.input_size[0] // p, cfg.input_size[1] // p
        x = x.view(b, h, w, p, p, 2 * cfg.latent_channels).permute(0, 5, 1, 3, 2, 4)
        x = x.reshape(b, 2 * cfg.latent_channels, h * p, w * p)
        return x.chunk(2, dim=1)


def denoise_step(model, schedule: NoiseSchedule, x, cond, i: int):
    """Mean and log variance of p(x_{i-1} | x_i) at internal step ``i``."""
    b = x.shape[0]
    t_int = torch.full((b,), i, dtype=torch.long)
    t_orig = torch.as_tensor(schedule.timestep_map[t_int.numpy()])
    eps_hat, v = model(x, cond, t_orig)
    return schedule.p_mean_logvar(eps_hat, v, x, t_int)


@torch.no_grad()
def p_sample_loop(model, schedule: NoiseSchedule, cond, shape, generator: torch.Generator,
                  dtype=torch.float32):
    """Ancestral sampling from pure noise; the last step adds no noise."""
    x = torch.randn(shape, generator=generator, dtype=dtype)
    for i in range(schedule.T, 0, -1):
        mean, logvar = denoise_step(model, schedule, x, cond, i)
        noise = torch.randn(shape, generator=generator, dtype=dtype)
        x = mean + (torch.exp(0.5 * logvar) * noise if i > 1 else 0.0)
    return x


def sample(model, schedule: NoiseSchedule, cond, n_steps: int = 250, seed: int = 0,
           member: int | None = None):
    """Seeded ancestral sample over an evenly respaced ``n_steps`` schedule.

    ``member`` derives an independent stream per ensemble member from the
    same base seed.
    """
    if not 1 <= n_steps <= schedule.T:
        raise DiffusionError(f"n_steps must be in [1, {schedule.T}]")
    model.eval()
    sched = schedule if n_steps == schedule.T else schedule.respace(n_steps)
    key = [seed] if member is None else [seed, member]
    gen = torch.Generator().manual_seed(int(np.random.SeedSequence(key).generate_state(1)[0]))
    shape = (cond.shape[0], model.cfg.latent_channels, *model.cfg.input_size)
    return p_sample_loop(model, sched, cond, shape, gen, dtype=cond.dtype)


def diffusion_train_step(model, optimizer, schedule: NoiseSchedule, x0, cond,
                         generator: torch.Generator) -> dict:
    """One hybrid-loss step on target latents ``x0`` with conditioning ``cond``."""
    model.train()
    b = x0.shape[0]
    t = torch.randint(1, schedule.T + 1, (b,), generator=generator)
    eps = torch.randn(x0.shape, generator=generator, dtype=x0.dtype)
    xt = schedule.q_sample(x0, t, eps)
    eps_hat, v = model(xt, cond, t)
    parts = hybrid_loss(schedule, eps, eps_hat, v, x0, xt, t)
    optimizer.zero_grad(set_to_none=True)
    parts["loss"].backward()
    optimizer.step()
    return {k: float(v.detach()) for k, v in parts.items()}


def enmax(members) -> np.ndarray:
    """Pixelwise maximum across ensemble members."""
    members = [np.asarray(m) for m in members]
    if not members:
        raise DiffusionError("enmax needs at least one member")
    shape = members[0].shape
    if any(m.shape != shape for m in members):
        raise DiffusionError("ensemble members must share a shape")
    return np.maximum.reduce(members)
