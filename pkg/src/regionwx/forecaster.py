"""Boundary-conditioned 3D shifted-window transformer forecaster.

Token layout
------------
Pressure-level fields [V, L, H, W] are embedded with a 3D patch embedding
into ``ceil(L / pd)`` depth slices; the surface fields (plus topography) are
embedded with a 2D patch embedding into one more slice, stored at depth
index 0. The lateral boundary strip of the *target* time is embedded on its
own, split into its four edges, and attached as a one-token ring around the
horizontal token grid (every depth slice gets its own ring tokens). The ring
is dropped again before patch recovery.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

LEAD_TIMES = (1, 3, 6, 24)


class ForecastError(RuntimeError):
    pass


@dataclass(frozen=True)
class EmbedConfig:
    surface_patch: tuple[int, int] = (4, 4)
    surface_kernel: tuple[int, int] = (7, 7)
    pressure_patch: tuple[int, int, int] = (2, 4, 4)
    pressure_kernel: tuple[int, int, int] = (5, 7, 7)
    boundary_patch: tuple[int, int] = (4, 4)
    boundary_kernel: tuple[int, int] = (7, 7)
    embed_dim: int = 48
    sliding: bool = True

    def __post_init__(self):
        for name in ("surface_patch", "surface_kernel", "pressure_patch", "pressure_kernel",
                     "boundary_patch", "boundary_kernel"):
            object.__setattr__(self, name, tuple(int(v) for v in getattr(self, name)))
        for p, k in ((self.surface_patch, self.surface_kernel),
                     (self.pressure_patch, self.pressure_kernel),
                     (self.boundary_patch, self.boundary_kernel)):
            if len(p) != len(k) or any(kk < pp for pp, kk in zip(p, k)):
                raise ValueError(f"kernel {k} must be >= patch {p} elementwise")

    def kernel(self, which: str) -> tuple[int, ...]:
        """Effective kernel; equal to the patch size when sliding is off."""
        if not self.sliding:
            return getattr(self, f"{which}_patch")
        return getattr(self, f"{which}_kernel")


@dataclass(frozen=True)
class ForecasterConfig:
    n_surface: int = 4
    n_pressure_vars: int = 5
    n_levels: int = 13
    embed: EmbedConfig = field(default_factory=EmbedConfig)
    depths: tuple[int, int, int] = (2, 6, 2)
    heads: tuple[int, int, int] = (3, 6, 3)
    window: tuple[int, int, int] = (2, 6, 6)
    mlp_ratio: float = 4.0
    skip: bool = True
    use_topography: bool = True
    boundary_width: int = 4
    lead_hours: int = 1

    def __post_init__(self):
        if isinstance(self.embed, dict):
            object.__setattr__(self, "embed", EmbedConfig(**self.embed))
        for name in ("depths", "heads", "window"):
            object.__setattr__(self, name, tuple(int(v) for v in getattr(self, name)))
        if len(self.depths) != 3 or len(self.heads) != 3:
            raise ValueError("the forecaster has exactly three layers")
        dims = (self.embed.embed_dim, 2 * self.embed.embed_dim, self.embed.embed_dim)
        for d, h in zip(dims, self.heads):
            if d % h:
                raise ValueError(f"layer width {d} not divisible by {h} heads")
        if self.lead_hours not in LEAD_TIMES:
            raise ValueError(f"lead time must be one of {LEAD_TIMES}")

    @property
    def n_channels(self) -> int:
        return self.n_surface + self.n_pressure_vars * self.n_levels

    def to_dict(self) -> dict:
        return asdict(self)

    def architecture_dict(self) -> dict:
        """Everything that determines parameter shapes (lead time excluded)."""
        d = self.to_dict()
        d.pop("lead_hours")
        return d

    @classmethod
    def from_dict(cls, d: dict) -> ForecasterConfig:
        return cls(**d)


def sliding_pad(size: int, stride: int, kernel: int) -> tuple[int, int]:
    """(before, after) padding giving ``ceil(size / stride)`` outputs.

    The extra ``kernel - stride`` overhang is centred so each sliding patch
    has the same centre as the matching non-overlapping patch.
    """
    n_out = -(-size // stride)
    total = (n_out - 1) * stride + kernel - size
    before = (kernel - stride + 1) // 2
    return before, total - before


def _pad_spatial(x, sizes, strides, kernels, mode="replicate"):
    pads = []
    for size, s, k in reversed(list(zip(sizes, strides, kernels))):
        pads.extend(sliding_pad(size, s, k))
    if not any(pads):
        return x
    if mode == "zeros":
        return F.pad(x, pads)
    return F.pad(x, pads, mode=mode)


class PatchEmbed2D(nn.Module):
    def __init__(self, in_ch, dim, patch, kernel, pad_mode="replicate"):
        super().__init__()
        self.patch, self.kernel, self.pad_mode = tuple(patch), tuple(kernel), pad_mode
        self.proj = nn.Conv2d(in_ch, dim, self.kernel, self.patch)

    def forward(self, x):
        x = _pad_spatial(x, x.shape[-2:], self.patch, self.kernel, self.pad_mode)
        return self.proj(x)


class PatchEmbed3D(nn.Module):
    def __init__(self, in_ch, dim, patch, kernel, pad_mode="replicate"):
        super().__init__()
        self.patch, self.kernel, self.pad_mode = tuple(patch), tuple(kernel), pad_mode
        self.proj = nn.Conv3d(in_ch, dim, self.kernel, self.patch)

    def forward(self, x):
        x = _pad_spatial(x, x.shape[-3:], self.patch, self.kernel, self.pad_mode)
        return self.proj(x)


def token_grid_shape(cfg: ForecasterConfig, n_lat: int, n_lon: int) -> tuple[int, int, int]:
    """(depth, lat, lon) token counts before the boundary ring is attached."""
    pd, ph, pw = cfg.embed.pressure_patch
    return 1 + -(-cfg.n_levels // pd), -(-n_lat // ph), -(-n_lon // pw)


def boundary_token_count(cfg: ForecasterConfig, n_lat: int, n_lon: int) -> int:
    z, h, w = token_grid_shape(cfg, n_lat, n_lon)
    return z * ((h + 2) * (w + 2) - h * w)


class BoundaryEmbed(nn.Module):
    """Embeds a [B, C, width, perimeter] strip into a ring of tokens.

    The strip is cut back into its four edges (top, bottom, left, right),
    each edge goes through the same patch embedding, and the resulting
    token rows/columns are placed around the [depth, lat, lon] grid. Ring
    corners take the mean of the two adjacent edge tokens.
    """

    def __init__(self, cfg: ForecasterConfig, pad_mode="replicate"):
        super().__init__()
        e = cfg.embed
        self.depth = token_grid_shape(cfg, 1, 1)[0]
        self.dim = e.embed_dim
        self.patch = e.boundary_patch
        self.kernel = e.kernel("boundary")
        self.pad_mode = pad_mode
        self.proj = nn.Conv2d(cfg.n_channels, e.embed_dim * self.depth, self.kernel, self.patch)
        self.null_token = nn.Parameter(torch.zeros(self.depth, e.embed_dim))

    def _edge(self, part):
        x = _pad_spatial(part, part.shape[-2:], self.patch, self.kernel, self.pad_mode)
        y = self.proj(x)  # [B, D*Z, w', n]
        y = y.mean(dim=2)  # width axis collapses to one token for width <= stride
        b, _, n = y.shape
        return y.view(b, self.depth, self.dim, n).transpose(2, 3)  # [B, Z, n, D]

    def forward(self, tokens, strip, n_lat, n_lon):
        """Attach the ring to ``tokens`` [B, Z, Hh, Ww, D]; ``strip`` may be None."""
        b, z, hh, ww, d = tokens.shape
        out = tokens.new_zeros(b, z, hh + 2, ww + 2, d)
        out[:, :, 1:-1, 1:-1] = tokens
        if strip is None:
            null = self.null_token[None, :, None, None, :]
            out[:, :, 0, :] = null[:, :, 0]
            out[:, :, -1, :] = null[:, :, 0]
            out[:, :, 1:-1, 0] = null[:, :, 0]
            out[:, :, 1:-1, -1] = null[:, :, 0]
            return out
        if strip.shape[-1] != 2 * (n_lat + n_lon):
            raise ForecastError(f"boundary perimeter {strip.shape[-1]} does not match "
                                f"grid {n_lat}x{n_lon}")
        a, c, e = n_lon, 2 * n_lon, 2 * n_lon + n_lat
        top = self._edge(strip[..., :a])
        bottom = self._edge(strip[..., a:c])
        left = self._edge(strip[..., c:e])
        right = self._edge(strip[..., e:])
        if top.shape[2] != ww or left.shape[2] != hh:
            raise ForecastError("boundary edge tokens do not align with the token grid")
        out[:, :, -1, 1:-1] = top
        out[:, :, 0, 1:-1] = bottom
        out[:, :, 1:-1, 0] = left
        out[:, :, 1:-1, -1] = right
        out[:, :, 0, 0] = 0.5 * (bottom[:, :, 0] + left[:, :, 0])
        out[:, :, 0, -1] = 0.5 * (bottom[:, :, -1] + right[:, :, 0])
        out[:, :, -1, 0] = 0.5 * (top[:, :, 0] + left[:, :, -1])
        out[:, :, -1, -1] = 0.5 * (top[:, :, -1] + right[:, :, -1])
        return out


def window_partition(x, ws):
    b, z, h, w, c = x.shape
    x = x.view(b, z // ws[0], ws[0], h // ws[1], ws[1], w // ws[2], ws[2], c)
    return x.permute(0, 1, 3, 5, 2, 4, 6, 7).reshape(-1, ws[0] * ws[1] * ws[2], c)


def window_reverse(windows, ws, b, z, h, w):
    x = windows.view(b, z // ws[0], h // ws[1], w // ws[2], ws[0], ws[1], ws[2], -1)
    return x.permute(0, 1, 4, 2, 5, 3, 6, 7).reshape(b, z, h, w, -1)


def _effective_window(sizes, window):
    ws = tuple(min(s, w) for s, w in zip(sizes, window))
    return ws


class WindowAttention3D(nn.Module):
    def __init__(self, dim, heads, window):
        super().__init__()
        self.heads = heads
        self.scale = (dim // heads) ** -0.5
        self.window = tuple(window)
        wd, wh, ww = self.window
        self.bias_table = nn.Parameter(torch.zeros((2 * wd - 1) * (2 * wh - 1) * (2 * ww - 1), heads))
        nn.init.trunc_normal_(self.bias_table, std=0.02)
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        self._index_cache = {}

    def _rel_index(self, ws):
        if ws not in self._index_cache:
            coords = torch.stack(torch.meshgrid(*[torch.arange(s) for s in ws], indexing="ij"))
            coords = coords.flatten(1)
            rel = coords[:, :, None] - coords[:, None, :]
            wd, wh, ww = self.window
            rel[0] += wd - 1
            rel[1] += wh - 1
            rel[2] += ww - 1
            idx = rel[0] * (2 * wh - 1) * (2 * ww - 1) + rel[1] * (2 * ww - 1) + rel[2]
            self._index_cache[ws] = idx
        return self._index_cache[ws]

    def forward(self, x, ws, mask=None):
        bw, n, c = x.shape
        qkv = self.qkv(x).view(bw, n, 3, self.heads, c // self.heads).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = (q * self.scale) @ k.transpose(-2, -1)
        bias = self.bias_table[self._rel_index(ws).reshape(-1)].view(n, n, -1).permute(2, 0, 1)
        attn = attn + bias[None]
        if mask is not None:
            nw = mask.shape[0]
            attn = attn.view(bw // nw, nw, self.heads, n, n) + mask[None, :, None]
            attn = attn.view(bw, self.heads, n, n)
        attn = attn.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(bw, n, c)
        return self.proj(out)


def _region_labels(padded, valid, shift):
    """Per-token labels; tokens attend only within equal labels.

    Labels separate the wrapped-around region of a cyclic shift and mark
    padding (label -1) so padded tokens never feed valid ones.
    """
    labels = torch.zeros(padded, dtype=torch.long)
    mult = 1
    for axis, (p, s) in enumerate(zip(padded, shift)):
        if s > 0:
            seg = (torch.arange(p) >= s).long()
            shape = [1, 1, 1]
            shape[axis] = p
            labels = labels + mult * seg.view(shape)
            mult *= 2
    pad_mask = torch.zeros(padded, dtype=torch.bool)
    pad_mask[valid[0]:, :, :] = True
    pad_mask[:, valid[1]:, :] = True
    pad_mask[:, :, valid[2]:] = True
    labels[pad_mask] = -1
    return labels


class SwinBlock3D(nn.Module):
    def __init__(self, dim, heads, window, shifted, mlp_ratio=4.0):
        super().__init__()
        self.window = tuple(window)
        self.shifted = shifted
        self.norm1 = nn.LayerNorm(dim)
        self.attn = WindowAttention3D(dim, heads, window)
        self.norm2 = nn.LayerNorm(dim)
        hidden = int(dim * mlp_ratio)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))
        self.pad_mode = "replicate"
        self._mask_cache = {}

    def _mask(self, padded, valid, ws, shift, device, dtype):
        key = (padded, valid, ws, shift, device, dtype)
        if key not in self._mask_cache:
            labels = _region_labels(padded, valid, shift)
            labels = torch.roll(labels, tuple(-s for s in shift), dims=(0, 1, 2))
            lw = window_partition(labels[None, ..., None].float(), ws).squeeze(-1)
            m = torch.zeros(lw.shape[0], lw.shape[1], lw.shape[1], dtype=dtype, device=device)
            m.masked_fill_(lw[:, :, None] != lw[:, None, :], float("-inf"))
            self._mask_cache[key] = m
        return self._mask_cache[key]

    def forward(self, x):
        b, z, h, w, c = x.shape
        ws = _effective_window((z, h, w), self.window)
        shift = tuple(s // 2 if (self.shifted and dim > s) else 0
                      for s, dim in zip(ws, (z, h, w)))
        y = self.norm1(x)
        padded = tuple(-(-d // s) * s for d, s in zip((z, h, w), ws))
        pads = [0, 0]
        for d, p in zip((w, h, z), (padded[2], padded[1], padded[0])):
            pads.extend([0, p - d])
        if any(pads):
            y = y.permute(0, 4, 1, 2, 3)
            if self.pad_mode in ("replicate", "reflect"):
                y = F.pad(y, pads[2:], mode=self.pad_mode)
            else:
                y = F.pad(y, pads[2:], value=float(self.pad_mode))
            y = y.permute(0, 2, 3, 4, 1)
        if any(shift):
            y = torch.roll(y, tuple(-s for s in shift), dims=(1, 2, 3))
        mask = None
        if any(shift) or padded != (z, h, w):
            mask = self._mask(padded, (z, h, w), ws, shift, y.device, y.dtype)
        win = window_partition(y, ws)
        win = self.attn(win, ws, mask)
        y = window_reverse(win, ws, b, *padded)
        if any(shift):
            y = torch.roll(y, shift, dims=(1, 2, 3))
        y = y[:, :z, :h, :w]
        x = x + y
        return x + self.mlp(self.norm2(x))


class PatchMerge(nn.Module):
    """2x2 horizontal merge: [B, Z, H, W, C] -> [B, Z, ceil(H/2), ceil(W/2), 2C]."""

    def __init__(self, dim):
        super().__init__()
        self.norm = nn.LayerNorm(4 * dim)
        self.reduce = nn.Linear(4 * dim, 2 * dim)

    def forward(self, x):
        b, z, h, w, c = x.shape
        if h % 2 or w % 2:
            x = x.permute(0, 4, 1, 2, 3)
            x = F.pad(x, (0, w % 2, 0, h % 2, 0, 0), mode="replicate")
            x = x.permute(0, 2, 3, 4, 1)
        x0 = x[:, :, 0::2, 0::2]
        x1 = x[:, :, 1::2, 0::2]
        x2 = x[:, :, 0::2, 1::2]
        x3 = x[:, :, 1::2, 1::2]
        return self.reduce(self.norm(torch.cat([x0, x1, x2, x3], dim=-1)))


class PatchExpand(nn.Module):
    """Transpose of :class:`PatchMerge`, cropped back to (h, w)."""

    def __init__(self, dim):
        super().__init__()
        self.expand = nn.Linear(dim, 2 * dim)
        self.norm = nn.LayerNorm(dim // 2)

    def forward(self, x, h, w):
        b, z, h2, w2, c = x.shape
        x = self.expand(x).view(b, z, h2, w2, 2, 2, c // 2)
        x = x.permute(0, 1, 2, 4, 3, 5, 6).reshape(b, z, 2 * h2, 2 * w2, c // 2)
        return self.norm(x[:, :, :h, :w])


class Forecaster(nn.Module):
    """Maps (normalized state at t, boundary strip at t+s, topography) to the state at t+s."""

    def __init__(self, cfg: ForecasterConfig):
        super().__init__()
        self.cfg = cfg
        e = cfg.embed
        d = e.embed_dim
        n_surf_in = cfg.n_surface + (1 if cfg.use_topography else 0)
        self.surface_embed = PatchEmbed2D(n_surf_in, d, e.surface_patch, e.kernel("surface"))
        self.pressure_embed = PatchEmbed3D(cfg.n_pressure_vars, d, e.pressure_patch,
                                           e.kernel("pressure"))
        self.boundary_embed = BoundaryEmbed(cfg)
        w = cfg.window

        def layer(dim, depth, heads):
            return nn.ModuleList(SwinBlock3D(dim, heads, w, shifted=bool(i % 2),
                                             mlp_ratio=cfg.mlp_ratio) for i in range(depth))

        self.layer1 = layer(d, cfg.depths[0], cfg.heads[0])
        self.down = PatchMerge(d)
        self.layer2 = layer(2 * d, cfg.depths[1], cfg.heads[1])
        self.up = PatchExpand(2 * d)
        self.fuse = nn.Linear(2 * d, d) if cfg.skip else None
        self.layer3 = layer(d, cfg.depths[2], cfg.heads[2])
        self.norm_out = nn.LayerNorm(d)
        self.surface_out = nn.ConvTranspose2d(d, cfg.n_surface, e.surface_patch, e.surface_patch)
        self.pressure_out = nn.ConvTranspose3d(d, cfg.n_pressure_vars, e.pressure_patch,
                                               e.pressure_patch)
        self.apply(self._init)

    @staticmethod
    def _init(m):
        if isinstance(m, nn.Linear):
            nn.init.trunc_normal_(m.weight, std=0.02)
            if m.bias is not None:
                nn.init.zeros_(m.bias)

    def embed(self, state, topography=None):
        """Token grid [B, Z, Hh, Ww, D] of a normalized state [B, C, H, W]."""
        cfg = self.cfg
        b, c, h, w = state.shape
        if c != cfg.n_channels:
            raise ForecastError(f"state has {c} channels, model expects {cfg.n_channels}")
        surf = state[:, : cfg.n_surface]
        if cfg.use_topography:
            if topography is None:
                raise ForecastError("this model needs a topography field")
            topo = topography.to(state.dtype).expand(b, 1, h, w)
            surf = torch.cat([surf, topo], dim=1)
        upper = state[:, cfg.n_surface:].reshape(b, cfg.n_levels, cfg.n_pressure_vars, h, w)
        upper = upper.transpose(1, 2)  # [B, V, L, H, W]
        ts = self.surface_embed(surf)  # [B, D, Hh, Ww]
        tp = self.pressure_embed(upper)  # [B, D, Zp, Hh, Ww]
        tokens = torch.cat([ts[:, :, None], tp], dim=2)
        return tokens.permute(0, 2, 3, 4, 1)

    def _run(self, blocks, x, name):
        for i, blk in enumerate(blocks):
            x = blk(x)
            if not torch.isfinite(x).all():
                raise ForecastError(f"non-finite activations after {name}.{i}")
        return x

    def forward(self, state, boundary=None, topography=None):
        cfg = self.cfg
        b, c, h, w = state.shape
        tokens = self.embed(state, topography)
        _, z, hh, ww, _ = tokens.shape
        x = self.boundary_embed(tokens, boundary, h, w)
        hr, wr = hh + 2, ww + 2
        x1 = self._run(self.layer1, x, "layer1")
        x = self._run(self.layer2, self.down(x1), "layer2")
        x = self.up(x, hr, wr)
        if self.fuse is not None:
            x = self.fuse(torch.cat([x, x1], dim=-1))
        x = self._run(self.layer3, x, "layer3")
        x = self.norm_out(x[:, :, 1:-1, 1:-1])
        x = x.permute(0, 4, 1, 2, 3)  # [B, D, Z, Hh, Ww]
        surf = self.surface_out(x[:, :, 0])[:, :, :h, :w]
        upper = self.pressure_out(x[:, :, 1:])[:, :, : cfg.n_levels, :h, :w]
        upper = upper.transpose(1, 2).reshape(b, cfg.n_levels * cfg.n_pressure_vars, h, w)
        out = torch.cat([surf, upper], dim=1)
        if not torch.isfinite(out).all():
            raise ForecastError("non-finite values in patch recovery")
        return out


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


def toy_config(n_surface=2, n_pressure_vars=2, n_levels=3, embed_dim=16, sliding=True,
               depths=(2, 2, 2), heads=(2, 2, 2), window=(2, 3, 3), patch=2, mlp_ratio=2.0,
               lead_hours=1, **kw) -> ForecasterConfig:
    """Small configuration for CPU tests and the toy profile."""
    bw = kw.get("boundary_width", 4)
    embed = EmbedConfig(surface_patch=(patch, patch), surface_kernel=(patch + 3, patch + 3),
                        pressure_patch=(2, patch, patch), pressure_kernel=(3, patch + 3, patch + 3),
                        boundary_patch=(bw, patch), boundary_kernel=(bw + 3, patch + 3),
                        embed_dim=embed_dim, sliding=sliding)
    return ForecasterConfig(n_surface=n_surface, n_pressure_vars=n_pressure_vars,
                            n_levels=n_levels, embed=embed, depths=depths, heads=heads,
                            window=window, mlp_ratio=mlp_ratio, lead_hours=lead_hours, **kw)

