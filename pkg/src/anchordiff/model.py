"""Sequence diffusion transformer operating on pixel patches of T frames.

Every frame of a sequence is cut into ``(H/p)**2`` patches; all ``T * Np``
tokens attend to each other jointly. Frame ``t`` is modulated through adaLN by
its own conditioning vector ``C_t`` (mapping network output) plus the diffusion
timestep embedding.
"""

from __future__ import annotations

import dataclasses
import json
import math
import struct
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigurationError, ValidationError
from .synthetic import NUM_CONTROL_POINTS, global_signal_dim

GUIDANCE_MODES = ("both", "local_only", "global_only", "none")

Hook = Callable[[int, torch.Tensor], Optional[torch.Tensor]]


@dataclasses.dataclass(frozen=True)
class ModelConfig:
    image_size: int = 32
    channels: int = 3
    patch_size: int = 2
    frames_per_sequence: int = 4
    hidden_dim: int = 128
    depth: int = 4
    num_heads: int = 4
    global_dim: int = global_signal_dim(3)
    local_dim: int = 2 * NUM_CONTROL_POINTS
    timestep_embed_dim: int = 64
    predict_sigma: bool = False
    mapping_blocks: int = 4
    mlp_ratio: float = 4.0
    t_max: int = 1000
    guidance: str = "both"

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ConfigurationError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.hidden_dim % self.num_heads:
            raise ConfigurationError(f"hidden_dim {self.hidden_dim} not divisible by num_heads {self.num_heads}")
        if self.hidden_dim % 2 or self.timestep_embed_dim % 2:
            raise ConfigurationError("hidden_dim and timestep_embed_dim must be even")
        if self.guidance not in GUIDANCE_MODES:
            raise ConfigurationError(f"guidance must be one of {GUIDANCE_MODES}")
        if self.frames_per_sequence < 1 or self.depth < 1 or self.t_max < 2:
            raise ConfigurationError("frames_per_sequence, depth must be >= 1 and t_max >= 2")

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def out_channels(self) -> int:
        return 2 * self.channels if self.predict_sigma else self.channels

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


# -- tensor layout helpers ----------------------------------------------------

def patchify(frames: torch.Tensor, p: int) -> torch.Tensor:
    """[..., H, W, C] -> [..., Np, p*p*C]; raster patch order, (row, col, channel) inside a patch."""
    *lead, h, w, c = frames.shape
    if h % p or w % p:
        raise ConfigurationError(f"frame {h}x{w} not divisible by patch size {p}")
    x = frames.reshape(*lead, h // p, p, w // p, p, c)
    x = x.movedim(-4, -3)  # [..., h/p, w/p, p, p, c]
    return x.reshape(*lead, (h // p) * (w // p), p * p * c)


def unpatchify(patches: torch.Tensor, p: int, height: int, width: int | None = None) -> torch.Tensor:
    """Inverse of :func:`patchify`."""
    width = height if width is None else width
    if height % p or width % p:
        raise ConfigurationError(f"frame {height}x{width} not divisible by patch size {p}")
    *lead, n, d = patches.shape
    gh, gw = height // p, width // p
    if n != gh * gw or d % (p * p):
        raise ValidationError(f"patch tensor {tuple(patches.shape)} does not match a {height}x{width} frame")
    c = d // (p * p)
    x = patches.reshape(*lead, gh, gw, p, p, c).movedim(-3, -4)
    return x.reshape(*lead, height, width, c)


def temporal_positional_encoding(T: int, D: int, dtype=torch.float64) -> torch.Tensor:
    """Rows ``[sin(t w_0), cos(t w_0), sin(t w_1), ...]`` with ``w_i = 10000**(-2i/D)``."""
    if D % 2:
        raise ConfigurationError(f"encoding width must be even, got {D}")
    t = torch.arange(T, dtype=torch.float64)[:, None]
    freq = 10000.0 ** (-torch.arange(0, D, 2, dtype=torch.float64) / D)
    pe = torch.empty(T, D, dtype=torch.float64)
    pe[:, 0::2] = torch.sin(t * freq)
    pe[:, 1::2] = torch.cos(t * freq)
    return pe.to(dtype)


def spatial_positional_encoding(grid: int, D: int) -> torch.Tensor:
    """2-D sin-cos table [grid*grid, D]; first half encodes rows, second half columns."""
    half = D // 2
    if half % 2:
        raise ConfigurationError("hidden_dim must be divisible by 4 for the spatial encoding")
    rows = temporal_positional_encoding(grid, half)
    ys, xs = torch.meshgrid(torch.arange(grid), torch.arange(grid), indexing="ij")
    return torch.cat([rows[ys.reshape(-1)], rows[xs.reshape(-1)]], dim=-1)


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64)[:, None] * freqs[None]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


def modulate(x, shift, scale):
    return x * (1 + scale) + shift


# -- modules ------------------------------------------------------------------

class ResidualBlock(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.norm = nn.LayerNorm(dim)
        self.fc1 = nn.Linear(dim, dim)
        self.fc2 = nn.Linear(dim, dim)

    def forward(self, x):
        return x + self.fc2(F.silu(self.fc1(self.norm(x))))


class MappingNetwork(nn.Module):
    """Fuses the global signal G and each local signal L_t into C_t."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        D = cfg.hidden_dim
        self.global_proj = nn.Linear(cfg.global_dim, D)
        self.local_proj = nn.Linear(cfg.local_dim, D)
        self.in_proj = nn.Linear(2 * D, D)
        self.blocks = nn.ModuleList(ResidualBlock(D) for _ in range(cfg.mapping_blocks))
        self.use_global = cfg.guidance in ("both", "global_only")
        self.use_local = cfg.guidance in ("both", "local_only")

    def input_projection(self, G: torch.Tensor, L: torch.Tensor) -> torch.Tensor:
        if not self.use_global:
            G = torch.zeros_like(G)
        if not self.use_local:
            L = torch.zeros_like(L)
        g = self.global_proj(G)[:, None, :].expand(-1, L.shape[1], -1)
        return self.in_proj(torch.cat([g, self.local_proj(L)], dim=-1))

    def forward(self, G: torch.Tensor, L: torch.Tensor) -> torch.Tensor:
        h = self.input_projection(G, L)
        for blk in self.blocks:
            h = blk(h)
        return h


class Attention(nn.Module):
    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        self.num_heads = num_heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x):
        B, N, D = x.shape
        qkv = self.qkv(x).reshape(B, N, 3, self.num_heads, D // self.num_heads).permute(2, 0, 3, 1, 4)
        out = F.scaled_dot_product_attention(qkv[0], qkv[1], qkv[2])
        return self.proj(out.transpose(1, 2).reshape(B, N, D))


class SDiTBlock(nn.Module):
    """Transformer block with per-frame adaLN-Zero modulation."""

    def __init__(self, dim: int, num_heads: int, mlp_ratio: float):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim, elementwise_affine=False, eps=1e-6)
        self.attn = Attention(dim, num_heads)
        self.norm2 = nn.LayerNorm(dim, elementwise_affine=False, eps=1e-6)
        hidden = int(dim * mlp_ratio)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(approximate="tanh"), nn.Linear(hidden, dim))
        self.adaLN_modulation = nn.Sequential(nn.SiLU(), nn.Linear(dim, 6 * dim))

    def forward(self, x: torch.Tensor, c: torch.Tensor, T: int) -> torch.Tensor:
        # x: [B, T*Np, D], c: [B, T, D]
        B, N, D = x.shape
        mod = self.adaLN_modulation(c)[:, :, None, :]  # [B, T, 1, 6D]
        shift1, scale1, gate1, shift2, scale2, gate2 = mod.chunk(6, dim=-1)
        h = self.norm1(x).view(B, T, -1, D)
        h = modulate(h, shift1, scale1).reshape(B, N, D)
        x = x + (gate1 * self.attn(h).view(B, T, -1, D)).reshape(B, N, D)
        h = modulate(self.norm2(x).view(B, T, -1, D), shift2, scale2)
        return x + (gate2 * self.mlp(h)).reshape(B, N, D)


class FinalLayer(nn.Module):
    def __init__(self, dim: int, out_dim: int):
        super().__init__()
        self.norm = nn.LayerNorm(dim, elementwise_affine=False, eps=1e-6)
        self.linear = nn.Linear(dim, out_dim)
        self.adaLN_modulation = nn.Sequential(nn.SiLU(), nn.Linear(dim, 2 * dim))

    def forward(self, x, c, T):
        B, N, D = x.shape
        shift, scale = self.adaLN_modulation(c)[:, :, None, :].chunk(2, dim=-1)
        h = modulate(self.norm(x).view(B, T, -1, D), shift, scale)
        return self.linear(h)  # [B, T, Np, out]


class SDiT(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.trained_steps = 0
        D = cfg.hidden_dim
        p = cfg.patch_size
        self.x_embedder = nn.Linear(p * p * cfg.channels, D)
        self.t_embedder = nn.Sequential(
            nn.Linear(cfg.timestep_embed_dim, D), nn.SiLU(), nn.Linear(D, D)
        )
        self.mapping = MappingNetwork(cfg)
        self.blocks = nn.ModuleList(SDiTBlock(D, cfg.num_heads, cfg.mlp_ratio) for _ in range(cfg.depth))
        self.final_layer = FinalLayer(D, p * p * cfg.out_channels)
        self.register_buffer(
            "pos_embed", spatial_positional_encoding(cfg.image_size // p, D).float(), persistent=False
        )
        self.initialize_weights()

    def initialize_weights(self, zero_gates: bool = True) -> None:
        def _basic(m):
            if isinstance(m, nn.Linear):
                nn.init.xavier_uniform_(m.weight)
                nn.init.zeros_(m.bias)

        self.apply(_basic)
        nn.init.normal_(self.t_embedder[0].weight, std=0.02)
        nn.init.normal_(self.t_embedder[2].weight, std=0.02)
        for blk in self.mapping.blocks:
            nn.init.zeros_(blk.fc2.weight)
            nn.init.zeros_(blk.fc2.bias)
        if zero_gates:
            for blk in self.blocks:
                nn.init.zeros_(blk.adaLN_modulation[-1].weight)
                nn.init.zeros_(blk.adaLN_modulation[-1].bias)
            nn.init.zeros_(self.final_layer.adaLN_modulation[-1].weight)
            nn.init.zeros_(self.final_layer.adaLN_modulation[-1].bias)

    # the forward pass is split so that inference code can drive it block by block

    def conditioning(self, t: torch.Tensor, G: torch.Tensor, L: torch.Tensor) -> torch.Tensor:
        """Per-frame modulation input ``C_t + emb(t)``, shape [B, T, D]."""
        cfg = self.cfg
        if G.shape[-1] != cfg.global_dim or L.shape[-1] != cfg.local_dim:
            raise ValidationError(
                f"signal widths {G.shape[-1]}/{L.shape[-1]} do not match config {cfg.global_dim}/{cfg.local_dim}"
            )
        if G.shape[0] != L.shape[0]:
            raise ValidationError("global and local signals disagree on batch size")
        temb = self.t_embedder(timestep_embedding(t, cfg.timestep_embed_dim).to(G.dtype))
        return self.mapping(G, L) + temb[:, None, :]

    def embed(self, x: torch.Tensor) -> torch.Tensor:
        """Noisy frames [B, T, H, W, C] -> tokens [B, T*Np, D] with spatial and temporal encodings."""
        B, T = x.shape[:2]
        tokens = self.x_embedder(patchify(x, self.cfg.patch_size))  # [B, T, Np, D]
        tpe = temporal_positional_encoding(T, self.cfg.hidden_dim, dtype=tokens.dtype)
        tokens = tokens + self.pos_embed.to(tokens.dtype)[None, None] + tpe[None, :, None, :]
        return tokens.reshape(B, T * self.cfg.num_patches, self.cfg.hidden_dim)

    def head(self, tokens: torch.Tensor, c: torch.Tensor) -> torch.Tensor:
        cfg = self.cfg
        T = c.shape[1]
        out = self.final_layer(tokens, c, T)
        return unpatchify(out, cfg.patch_size, cfg.image_size)

    def check_timestep(self, t: torch.Tensor) -> None:
        if t.min() < 0 or t.max() >= self.cfg.t_max:
            raise ValidationError(f"timestep outside [0, {self.cfg.t_max})")

    def forward(
        self,
        x: torch.Tensor,
        t: torch.Tensor,
        G: torch.Tensor,
        L: torch.Tensor,
        hook: Hook | None = None,
    ) -> torch.Tensor:
        """Predict noise for frames ``x`` [B, T, H, W, C] at integer timesteps ``t`` [B].

        ``hook(block_index, tokens)`` runs after every block on the [B, T*Np, D]
        token state; it may modify the tensor in place or return a replacement.
        With ``predict_sigma`` the output carries 2C channels (noise, log-variance).
        """
        t = torch.as_tensor(t).reshape(-1)
        self.check_timestep(t)
        if x.shape[0] != G.shape[0] or x.shape[1] != L.shape[1]:
            raise ValidationError("frames and signals disagree on batch or sequence length")
        c = self.conditioning(t.expand(x.shape[0]) if t.numel() == 1 else t, G, L)
        h = self.embed(x)
        for i, blk in enumerate(self.blocks):
            h = blk(h, c, x.shape[1])
            if hook is not None:
                r = hook(i, h)
                if r is not None:
                    h = r
        return self.head(h, c)


def split_prediction(out: torch.Tensor, channels: int) -> tuple[torch.Tensor, torch.Tensor | None]:
    if out.shape[-1] == channels:
        return out, None
    return out[..., :channels], out[..., channels:]


def mapping_parameter_names(model: SDiT) -> set[str]:
    return {f"mapping.{n}" for n, _ in model.mapping.named_parameters()}


# -- SDT1 checkpoints ---------------------------------------------------------

CKPT_MAGIC = b"SDT1"


def save_checkpoint(model: SDiT, path: str | Path) -> None:
    header = dict(model.cfg.to_dict(), trained_steps=model.trained_steps)
    cfg_bytes = json.dumps(header, sort_keys=True).encode()
    params = list(model.named_parameters())
    chunks = [CKPT_MAGIC, struct.pack("<I", len(cfg_bytes)), cfg_bytes, struct.pack("<I", len(params))]
    for name, p in params:
        nb = name.encode()
        arr = p.detach().cpu().numpy().astype("<f4")
        chunks.append(struct.pack("<I", len(nb)) + nb)
        chunks.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path: str | Path) -> SDiT:
    buf = Path(path).read_bytes()
    if buf[:4] != CKPT_MAGIC:
        raise ValidationError(f"{path} is not an SDT1 checkpoint")
    off = 4
    (n,) = struct.unpack_from("<I", buf, off)
    off += 4
    header = json.loads(buf[off:off + n])
    cfg = ModelConfig.from_dict(header)
    off += n
    (count,) = struct.unpack_from("<I", buf, off)
    off += 4
    model = SDiT(cfg)
    model.trained_steps = int(header.get("trained_steps", 0))
    expected = dict(model.named_parameters())
    if count != len(expected):
        raise ValidationError(f"checkpoint has {count} segments, config implies {len(expected)}")
    total = 0
    with torch.no_grad():
        for _ in range(count):
            (ln,) = struct.unpack_from("<I", buf, off)
            off += 4
            name = buf[off:off + ln].decode()
            off += ln
            (rank,) = struct.unpack_from("<I", buf, off)
            off += 4
            dims = struct.unpack_from(f"<{rank}I", buf, off)
            off += 4 * rank
            size = int(np.prod(dims)) if rank else 1
            arr = np.frombuffer(buf, dtype="<f4", count=size, offset=off).reshape(dims)
            off += 4 * size
            if name not in expected or tuple(expected[name].shape) != tuple(dims):
                raise ValidationError(f"unexpected segment {name} {dims}")
            expected[name].copy_(torch.from_numpy(arr.copy()))
            total += size
    if total != parameter_count(cfg):
        raise ValidationError("parameter count does not match config")
    return model


def parameter_count(cfg: ModelConfig) -> int:
    return sum(p.numel() for p in SDiT(cfg).parameters())
