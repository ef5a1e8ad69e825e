"""Velocity network over coordinate-value sets.

Pipeline: each latent (optionally tied to a pseudo-coordinate) cross-attends to
the input pairs assigned to it, the latents are refined by self-attention
blocks modulated by the time/class embedding, and every query pair then
cross-attends to the refined latents on its own to produce a velocity. No
operation mixes information between queries, so decoding any subset of
queries gives exactly the corresponding rows of the full decode.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
import torch
from torch import nn

from .errors import ConfigError, ContractError
from .fields import FourierEmbeddingConfig, fourier_embed, grid_coords

PSEUDO_COORD_MODES = ("grid", "random", "kmeans_pp", "hash", "vanilla")
POSITIONAL_MODES = ("fourier", "fourier_plus_rope")


@dataclass
class ModelConfig:
    d_in: int = 2
    d_out: int = 3
    num_latents: int = 16
    latent_dim: int = 64
    trunk_layers: int = 2
    heads: int = 4
    decoder_layers: int = 1
    pseudo_coord_mode: str = "grid"
    positional_mode: str = "fourier"
    fourier: FourierEmbeddingConfig = field(default_factory=FourierEmbeddingConfig)
    condition_vocab: Optional[int] = None
    # point clouds: the (noisy) point itself serves as its coordinate
    values_as_coords: bool = False
    mlp_ratio: int = 4
    time_freq_dim: int = 64
    dtype: str = "float32"

    def __post_init__(self):
        if isinstance(self.fourier, dict):
            self.fourier = FourierEmbeddingConfig(**self.fourier)

    def validate(self):
        if self.pseudo_coord_mode not in PSEUDO_COORD_MODES:
            raise ConfigError(f"pseudo_coord_mode must be one of {PSEUDO_COORD_MODES}, got {self.pseudo_coord_mode!r}")
        if self.positional_mode not in POSITIONAL_MODES:
            raise ConfigError(f"positional_mode must be one of {POSITIONAL_MODES}, got {self.positional_mode!r}")
        if self.num_latents < 1 or self.latent_dim < 1 or self.heads < 1:
            raise ConfigError("num_latents, latent_dim and heads must be positive")
        if self.latent_dim % self.heads:
            raise ConfigError(f"latent_dim={self.latent_dim} is not divisible by heads={self.heads}")
        if self.trunk_layers < 0 or self.decoder_layers < 1:
            raise ConfigError("trunk_layers must be >= 0 and decoder_layers >= 1")
        if self.values_as_coords and self.d_in != self.d_out:
            raise ConfigError("values_as_coords requires d_in == d_out")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")
        if self.positional_mode == "fourier_plus_rope":
            if self.pseudo_coord_mode in ("hash", "vanilla"):
                raise ConfigError("RoPE needs pseudo-coordinates; not available in hash/vanilla mode")
            if (self.latent_dim // self.heads) % (2 * self.d_in):
                raise ConfigError("RoPE needs head dim divisible by 2 * d_in")
        if self.pseudo_coord_mode == "grid":
            _grid_side(self.num_latents, self.d_in)
        # raises on an empty embedding
        fourier_embed(np.zeros((1, self.d_in)), self.fourier)

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def torch_dtype(self):
        return torch.float64 if self.dtype == "float64" else torch.float32


@dataclass
class LatentState:
    pseudo_coords: np.ndarray  # (L, d_in), empty for hash/vanilla
    assignment: Optional[np.ndarray]  # (B, N) latent index per input, None for vanilla
    z: torch.Tensor  # (B, L, D)


# -- pseudo-coordinates and grouping -----------------------------------------------------


def _grid_side(num_latents: int, d_in: int) -> int:
    side = round(num_latents ** (1.0 / d_in))
    if side**d_in != num_latents:
        raise ConfigError(f"grid pseudo-coordinates need num_latents to be a perfect {d_in}-th power, got {num_latents}")
    return side


def make_pseudo_coords(mode: str, num_latents: int, d_in: int, data_coords=None, seed: int = 0) -> np.ndarray:
    if num_latents < 1:
        raise ConfigError("num_latents must be >= 1")
    if mode == "grid":
        return grid_coords(_grid_side(num_latents, d_in), d_in)
    if mode == "random":
        return np.random.default_rng(seed).uniform(-1.0, 1.0, (num_latents, d_in))
    if mode == "kmeans_pp":
        if data_coords is None:
            raise ConfigError("kmeans_pp pseudo-coordinates need data coordinates")
        from sklearn.cluster import kmeans_plusplus

        pts = np.asarray(data_coords, dtype=np.float64).reshape(-1, d_in)
        centers, _ = kmeans_plusplus(pts, num_latents, random_state=seed)
        return centers
    if mode in ("hash", "vanilla"):
        return np.zeros((0, d_in))
    raise ConfigError(f"unknown pseudo-coordinate mode {mode!r}")


def _splitmix64(x: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        z = x + np.uint64(0x9E3779B97F4A7C15)
        z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        return z ^ (z >> np.uint64(31))


def hash_cells_per_axis(num_latents: int, d_in: int) -> int:
    k = max(1, int(math.floor(num_latents ** (1.0 / d_in))))
    while k**d_in < num_latents:
        k += 1
    return k


def assign_to_latents(coords, pseudo, mode: str, num_latents: Optional[int] = None) -> np.ndarray:
    """Latent index for every input coordinate, shape ``coords.shape[:-1]``.

    Nearest pseudo-coordinate (ties to the lowest index) for grid/random/
    kmeans_pp; for hash mode a mixed hash of the coordinate's lattice cell
    (cell size 2 / ceil(L^(1/d))) modulo L.
    """
    coords = np.asarray(coords, dtype=np.float64)
    if mode == "vanilla":
        raise ContractError("vanilla mode has no input-to-latent assignment")
    if mode == "hash":
        if not num_latents:
            raise ContractError("hash assignment needs num_latents")
        d = coords.shape[-1]
        k = hash_cells_per_axis(num_latents, d)
        cells = np.clip(np.floor((coords + 1.0) * k / 2.0), 0, k - 1).astype(np.uint64)
        cell_id = np.zeros(coords.shape[:-1], dtype=np.uint64)
        for a in range(d):
            cell_id = cell_id * np.uint64(k) + cells[..., a]
        return (_splitmix64(cell_id) % np.uint64(num_latents)).astype(np.int64)
    pseudo = np.asarray(pseudo, dtype=np.float64)
    if len(pseudo) == 0:
        raise ContractError(f"mode {mode!r} needs a non-empty pseudo-coordinate set")
    d2 = np.sum((coords[..., :, None, :] - pseudo) ** 2, axis=-1)
    return np.argmin(d2, axis=-1)


# -- building blocks ---------------------------------------------------------------------


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=t.dtype) / half)
    args = 1000.0 * t[:, None] * freqs[None]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = torch.cat([emb, torch.zeros_like(emb[:, :1])], dim=-1)
    return emb


def rope_angles(pseudo: np.ndarray, head_dim: int, fourier: FourierEmbeddingConfig) -> torch.Tensor:
    """Axial rotary angles (L, head_dim // 2) from pseudo-coordinates."""
    d_in = pseudo.shape[1]
    pairs = head_dim // (2 * d_in)
    freqs = np.geomspace(1.0, fourier.max_frequency, pairs) * math.pi
    ang = pseudo[:, :, None] * freqs[None, None, :]  # (L, d_in, pairs)
    return torch.from_numpy(ang.reshape(len(pseudo), -1))


def apply_rope(x: torch.Tensor, angles: torch.Tensor) -> torch.Tensor:
    # x: (B, h, L, dh); rotate consecutive channel pairs
    x1, x2 = x[..., 0::2], x[..., 1::2]
    cos, sin = angles.cos().to(x.dtype), angles.sin().to(x.dtype)
    return torch.stack([x1 * cos - x2 * sin, x1 * sin + x2 * cos], dim=-1).flatten(-2)


class Attention(nn.Module):
    def __init__(self, dim, heads, context_dim=None):
        super().__init__()
        self.heads = heads
        self.to_q = nn.Linear(dim, dim)
        self.to_kv = nn.Linear(context_dim or dim, 2 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x, context=None, mask=None, rope=None):
        """
        Args:
            x: (B, Lq, D) queries
            context: (B, Lk, Dc) keys/values; defaults to ``x``
            mask: optional (B, Lq, Lk) bool, True where attention is allowed
            rope: optional (Lq, dh/2) rotary angles (self-attention only)
        """
        context = x if context is None else context
        B, Lq, D = x.shape
        h = self.heads
        q = self.to_q(x).view(B, Lq, h, D // h).transpose(1, 2)
        k, v = self.to_kv(context).view(B, context.shape[1], 2, h, D // h).permute(2, 0, 3, 1, 4)
        if rope is not None:
            q, k = apply_rope(q, rope), apply_rope(k, rope)
        logits = (q @ k.transpose(-2, -1)) / math.sqrt(D // h)
        if mask is not None:
            logits = logits.masked_fill(~mask[:, None], float("-inf"))
        out = logits.softmax(dim=-1) @ v
        return self.proj(out.transpose(1, 2).reshape(B, Lq, D))


class FeedForward(nn.Sequential):
    def __init__(self, dim, mult=4):
        super().__init__(nn.Linear(dim, dim * mult), nn.GELU(), nn.Linear(dim * mult, dim))


def modulate(x, shift, scale):
    return x * (1 + scale[:, None]) + shift[:, None]


class TrunkBlock(nn.Module):
    """Pre-norm self-attention block with adaLN-Zero modulation."""

    def __init__(self, dim, heads, mlp_ratio):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim, elementwise_affine=False, eps=1e-6)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim, elementwise_affine=False, eps=1e-6)
        self.mlp = FeedForward(dim, mlp_ratio)
        self.modulation = nn.Sequential(nn.SiLU(), nn.Linear(dim, 6 * dim))

    def forward(self, x, c, rope=None):
        shift1, scale1, gate1, shift2, scale2, gate2 = self.modulation(c).chunk(6, dim=-1)
        x = x + gate1[:, None] * self.attn(modulate(self.norm1(x), shift1, scale1), rope=rope)
        x = x + gate2[:, None] * self.mlp(modulate(self.norm2(x), shift2, scale2))
        return x


class CrossBlock(nn.Module):
    def __init__(self, dim, heads, mlp_ratio):
        super().__init__()
        self.norm_q = nn.LayerNorm(dim)
        self.norm_kv = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.norm_ff = nn.LayerNorm(dim)
        self.mlp = FeedForward(dim, mlp_ratio)

    def attend(self, x, context, mask=None):
        return self.attn(self.norm_q(x), self.norm_kv(context), mask=mask)

    def feed_forward(self, x):
        return x + self.mlp(self.norm_ff(x))


# -- the network -------------------------------------------------------------------------


class INRFlow(nn.Module):
    def __init__(self, config: ModelConfig, data_coords=None, seed: int = 0, pseudo_coords=None):
        super().__init__()
        config.validate()
        self.config = config
        self.seed = seed
        D = config.latent_dim
        emb_dim = config.fourier.output_dim(config.d_in)

        if pseudo_coords is None:
            pseudo = make_pseudo_coords(config.pseudo_coord_mode, config.num_latents, config.d_in, data_coords, seed)
        else:
            pseudo = np.asarray(pseudo_coords, dtype=np.float64)
        self.register_buffer("pseudo_coords", torch.from_numpy(np.ascontiguousarray(pseudo)))

        self.input_proj = nn.Linear(emb_dim + config.d_out, D)
        self.latents = nn.Parameter(torch.zeros(config.num_latents, D))
        self.latent_pos_proj = nn.Linear(emb_dim, D)
        self.empty_group = nn.Parameter(torch.zeros(D))
        self.encoder = CrossBlock(D, config.heads, config.mlp_ratio)

        self.time_mlp = nn.Sequential(nn.Linear(config.time_freq_dim, D), nn.SiLU(), nn.Linear(D, D))
        # last row is the learned null condition used for guidance
        self.class_embed = nn.Embedding(config.condition_vocab + 1, D) if config.condition_vocab else None

        self.trunk_blocks = nn.ModuleList(
            [TrunkBlock(D, config.heads, config.mlp_ratio) for _ in range(config.trunk_layers)]
        )

        self.query_proj = nn.Linear(emb_dim + config.d_out, D)
        self.query_cond = nn.Linear(D, D)
        self.decoder_blocks = nn.ModuleList(
            [CrossBlock(D, config.heads, config.mlp_ratio) for _ in range(config.decoder_layers)]
        )
        self.out_norm = nn.LayerNorm(D)
        self.head = nn.Linear(D, config.d_out)

        self.reset_parameters(seed)
        self.to(config.torch_dtype)
        self._rope = None
        if config.positional_mode == "fourier_plus_rope":
            pseudo = self.pseudo_coords.cpu().numpy().astype(np.float64)
            self._rope = rope_angles(pseudo, D // config.heads, config.fourier)

    def reset_parameters(self, seed: int = 0):
        gen = torch.Generator().manual_seed(seed)
        for module in self.modules():
            if isinstance(module, nn.Linear):
                nn.init.trunc_normal_(module.weight, std=0.02, a=-0.04, b=0.04, generator=gen)
                nn.init.zeros_(module.bias)
            elif isinstance(module, nn.Embedding):
                nn.init.trunc_normal_(module.weight, std=0.02, a=-0.04, b=0.04, generator=gen)
            elif isinstance(module, nn.LayerNorm) and module.elementwise_affine:
                nn.init.ones_(module.weight)
                nn.init.zeros_(module.bias)
        nn.init.trunc_normal_(self.latents, std=0.02, a=-0.04, b=0.04, generator=gen)
        nn.init.trunc_normal_(self.empty_group, std=0.02, a=-0.04, b=0.04, generator=gen)
        for block in self.trunk_blocks:
            nn.init.zeros_(block.modulation[-1].weight)
            nn.init.zeros_(block.modulation[-1].bias)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    @property
    def dtype(self):
        return self.config.torch_dtype

    def num_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def as_tensor(self, x):
        if isinstance(x, torch.Tensor):
            return x.to(self.dtype)
        return torch.tensor(np.asarray(x), dtype=self.dtype)

    # -- stages --------------------------------------------------------------------------

    def embed_conditions(self, t, condition=None) -> torch.Tensor:
        """Time embedding plus class (or null) embedding, shape (B, D)."""
        t = self.as_tensor(t).reshape(-1)
        c = self.time_mlp(timestep_embedding(t, self.config.time_freq_dim))
        if self.class_embed is not None:
            null = self.config.condition_vocab
            if condition is None:
                idx = torch.full((len(t),), null, dtype=torch.long)
            else:
                idx = torch.as_tensor(np.asarray(condition), dtype=torch.long).reshape(-1)
                if idx.numel() == 1 and len(t) > 1:
                    idx = idx.expand(len(t))
                if ((idx >= null) | (idx < -1)).any():
                    raise ContractError(f"condition ids must lie in [-1, {null - 1}]")
                idx = torch.where(idx < 0, torch.full_like(idx, null), idx)
            c = c + self.class_embed(idx)
        return c

    def _tokens(self, proj, coords, values):
        return proj(torch.cat([fourier_embed(coords, self.config.fourier), values], dim=-1))

    def encode(self, coords, values, t=None, condition=None, cond_emb=None) -> LatentState:
        """Cross-attend each latent to its assigned input pairs.

        Either ``t`` (with optional ``condition``) or a precomputed ``cond_emb``
        must be given. Returns the pre-trunk latents.
        """
        cfg = self.config
        values = self.as_tensor(values)
        coords = values if cfg.values_as_coords else self.as_tensor(coords)
        if coords.ndim != 3 or values.ndim != 3 or coords.shape[:2] != values.shape[:2]:
            raise ContractError(f"coords {tuple(coords.shape)} and values {tuple(values.shape)} must be (B, N, .)")
        if coords.shape[-1] != cfg.d_in or values.shape[-1] != cfg.d_out:
            raise ContractError(f"expected d_in={cfg.d_in}, d_out={cfg.d_out}")
        if cond_emb is None:
            cond_emb = self.embed_conditions(t, condition)
        B = coords.shape[0]

        tokens = self._tokens(self.input_proj, coords, values)
        lat = self.latents
        pseudo = self.pseudo_coords.cpu().numpy()
        if len(pseudo):
            lat = lat + self.latent_pos_proj(fourier_embed(self.pseudo_coords, cfg.fourier))
        lat = lat.expand(B, -1, -1)

        assignment, mask, empty = None, None, None
        if cfg.pseudo_coord_mode != "vanilla":
            assignment = assign_to_latents(coords.detach().cpu().numpy(), pseudo, cfg.pseudo_coord_mode, cfg.num_latents)
            onehot = assignment[:, None, :] == np.arange(cfg.num_latents)[None, :, None]
            empty_np = ~onehot.any(axis=-1)
            onehot[empty_np] = True  # keeps softmax finite; output replaced below
            mask, empty = torch.from_numpy(onehot), torch.from_numpy(empty_np)

        update = self.encoder.attend(lat, tokens, mask)
        if empty is not None and bool(empty.any()):
            update = torch.where(empty[..., None], self.empty_group.expand_as(update), update)
        lat = self.encoder.feed_forward(lat + update)
        z = lat + cond_emb[:, None]
        return LatentState(pseudo, assignment, z)

    def trunk(self, z, cond_emb):
        for block in self.trunk_blocks:
            z = block(z, cond_emb, rope=self._rope)
        return z

    def decode(self, query_coords, query_values, z, cond_emb):
        """Per-query velocities (B, M, d_out); each row sees only its own query and ``z``."""
        cfg = self.config
        qv = self.as_tensor(query_values)
        qc = qv if cfg.values_as_coords else self.as_tensor(query_coords)
        if qc.ndim != 3 or qc.shape[:2] != qv.shape[:2] or qc.shape[0] != z.shape[0]:
            raise ContractError(f"query coords {tuple(qc.shape)} / values {tuple(qv.shape)} do not match latents")
        q = self._tokens(self.query_proj, qc, qv) + self.query_cond(cond_emb)[:, None]
        for block in self.decoder_blocks:
            q = block.feed_forward(q + block.attend(q, z))
        return self.head(self.out_norm(q))

    def forward(self, coords, values, query_coords, query_values, t, condition=None):
        cond_emb = self.embed_conditions(t, condition)
        state = self.encode(coords, values, cond_emb=cond_emb)
        z = self.trunk(state.z, cond_emb)
        return self.decode(query_coords, query_values, z, cond_emb)


# -- parameter averaging -----------------------------------------------------------------


def ema_init(model: nn.Module) -> dict:
    return {k: p.detach().clone() for k, p in model.named_parameters()}


@torch.no_grad()
def ema_update(params: dict, shadow: dict, decay: float) -> dict:
    """shadow <- decay * shadow + (1 - decay) * params, in place; returns ``shadow``."""
    if not 0.0 <= decay <= 1.0:
        raise ContractError(f"decay must lie in [0, 1], got {decay}")
    if params.keys() != shadow.keys():
        raise ContractError("params and shadow have different keys")
    for k, s in shadow.items():
        p = params[k]
        if p.shape != s.shape:
            raise ContractError(f"shape mismatch for {k}: {tuple(p.shape)} vs {tuple(s.shape)}")
        s.mul_(decay).add_(p.detach(), alpha=1.0 - decay)
    return shadow


def load_shadow(model: nn.Module, shadow: dict) -> nn.Module:
    """Copy ``shadow`` into ``model``'s parameters (used to sample from EMA weights)."""
    with torch.no_grad():
        for k, p in model.named_parameters():
            p.copy_(shadow[k])
    return model
