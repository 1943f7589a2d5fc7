"""Miniature velocity network: joint-attention blocks over audio and semantic
tokens, audio-only DiT blocks, adaLN conditioning and step-size awareness."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, DimensionError, RangeError, UnsupportedDownsampleError
from .numerics import adaln_modulate, attention, layer_norm, rope_apply

SEMANTIC_RATIO = 8 / 43
SYNC_RATIO = 24 / 43
GRACE = 0.05


@dataclass
class ModelConfig:
    audio_dim: int = 64
    model_dim: int = 128
    heads: int = 4
    n_mm_blocks: int = 2
    n_mm_blocks_with_audio_self_attn: int = 1
    n_single_blocks: int = 2
    semantic_dim: int = 16
    sync_dim: int = 8
    text_dim: int = 16
    mlp_ratio: int = 4
    freq_dim: int = 64

    def __post_init__(self):
        if self.n_mm_blocks_with_audio_self_attn > self.n_mm_blocks:
            raise ConfigError("n_mm_blocks_with_audio_self_attn exceeds n_mm_blocks")
        if self.model_dim % self.heads:
            raise ConfigError("model_dim must be divisible by heads")
        if (self.model_dim // self.heads) % 2 or self.freq_dim % 2:
            raise ConfigError("head_dim and freq_dim must be even")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, blob: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: int(v) for k, v in blob.items() if k in known})


@dataclass
class MaskSpan:
    """Contiguous token range ``[start, start + length)`` holding clean audio."""
    start: int
    length: int

    @property
    def stop(self) -> int:
        return self.start + self.length


@dataclass
class ConditioningBundle:
    """Batched conditioning. ``drop[:, k]`` replaces signal k (semantic, sync,
    text) with its learned null embedding."""
    semantic: torch.Tensor  # [B, t_vs, semantic_dim]
    sync: torch.Tensor      # [B, t_vsyn, sync_dim]
    text: torch.Tensor      # [B, text_dim]
    drop: torch.Tensor | None = None  # [B, 3] bool

    @property
    def batch_size(self) -> int:
        return self.text.shape[0]

    def drop_flags(self) -> torch.Tensor:
        if self.drop is None:
            return torch.zeros(self.batch_size, 3, dtype=torch.bool)
        return self.drop

    def with_drop(self, drop) -> "ConditioningBundle":
        drop = torch.as_tensor(drop, dtype=torch.bool)
        if drop.ndim == 1:
            drop = drop.expand(self.batch_size, 3)
        return ConditioningBundle(self.semantic, self.sync, self.text, drop)

    def unconditional(self) -> "ConditioningBundle":
        return self.with_drop(torch.ones(3, dtype=torch.bool))

    def to(self, dtype) -> "ConditioningBundle":
        return ConditioningBundle(self.semantic.to(dtype), self.sync.to(dtype), self.text.to(dtype), self.drop)

    def index(self, idx) -> "ConditioningBundle":
        drop = None if self.drop is None else self.drop[idx]
        return ConditioningBundle(self.semantic[idx], self.sync[idx], self.text[idx], drop)

    @classmethod
    def from_arrays(cls, semantic, sync, text, dtype=torch.float32) -> "ConditioningBundle":
        """Stack per-item numpy arrays (or a single item) into a batch."""
        def stack(items, ndim):
            arr = np.asarray(items, dtype=np.float64)
            if arr.ndim == ndim - 1:
                arr = arr[None]
            return torch.as_tensor(arr, dtype=dtype)
        return cls(stack(semantic, 3), stack(sync, 3), stack(text, 2))


def spans_to_mask(spans, length: int) -> torch.Tensor:
    """Boolean ``[B, length]`` token mask from a list of ``MaskSpan | None``."""
    out = torch.zeros(len(spans), length, dtype=torch.bool)
    for i, span in enumerate(spans):
        if span is None:
            continue
        if span.start < 0 or span.length < 0 or span.stop > length:
            raise RangeError(f"mask span {span} outside [0, {length})")
        out[i, span.start:span.stop] = True
    return out


def apply_mask_tokens(x: torch.Tensor, mask, mask_token: torch.Tensor,
                      unmask_token: torch.Tensor) -> torch.Tensor:
    """Add ``mask_token`` inside the span(s) and ``unmask_token`` elsewhere.

    ``mask`` is ``None``, a :class:`MaskSpan` (applied to every batch item), or
    a boolean ``[B, t]`` / ``[t]`` token mask.
    """
    length = x.shape[-2]
    if mask is None:
        return x + unmask_token
    if isinstance(mask, MaskSpan):
        if mask.start < 0 or mask.length < 0 or mask.stop > length:
            raise RangeError(f"mask span {mask} outside [0, {length})")
        span, mask = mask, torch.zeros(length, dtype=torch.bool)
        mask[span.start:span.stop] = True
    return x + torch.where(mask[..., None], mask_token, unmask_token)


def timestep_features(t: torch.Tensor, dim: int, scale: float = 1000.0) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=t.dtype) / half)
    args = scale * t[:, None] * freqs[None, :]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


def _per_item(value, batch: int, dtype) -> torch.Tensor:
    value = torch.as_tensor(value, dtype=dtype)
    return value.expand(batch) if value.ndim == 0 else value


def _grace_ok(n_frames: int, n_latents: int, ratio: float) -> bool:
    return abs(n_frames / n_latents - ratio) <= GRACE * ratio


class LengthUnify(nn.Module):
    """Resample sync features to the audio frame rate:
    ``LayerNorm(stopgrad(cubic(v))) + tanh(g) * ConvTranspose(v)``."""

    def __init__(self, dim: int, kernel: int = 4):
        super().__init__()
        self.conv = nn.ConvTranspose1d(dim, dim, kernel_size=kernel, stride=2, padding=(kernel - 2) // 2)
        self.gate = nn.Parameter(torch.zeros(()))

    def interp(self, v: torch.Tensor, target_len: int) -> torch.Tensor:
        grid = v.transpose(1, 2).unsqueeze(2)  # [B, d, 1, t]
        out = F.interpolate(grid, size=(1, target_len), mode="bicubic", align_corners=False)
        return out.squeeze(2).transpose(1, 2)

    def forward(self, v: torch.Tensor, target_len: int) -> torch.Tensor:
        if target_len < v.shape[1]:
            raise UnsupportedDownsampleError(f"cannot map {v.shape[1]} sync frames onto {target_len} latents")
        fixed = F.layer_norm(self.interp(v.detach(), target_len), v.shape[-1:])
        learned = self.conv(v.transpose(1, 2))
        learned = F.interpolate(learned, size=target_len, mode="linear", align_corners=False)
        return fixed + torch.tanh(self.gate) * learned.transpose(1, 2)


@dataclass
class LocalConditioning:
    """Per-token conditioning ``global + proj(sync)`` kept in factored form.

    Modulation layers are linear in the conditioning, so ``layer(dense())`` is
    evaluated as ``layer(global) + (W_layer W_proj) sync`` without building the
    ``[B, t_a, D]`` tensor.
    """
    global_cond: torch.Tensor  # [B, D]
    sync: torch.Tensor         # [B, t_a, sync_dim]
    proj: nn.Linear

    def dense(self) -> torch.Tensor:
        return self.global_cond[:, None, :] + self.proj(self.sync)

    def project(self, layer: nn.Linear) -> torch.Tensor:
        weight = layer.weight @ self.proj.weight
        bias = layer.weight @ self.proj.bias
        return layer(self.global_cond)[:, None, :] + F.linear(self.sync, weight, bias)


class Mlp(nn.Module):
    def __init__(self, dim: int, ratio: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, ratio * dim)
        self.fc2 = nn.Linear(ratio * dim, dim)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x), approximate="tanh"))


class SelfAttention(nn.Module):
    def __init__(self, dim: int, heads: int, with_proj: bool = True):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(dim, 3 * dim)
        if with_proj:
            self.proj = nn.Linear(dim, dim)

    def qkv_heads(self, x):
        b, t, _ = x.shape
        return self.qkv(x).view(b, t, 3, self.heads, -1).unbind(2)

    def forward(self, x, positions):
        q, k, v = self.qkv_heads(x)
        out = attention(rope_apply(q, positions), rope_apply(k, positions), v)
        return self.proj(out.flatten(-2))


class MMDiTBlock(nn.Module):
    """Joint attention over concatenated audio + semantic tokens, an optional
    audio-only self-attention, and per-stream MLPs. All residual branches are
    gated by adaLN outputs that start at zero.

    With ``semantic_out=False`` (the last joint block) the semantic stream only
    supplies keys and values; its output branches would be discarded and are
    not built.
    """

    def __init__(self, dim: int, heads: int, mlp_ratio: int, with_audio_self_attn: bool,
                 semantic_out: bool = True):
        super().__init__()
        self.heads = heads
        self.with_audio_self_attn = with_audio_self_attn
        self.semantic_out = semantic_out
        n_audio = 9 if with_audio_self_attn else 6
        self.audio_mod = nn.Linear(dim, n_audio * dim)
        self.semantic_mod = nn.Linear(dim, (6 if semantic_out else 2) * dim)
        self.audio_attn = SelfAttention(dim, heads)
        self.semantic_attn = SelfAttention(dim, heads, with_proj=semantic_out)
        self.audio_mlp = Mlp(dim, mlp_ratio)
        if semantic_out:
            self.semantic_mlp = Mlp(dim, mlp_ratio)
        if with_audio_self_attn:
            self.audio_self_attn = SelfAttention(dim, heads)

    def forward(self, audio, semantic, local_cond, global_cond, audio_pos, semantic_pos,
                use_audio_self_attn: bool | None = None):
        use_sa = self.with_audio_self_attn if use_audio_self_attn is None else use_audio_self_attn
        dim = audio.shape[-1]
        a_mod = local_cond.project(self.audio_mod).split(3 * dim, dim=-1)
        s_rows = self.semantic_mod(global_cond)[:, None, :].expand(-1, semantic.shape[1], -1)
        s_mod = s_rows.split(3 * dim, dim=-1) if self.semantic_out else (s_rows,)

        a_in, a_gate = adaln_modulate(audio, a_mod[0])
        s_in, s_gate = adaln_modulate(semantic, s_mod[0])
        qa, ka, va = self.audio_attn.qkv_heads(a_in)
        qs, ks, vs = self.semantic_attn.qkv_heads(s_in)
        pos = torch.cat([audio_pos, semantic_pos])
        q = rope_apply(torch.cat([qa, qs], dim=1), pos)
        k = rope_apply(torch.cat([ka, ks], dim=1), pos)
        v = torch.cat([va, vs], dim=1)
        joint = attention(q, k, v).flatten(-2)
        t_a = audio.shape[1]
        audio = audio + a_gate * self.audio_attn.proj(joint[:, :t_a])
        if self.semantic_out:
            semantic = semantic + s_gate * self.semantic_attn.proj(joint[:, t_a:])

        if use_sa and self.with_audio_self_attn:
            sa_in, sa_gate = adaln_modulate(audio, a_mod[2])
            audio = audio + sa_gate * self.audio_self_attn(sa_in, audio_pos)

        a_in, a_gate = adaln_modulate(audio, a_mod[1])
        audio = audio + a_gate * self.audio_mlp(a_in)
        if self.semantic_out:
            s_in, s_gate = adaln_modulate(semantic, s_mod[1])
            semantic = semantic + s_gate * self.semantic_mlp(s_in)
        return audio, semantic


class DiTBlock(nn.Module):
    def __init__(self, dim: int, heads: int, mlp_ratio: int):
        super().__init__()
        self.mod = nn.Linear(dim, 6 * dim)
        self.attn = SelfAttention(dim, heads)
        self.mlp = Mlp(dim, mlp_ratio)

    def forward(self, x, cond, positions):
        dim = x.shape[-1]
        attn_mod, mlp_mod = cond.project(self.mod).split(3 * dim, dim=-1)
        h, gate = adaln_modulate(x, attn_mod)
        x = x + gate * self.attn(h, positions)
        h, gate = adaln_modulate(x, mlp_mod)
        return x + gate * self.mlp(h)


class VelocityNet(nn.Module):
    """``v(x_t, t, d; conditioning, mask) -> [B, t_a, audio_dim]``."""

    def __init__(self, cfg: ModelConfig | None = None):
        super().__init__()
        self.cfg = cfg = cfg or ModelConfig()
        dim = cfg.model_dim
        self.mask_token = nn.Parameter(torch.zeros(cfg.audio_dim))
        self.unmask_token = nn.Parameter(torch.zeros(cfg.audio_dim))
        self.null_semantic = nn.Parameter(torch.zeros(cfg.semantic_dim))
        self.null_sync = nn.Parameter(torch.zeros(cfg.sync_dim))
        self.null_text = nn.Parameter(torch.zeros(cfg.text_dim))
        self.audio_in = nn.Linear(cfg.audio_dim, dim)
        self.semantic_in = nn.Linear(cfg.semantic_dim, dim)
        self.global_mlp = nn.Sequential(
            nn.Linear(2 * cfg.freq_dim + cfg.text_dim + cfg.semantic_dim, dim),
            nn.SiLU(),
            nn.Linear(dim, dim),
        )
        self.length_unify = LengthUnify(cfg.sync_dim)
        self.sync_proj = nn.Linear(cfg.sync_dim, dim)
        self.mm_blocks = nn.ModuleList(
            MMDiTBlock(dim, cfg.heads, cfg.mlp_ratio, i < cfg.n_mm_blocks_with_audio_self_attn,
                       semantic_out=i < cfg.n_mm_blocks - 1)
            for i in range(cfg.n_mm_blocks)
        )
        self.single_blocks = nn.ModuleList(DiTBlock(dim, cfg.heads, cfg.mlp_ratio)
                                           for _ in range(cfg.n_single_blocks))
        self.final_mod = nn.Linear(dim, 2 * dim)
        self.final_out = nn.Linear(dim, cfg.audio_dim)

    def conditioning(self, t, d, cond: ConditioningBundle, target_len: int):
        """Global ``[B, D]`` and local ``[B, t_a, D]`` conditioning tensors."""
        drop = cond.drop_flags()
        semantic = torch.where(drop[:, 0, None, None], self.null_semantic, cond.semantic)
        sync = torch.where(drop[:, 1, None, None], self.null_sync, cond.sync)
        text = torch.where(drop[:, 2, None], self.null_text, cond.text)
        feats = torch.cat([
            timestep_features(t, self.cfg.freq_dim),
            timestep_features(d, self.cfg.freq_dim),
            text,
            semantic.mean(dim=1),
        ], dim=-1)
        global_cond = self.global_mlp(feats)
        local_cond = LocalConditioning(global_cond, self.length_unify(sync, target_len), self.sync_proj)
        return semantic, global_cond, local_cond

    def forward(self, x_t: torch.Tensor, t, d, cond: ConditioningBundle, mask=None) -> torch.Tensor:
        b, t_a, _ = x_t.shape
        t = _per_item(t, b, x_t.dtype)
        d = _per_item(d, b, x_t.dtype)
        t_vs, t_vsyn = cond.semantic.shape[1], cond.sync.shape[1]
        if not (_grace_ok(t_vs, t_a, SEMANTIC_RATIO) and _grace_ok(t_vsyn, t_a, SYNC_RATIO)):
            raise DimensionError(f"conditioning lengths ({t_vs}, {t_vsyn}) do not match {t_a} latent frames")

        semantic, global_cond, local_cond = self.conditioning(t, d, cond, t_a)
        x = apply_mask_tokens(x_t, mask, self.mask_token, self.unmask_token)
        audio = self.audio_in(x)
        sem = self.semantic_in(semantic)
        audio_pos = torch.arange(t_a)
        semantic_pos = torch.round(torch.arange(t_vs, dtype=torch.float64) * t_a / t_vs).long()
        for block in self.mm_blocks:
            audio, sem = block(audio, sem, local_cond, global_cond, audio_pos, semantic_pos)
        for block in self.single_blocks:
            audio = block(audio, local_cond, audio_pos)
        scale, shift = local_cond.project(self.final_mod).chunk(2, dim=-1)
        return self.final_out(layer_norm(audio) * (1 + scale) + shift)


def init_parameters(model: nn.Module, rng: np.random.Generator, zero_gates: bool = True) -> None:
    """Seeded initialisation: Xavier-uniform weights, zero biases, and zero
    adaLN / output projections so every block starts as the identity."""
    zero_prefixes = ("final_out", "final_mod") if zero_gates else ()
    with torch.no_grad():
        for name, p in model.named_parameters():
            leaf = name.rsplit(".", 1)[-1]
            is_mod = zero_gates and (name.endswith("_mod.weight") or name.endswith(".mod.weight")
                                     or name.endswith("_mod.bias") or name.endswith(".mod.bias"))
            if is_mod or name.startswith(zero_prefixes) or p.ndim < 2 or leaf == "bias":
                if name.startswith(("null_", "mask_token", "unmask_token")):
                    p.copy_(torch.as_tensor(rng.normal(0.0, 0.02, size=p.shape)))
                else:
                    p.zero_()
                continue
            fan_out, fan_in = p.shape[0], int(np.prod(p.shape[1:]))
            bound = math.sqrt(6.0 / (fan_in + fan_out))
            p.copy_(torch.as_tensor(rng.uniform(-bound, bound, size=p.shape)))


def randomize_parameters(model: nn.Module, rng: np.random.Generator, scale: float = 0.3) -> None:
    """Fill every parameter with N(0, scale^2); used to exercise all paths in tests."""
    with torch.no_grad():
        for _, p in model.named_parameters():
            p.copy_(torch.as_tensor(rng.normal(0.0, scale, size=p.shape)))


def build_model(cfg: ModelConfig, seed: int, dtype=torch.float32) -> VelocityNet:
    from .numerics import make_rng
    model = VelocityNet(cfg).to(dtype)
    init_parameters(model, make_rng(seed))
    return model
