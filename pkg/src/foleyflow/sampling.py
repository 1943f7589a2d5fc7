"""Few-step Euler sampling with classifier-free guidance, reference inpainting
and chunked outpainting for long clips."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .errors import RangeError, SamplerDivergenceError
from .model import ConditioningBundle, VelocityNet
from .synth import LATENT_RATE, Conditioning
from .training import step_size_input

CHUNK_SECONDS = 10
OVERLAP_TOKENS = 22


@dataclass
class SamplerConfig:
    n_steps: int = 32
    guidance_w: float = 4.0
    seed: int = 0
    n_levels: int = 7
    shortcut: bool = True  # False: query the instantaneous velocity (d = 0) at every step

    def __post_init__(self):
        if self.n_steps < 1 or self.n_steps > 128 or self.n_steps & (self.n_steps - 1):
            raise ValueError(f"n_steps must be a power of two in [1, 128], got {self.n_steps}")
        if self.guidance_w < 0:
            raise ValueError("guidance_w must be non-negative")


@dataclass
class ReferenceAudio:
    latents: torch.Tensor  # [m, C]
    start: int = 0

    def __post_init__(self):
        self.latents = torch.as_tensor(self.latents)

    @property
    def stop(self) -> int:
        return self.start + self.latents.shape[0]

    def check(self, total_len: int) -> None:
        if self.start < 0 or self.stop > total_len:
            raise RangeError(f"reference [{self.start}, {self.stop}) outside [0, {total_len})")


@dataclass
class GenerationRequest:
    cond: Conditioning | ConditioningBundle
    total_len: int
    reference: ReferenceAudio | None = None

    def bundle(self, dtype) -> ConditioningBundle:
        if isinstance(self.cond, ConditioningBundle):
            return self.cond.to(dtype)
        c = self.cond
        return ConditioningBundle.from_arrays(c.semantic, c.sync, c.text, dtype=dtype)


def reference_mask(references, total_len: int, channels: int, dtype):
    """Boolean ``[B, T]`` mask and ``[B, T, C]`` reference values."""
    mask = torch.zeros(len(references), total_len, dtype=torch.bool)
    values = torch.zeros(len(references), total_len, channels, dtype=dtype)
    for i, ref in enumerate(references):
        if ref is None:
            continue
        ref.check(total_len)
        mask[i, ref.start:ref.stop] = True
        values[i, ref.start:ref.stop] = ref.latents.to(dtype)
    return mask, values


def compose_masked_latent(x_t: torch.Tensor, reference: ReferenceAudio | None) -> torch.Tensor:
    """Splice reference latents into ``x_t`` (``[T, C]`` or ``[B, T, C]``)."""
    if reference is None:
        return x_t
    reference.check(x_t.shape[-2])
    out = x_t.clone()
    out[..., reference.start:reference.stop, :] = reference.latents.to(x_t.dtype)
    return out


def cfg_velocity(model, x_t, mask, ref_values, cond: ConditioningBundle, t, d, w: float) -> torch.Tensor:
    """Guided velocity ``v_u + w (v_c - v_u)``.

    The unconditional pass sees null embeddings, no splice and no mask; the
    conditional pass sees the spliced latent and mask tokens. At ``w`` of 0 or 1
    only one pass is evaluated, so those endpoints are exact.
    """
    has_ref = mask is not None and bool(mask.any())
    x_hat = torch.where(mask[..., None], ref_values, x_t) if has_ref else x_t
    if w == 1:
        return model(x_hat, t, d, cond, mask if has_ref else None)
    v_u = model(x_t, t, d, cond.unconditional(), None)
    if w == 0:
        return v_u
    v_c = model(x_hat, t, d, cond, mask if has_ref else None)
    return v_u + w * (v_c - v_u)


@torch.no_grad()
def sample_batch(model: VelocityNet, cond: ConditioningBundle, total_len: int, references,
                 cfg: SamplerConfig, rng: np.random.Generator, dtype=torch.float64) -> torch.Tensor:
    b = cond.batch_size
    channels = model.cfg.audio_dim
    refs = list(references) if references is not None else [None] * b
    mask, values = reference_mask(refs, total_len, channels, dtype)
    x = torch.as_tensor(rng.standard_normal((b, total_len, channels)), dtype=dtype)
    model_dtype = next(model.parameters()).dtype
    d = 1.0 / cfg.n_steps
    d_in = step_size_input(d, cfg.n_levels) if cfg.shortcut else 0.0
    cond = cond.to(model_dtype)
    for k in range(cfg.n_steps):
        v = cfg_velocity(model, x.to(model_dtype), mask, values.to(model_dtype), cond, k * d, d_in, cfg.guidance_w)
        x = x + d * v.to(dtype)
        x = torch.where(mask[..., None], values, x)
        if not torch.isfinite(x).all():
            raise SamplerDivergenceError(f"non-finite sampler state after step {k + 1}")
    return x


def shortcut_sample(model, request: GenerationRequest, cfg: SamplerConfig,
                    rng: np.random.Generator | None = None) -> np.ndarray:
    """Generate one ``[T, C]`` latent clip."""
    from .numerics import make_rng
    rng = rng if rng is not None else make_rng(cfg.seed)
    out = sample_batch(model, request.bundle(next(model.parameters()).dtype), request.total_len,
                       [request.reference], cfg, rng)
    return out[0].numpy()


def outpaint(model, prev_clip, cond_next, cfg: SamplerConfig, rng: np.random.Generator,
             overlap_tokens: int = OVERLAP_TOKENS, chunk_len: int = CHUNK_SECONDS * LATENT_RATE) -> np.ndarray:
    """Extend ``prev_clip`` by generating a chunk whose first ``overlap_tokens``
    are the tail of ``prev_clip``."""
    prev = np.asarray(prev_clip, dtype=np.float64)
    if overlap_tokens > prev.shape[0]:
        raise RangeError(f"overlap {overlap_tokens} exceeds previous clip length {prev.shape[0]}")
    if chunk_len < overlap_tokens:
        raise RangeError("chunk_len must be at least overlap_tokens")
    if chunk_len == overlap_tokens:
        return prev.copy()
    ref = ReferenceAudio(torch.as_tensor(prev[prev.shape[0] - overlap_tokens:]), 0) if overlap_tokens else None
    gen = shortcut_sample(model, GenerationRequest(cond_next, chunk_len, ref), cfg, rng)
    return np.concatenate([prev, gen[overlap_tokens:]], axis=0)


def plan_chunks(total_len: int, chunk_len: int, overlap: int) -> list[tuple[int, int]]:
    """``(start, overlap_with_previous)`` for each chunk of ``chunk_len`` tokens.

    Chunks advance by ``chunk_len - overlap``; the last one is pulled back so it
    ends exactly at ``total_len`` (its overlap grows accordingly).
    """
    if total_len < chunk_len:
        raise RangeError(f"total length {total_len} is shorter than one chunk ({chunk_len})")
    if not 0 <= overlap < chunk_len:
        raise RangeError("overlap must lie in [0, chunk_len)")
    plan = [(0, 0)]
    end = chunk_len
    while end < total_len:
        start = min(end - overlap, total_len - chunk_len)
        plan.append((start, end - start))
        end = start + chunk_len
    return plan


def long_form_generate(model, scene_cond: Conditioning, total_seconds: float, cfg: SamplerConfig,
                       rng: np.random.Generator | None = None, chunk_seconds: float = CHUNK_SECONDS,
                       overlap_tokens: int = OVERLAP_TOKENS) -> np.ndarray:
    """Chain outpainting over ``total_seconds`` using per-chunk conditioning slices."""
    from .numerics import make_rng
    rng = rng if rng is not None else make_rng(cfg.seed)
    total_len = int(round(total_seconds * LATENT_RATE))
    chunk_len = int(round(chunk_seconds * LATENT_RATE))
    clip = None
    for start, overlap in plan_chunks(total_len, chunk_len, overlap_tokens):
        cond = scene_cond.slice_time(start / LATENT_RATE, chunk_len / LATENT_RATE)
        if clip is None:
            clip = shortcut_sample(model, GenerationRequest(cond, chunk_len), cfg, rng)
        else:
            clip = outpaint(model, clip[:start + overlap], cond, cfg, rng, overlap, chunk_len)
    return clip


def chunk_borders(total_len: int, chunk_len: int = CHUNK_SECONDS * LATENT_RATE,
                  overlap: int = OVERLAP_TOKENS) -> list[int]:
    """Token indices where a new chunk's generated content begins."""
    return [start + ov for start, ov in plan_chunks(total_len, chunk_len, overlap)[1:]]


def restitch_generate(model, scene_cond: Conditioning, total_seconds: float, cfg: SamplerConfig,
                      rng: np.random.Generator | None = None, chunk_seconds: float = CHUNK_SECONDS,
                      overlap_tokens: int = OVERLAP_TOKENS) -> np.ndarray:
    """Baseline without reference: chunks generated independently and concatenated
    on the same timeline as :func:`long_form_generate`."""
    from .numerics import make_rng
    rng = rng if rng is not None else make_rng(cfg.seed)
    total_len = int(round(total_seconds * LATENT_RATE))
    chunk_len = int(round(chunk_seconds * LATENT_RATE))
    pieces = []
    for start, overlap in plan_chunks(total_len, chunk_len, overlap_tokens):
        cond = scene_cond.slice_time(start / LATENT_RATE, chunk_len / LATENT_RATE)
        gen = shortcut_sample(model, GenerationRequest(cond, chunk_len), cfg, rng)
        pieces.append(gen[overlap:])
    return np.concatenate(pieces, axis=0)


def seam_jump(clip: np.ndarray, borders) -> float:
    """Mean adjacent-frame latent jump ``||x[b] - x[b-1]||`` at the given borders."""
    clip = np.asarray(clip)
    if not borders:
        return math.nan
    return float(np.mean([np.linalg.norm(clip[b] - clip[b - 1]) for b in borders]))
