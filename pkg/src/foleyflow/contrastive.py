"""Sigmoid-pairwise contrastive alignment of short audio and video snippets.

Toy encoders map each frame (features, temporal delta, position inside the
snippet) through a two-layer MLP, average over time and L2-normalise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .errors import NumericError, RangeError
from .numerics import make_rng
from .synth import (LATENT_DIM, LATENT_RATE, SYNC_DIM, SYNC_FPS, SceneConfig, gen_scene, render_conditioning,
                    render_latents)

SNIPPET_SYNC_FRAMES = 16                                            # 0.667 s at 24 FPS
SNIPPET_AUDIO_FRAMES = int(round(SNIPPET_SYNC_FRAMES * LATENT_RATE / SYNC_FPS))  # 29 at 43 Hz
N_POS_FREQS = 4


@dataclass
class SnippetBatch:
    video: torch.Tensor  # [B, t_v, dv]
    audio: torch.Tensor  # [B, t_aud, da]

    @property
    def batch_size(self) -> int:
        return self.video.shape[0]


@dataclass
class ContrastiveConfig:
    batch_size: int = 30
    snippets_per_scene: int = 15
    steps: int = 1000
    lr: float = 1e-3
    hidden: int = 128
    embed_dim: int = 32
    event_rate: float = 6.0  # events per second; an empty snippet has nothing to align
    n_train_scenes: int = 400
    n_eval_batches: int = 20
    shuffled: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.batch_size % self.snippets_per_scene:
            raise ValueError("batch_size must be a multiple of snippets_per_scene")


def pool_temporal(seq: torch.Tensor) -> torch.Tensor:
    """Mean over the time axis (second to last)."""
    if seq.shape[-2] == 0:
        raise RangeError("cannot pool an empty sequence")
    return seq.mean(dim=-2)


def siglip_loss(xv: torch.Tensor, xa: torch.Tensor, t, b) -> torch.Tensor:
    """``-(1/B) sum_ij log sigmoid(z_ij (t <xv_i, xa_j> - b))`` with ``z_ii = 1``
    and ``z_ij = -1`` off the diagonal."""
    if not (torch.isfinite(xv).all() and torch.isfinite(xa).all()):
        raise NumericError("non-finite embeddings")
    logits = t * (xv @ xa.T) - b
    z = 2 * torch.eye(xv.shape[0], dtype=xv.dtype) - 1
    return -F.logsigmoid(z * logits).sum() / xv.shape[0]


def position_features(n: int, dtype=torch.float32) -> torch.Tensor:
    pos = torch.arange(n, dtype=dtype)[:, None] / n
    freqs = math.pi * 2.0 ** torch.arange(N_POS_FREQS, dtype=dtype)[None, :]
    return torch.cat([torch.sin(pos * freqs), torch.cos(pos * freqs)], dim=-1)


class SnippetEncoder(nn.Module):
    def __init__(self, in_dim: int, hidden: int, embed_dim: int):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(2 * in_dim + 2 * N_POS_FREQS, hidden),
            nn.GELU(),
            nn.Linear(hidden, embed_dim),
        )

    def forward(self, snips: torch.Tensor) -> torch.Tensor:
        delta = torch.diff(snips, dim=-2, prepend=snips[..., :1, :])
        pos = position_features(snips.shape[-2], snips.dtype).expand(*snips.shape[:-1], -1)
        frames = self.net(torch.cat([snips, delta, pos], dim=-1))
        return F.normalize(pool_temporal(frames), dim=-1)


class SigLIPHead(nn.Module):
    """Learned temperature (stored as ``log t``) and bias; initial logit offset
    is ``-b = -10`` so the many negatives start near probability zero."""

    def __init__(self, t_init: float = 10.0, b_init: float = 10.0):
        super().__init__()
        self.log_t = nn.Parameter(torch.tensor(math.log(t_init)))
        self.b = nn.Parameter(torch.tensor(b_init))

    @property
    def t(self) -> torch.Tensor:
        return self.log_t.exp()

    def forward(self, xv, xa):
        return siglip_loss(xv, xa, self.t, self.b)


class ContrastivePair(nn.Module):
    def __init__(self, cfg: ContrastiveConfig):
        super().__init__()
        self.video = SnippetEncoder(SYNC_DIM, cfg.hidden, cfg.embed_dim)
        self.audio = SnippetEncoder(LATENT_DIM, cfg.hidden, cfg.embed_dim)
        self.head = SigLIPHead()

    def embed(self, batch: SnippetBatch):
        return self.video(batch.video), self.audio(batch.audio)

    def loss(self, batch: SnippetBatch) -> torch.Tensor:
        return self.head(*self.embed(batch))


# --------------------------------------------------------------------------
# data
# --------------------------------------------------------------------------

def scene_snippets(scene, n_snippets: int):
    """Consecutive time-aligned (sync, latent) snippets covering the scene start."""
    sync = render_conditioning(scene).sync
    latents = render_latents(scene)
    video, audio = [], []
    for k in range(n_snippets):
        v0 = k * SNIPPET_SYNC_FRAMES
        a0 = int(round(v0 * LATENT_RATE / SYNC_FPS))
        video.append(sync[v0:v0 + SNIPPET_SYNC_FRAMES])
        audio.append(latents[a0:a0 + SNIPPET_AUDIO_FRAMES])
    return np.stack(video), np.stack(audio)


def make_scenes(rng: np.random.Generator, n: int, cfg: ContrastiveConfig):
    seconds = cfg.snippets_per_scene * SNIPPET_SYNC_FRAMES / SYNC_FPS + 0.1
    scfg = SceneConfig(duration_range=(seconds, seconds), event_rate=cfg.event_rate)
    return [scene_snippets(gen_scene(rng, scfg), cfg.snippets_per_scene) for _ in range(n)]


def make_batch(pool, rng: np.random.Generator, cfg: ContrastiveConfig, shuffled: bool = False) -> SnippetBatch:
    n_scenes = cfg.batch_size // cfg.snippets_per_scene
    picks = rng.choice(len(pool), size=n_scenes, replace=False)
    video = np.concatenate([pool[i][0] for i in picks])
    audio = np.concatenate([pool[i][1] for i in picks])
    if shuffled:
        audio = audio[rng.permutation(audio.shape[0])]
    return SnippetBatch(torch.as_tensor(video, dtype=torch.float32), torch.as_tensor(audio, dtype=torch.float32))


def retrieval_top1(xv: torch.Tensor, xa: torch.Tensor) -> float:
    """Mean of video-to-audio and audio-to-video top-1 accuracy within a batch."""
    sim = xv @ xa.T
    target = torch.arange(sim.shape[0])
    v2a = (sim.argmax(dim=1) == target).double().mean()
    a2v = (sim.argmax(dim=0) == target).double().mean()
    return float((v2a + a2v) / 2)


@dataclass
class ContrastiveResult:
    model: ContrastivePair
    log: list[dict] = field(default_factory=list)
    heldout_top1: float = math.nan


def evaluate(model: ContrastivePair, pool, cfg: ContrastiveConfig, rng: np.random.Generator) -> float:
    accs = []
    with torch.no_grad():
        for _ in range(cfg.n_eval_batches):
            accs.append(retrieval_top1(*model.embed(make_batch(pool, rng, cfg))))
    return float(np.mean(accs))


def train_contrastive(cfg: ContrastiveConfig) -> ContrastiveResult:
    """Train both encoders and the head; the held-out score is always measured
    on correctly aligned pairs, including for the shuffled control."""
    torch.manual_seed(cfg.seed)
    data_rng = make_rng([cfg.seed, 0])
    train_pool = make_scenes(data_rng, cfg.n_train_scenes, cfg)
    heldout_pool = make_scenes(make_rng([cfg.seed, 1]), max(2 * cfg.n_eval_batches, 4), cfg)
    model = ContrastivePair(cfg)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr, betas=(0.9, 0.999), eps=1e-8)
    result = ContrastiveResult(model)
    for step in range(cfg.steps):
        batch = make_batch(train_pool, make_rng([cfg.seed, 2, step]), cfg, shuffled=cfg.shuffled)
        opt.zero_grad(set_to_none=True)
        xv, xa = model.embed(batch)
        loss = model.head(xv, xa)
        loss.backward()
        opt.step()
        result.log.append({"step": step, "loss": float(loss.detach()),
                           "top1": retrieval_top1(xv.detach(), xa.detach())})
    result.heldout_top1 = evaluate(model, heldout_pool, cfg, make_rng([cfg.seed, 3]))
    return result
