"""Shortcut flow-matching trainer with masked-span loss exclusion."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .checkpoint import group, load_checkpoint, load_state, save_checkpoint
from .errors import CheckpointError, DegenerateBatchError, NumericError, ScheduleError
from .model import ConditioningBundle, MaskSpan, ModelConfig, VelocityNet, build_model, spans_to_mask
from .numerics import make_rng
from .synth import LATENT_RATE, SEMANTIC_FPS, SYNC_FPS, ClipRecord

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    batch_size: int = 32
    consistency_ratio: float = 0.25
    lr: float = 1e-4
    ema_rate: float = 0.999
    cond_dropout: float = 0.1
    mask_prob: float = 0.25
    mask_span_min: int = 1
    mask_span_max: int = 88
    n_levels: int = 7
    crop_seconds: int = 2
    steps: int = 2000
    seed: int = 0
    checkpoint_every: int = 0

    def __post_init__(self):
        if not 0 <= self.consistency_ratio <= 1:
            raise ValueError("consistency_ratio must lie in [0, 1]")
        if not 1 <= self.mask_span_min <= self.mask_span_max:
            raise ValueError("mask span bounds must satisfy 1 <= min <= max")


@dataclass
class TrainBatch:
    x1: torch.Tensor              # [B, T, C]
    x0: torch.Tensor              # [B, T, C]
    t: torch.Tensor               # [B]
    d: torch.Tensor               # [B] half-step size; 0 for flow-matching items
    is_consistency: torch.Tensor  # [B] bool
    mask: torch.Tensor            # [B, T] bool, True inside the clean span
    cond: ConditioningBundle
    n_levels: int = 7

    @property
    def x_t(self) -> torch.Tensor:
        return noise_inject(self.x1, self.x0, self.t, self.mask)


# --------------------------------------------------------------------------
# schedules
# --------------------------------------------------------------------------

def sample_timestep(rng: np.random.Generator, size=None):
    """Logit-normal time: ``sigmoid(z)``, ``z ~ N(0, 1)``."""
    z = rng.standard_normal(size)
    return 1.0 / (1.0 + np.exp(-z))


def sample_step_size(rng: np.random.Generator, n_levels: int = 7, t: float | None = None) -> float:
    """Dyadic half-step ``d`` from ``{2^-n_levels, ..., 1/2, 1}``; with ``t``
    given it is truncated so that ``t + 2d <= 1``."""
    if n_levels < 1:
        raise ValueError("n_levels must be at least 1")
    d = 2.0 ** -int(rng.integers(0, n_levels + 1))
    if t is not None:
        d = min(d, (1.0 - t) / 2.0)
    return d


def step_size_input(d, n_levels: int):
    """Step-size value fed to the network. Steps below the smallest trained
    shortcut ``2^-(n_levels-1)`` are queried as instantaneous velocity (0)."""
    smallest = 2.0 ** -(n_levels - 1)
    if isinstance(d, torch.Tensor):
        return torch.where(d < smallest - 1e-12, torch.zeros_like(d), d)
    return 0.0 if d < smallest - 1e-12 else d


def make_mask_span(rng: np.random.Generator, t_a: int, prob: float = 0.25,
                   min_len: int = 1, max_len: int = 88) -> MaskSpan | None:
    if t_a < 1:
        raise ValueError("t_a must be at least 1")
    if rng.random() >= prob:
        return None
    hi = min(max_len, t_a)
    length = int(rng.integers(min(min_len, hi), hi + 1))
    start = int(rng.integers(0, t_a - length + 1))
    return MaskSpan(start, length)


def noise_inject(x1: torch.Tensor, x0: torch.Tensor, t, mask: torch.Tensor | None = None) -> torch.Tensor:
    """``(1 - t) x0 + t x1`` outside the span, clean ``x1`` inside it."""
    t = torch.as_tensor(t, dtype=x1.dtype)
    if t.ndim == 1:
        t = t[:, None, None]
    x_t = (1 - t) * x0 + t * x1
    if mask is None:
        return x_t
    return torch.where(mask[..., None], x1, x_t)


# --------------------------------------------------------------------------
# loss
# --------------------------------------------------------------------------

@torch.no_grad()
def self_consistency_target(model, x_t, t, d, cond: ConditioningBundle, mask=None, n_levels: int = 7):
    """Average of two chained half-steps of size ``d``; carries no gradient."""
    t = torch.as_tensor(t, dtype=x_t.dtype).expand(x_t.shape[0])
    d = torch.as_tensor(d, dtype=x_t.dtype).expand(x_t.shape[0])
    if bool(torch.any(t + 2 * d > 1 + 1e-9)):
        raise ScheduleError("consistency step would pass t = 1")
    d_in = step_size_input(d, n_levels)
    v1 = model(x_t, t, d_in, cond, mask)
    x_mid = x_t + d[:, None, None] * v1
    if mask is not None:
        x_mid = torch.where(mask[..., None], x_t, x_mid)
    v2 = model(x_mid, t + d, d_in, cond, mask)
    return (v1 + v2) / 2


def compute_targets(model, batch: TrainBatch) -> torch.Tensor:
    """Regression targets: ``x1 - x0`` for flow-matching items and the
    stop-gradient self-consistency velocity for the rest."""
    target = batch.x1 - batch.x0
    idx = torch.nonzero(batch.is_consistency).flatten()
    if idx.numel():
        x_t = batch.x_t
        sc = self_consistency_target(model, x_t[idx], batch.t[idx], batch.d[idx], batch.cond.index(idx),
                                     batch.mask[idx], batch.n_levels)
        target = target.clone()
        target[idx] = sc
    return target


@dataclass
class LossParts:
    loss: torch.Tensor
    loss_fm: float
    loss_sc: float
    targets: torch.Tensor = field(repr=False)


def shortcut_loss(model, batch: TrainBatch, targets: torch.Tensor | None = None) -> LossParts:
    """Mean squared velocity error over noised (unmasked) positions.

    Flow-matching items query step size 0, consistency items query ``2d``.
    Passing ``targets`` freezes the consistency targets (used by gradient checks).
    """
    if targets is None:
        targets = compute_targets(model, batch)
    d_query = torch.where(batch.is_consistency, 2 * batch.d, torch.zeros_like(batch.d))
    v = model(batch.x_t, batch.t, d_query, batch.cond, batch.mask)
    keep = (~batch.mask).to(v.dtype)[..., None]
    sq = (v - targets) ** 2 * keep
    channels = v.shape[-1]
    count_fm = keep[~batch.is_consistency].sum() * channels
    count_sc = keep[batch.is_consistency].sum() * channels
    total = count_fm + count_sc
    if float(total) == 0:
        raise DegenerateBatchError("every position in the batch is masked")
    sum_fm = sq[~batch.is_consistency].sum()
    sum_sc = sq[batch.is_consistency].sum()
    loss = (sum_fm + sum_sc) / total
    return LossParts(
        loss=loss,
        loss_fm=float(sum_fm.detach() / count_fm) if count_fm > 0 else math.nan,
        loss_sc=float(sum_sc.detach() / count_sc) if count_sc > 0 else math.nan,
        targets=targets,
    )


def loss_and_grads(model, batch: TrainBatch, targets=None):
    model.zero_grad(set_to_none=True)
    parts = shortcut_loss(model, batch, targets)
    parts.loss.backward()
    grads = {n: (p.grad.clone() if p.grad is not None else torch.zeros_like(p))
             for n, p in model.named_parameters()}
    return parts, grads


# --------------------------------------------------------------------------
# batches
# --------------------------------------------------------------------------

def crop_record(record: ClipRecord, start_s: int, seconds: int):
    a0, na = start_s * LATENT_RATE, seconds * LATENT_RATE
    s0, ns = start_s * SEMANTIC_FPS, seconds * SEMANTIC_FPS
    y0, ny = start_s * SYNC_FPS, seconds * SYNC_FPS
    c = record.cond
    return record.latents[a0:a0 + na], c.semantic[s0:s0 + ns], c.sync[y0:y0 + ny], c.text


def assemble_batch(records, rng: np.random.Generator, cfg: TrainConfig, *, consistency: bool | None = None,
                   dtype=torch.float32) -> TrainBatch:
    """Random whole-second crops with noise, times, step sizes, masks and dropout."""
    seconds = cfg.crop_seconds
    eligible = [r for r in records if int(math.floor(r.scene.duration_s)) >= seconds]
    if not eligible:
        raise ValueError(f"no clip is at least {seconds} s long")
    b = cfg.batch_size
    picks = rng.integers(0, len(eligible), size=b)
    x1, sem, syn, txt = [], [], [], []
    for i in picks:
        rec = eligible[i]
        start = int(rng.integers(0, int(math.floor(rec.scene.duration_s)) - seconds + 1))
        a, s, y, tx = crop_record(rec, start, seconds)
        x1.append(a), sem.append(s), syn.append(y), txt.append(tx)
    t_a = seconds * LATENT_RATE
    x1 = torch.as_tensor(np.stack(x1), dtype=dtype)
    x0 = torch.as_tensor(rng.standard_normal(x1.shape), dtype=dtype)
    t = sample_timestep(rng, b)
    ratio = cfg.consistency_ratio if consistency is None else float(consistency)
    n_sc = int(round(ratio * b))
    is_sc = np.arange(b) < n_sc
    d = np.array([sample_step_size(rng, cfg.n_levels, t[i]) if is_sc[i] else 0.0 for i in range(b)])
    spans = [make_mask_span(rng, t_a, cfg.mask_prob, cfg.mask_span_min, cfg.mask_span_max) for _ in range(b)]
    drop = rng.random((b, 3)) < cfg.cond_dropout
    cond = ConditioningBundle.from_arrays(sem, syn, txt, dtype=dtype).with_drop(torch.as_tensor(drop))
    return TrainBatch(
        x1=x1, x0=x0,
        t=torch.as_tensor(t, dtype=dtype),
        d=torch.as_tensor(d, dtype=dtype),
        is_consistency=torch.as_tensor(is_sc),
        mask=spans_to_mask(spans, t_a),
        cond=cond,
        n_levels=cfg.n_levels,
    )


# --------------------------------------------------------------------------
# EMA and loop
# --------------------------------------------------------------------------

def ema_update(ema: dict[str, torch.Tensor], params: dict[str, torch.Tensor], rate: float = 0.999) -> dict:
    if set(ema) != set(params):
        raise CheckpointError("EMA and model parameter names differ")
    with torch.no_grad():
        for name, value in params.items():
            ema[name].mul_(rate).add_(value.detach(), alpha=1 - rate)
    return ema


def ema_rate_at(step: int, rate: float) -> float:
    """EMA decay with the usual warm-up so early weights are not over-weighted."""
    return min(rate, (1 + step) / (10 + step))


@dataclass
class TrainState:
    model: VelocityNet
    ema: dict[str, torch.Tensor]
    optimizer: torch.optim.Optimizer
    step: int = 0
    log: list[dict] = field(default_factory=list)


def new_state(model_cfg: ModelConfig, cfg: TrainConfig, model: VelocityNet | None = None) -> TrainState:
    model = model or build_model(model_cfg, cfg.seed)
    ema = {n: p.detach().clone() for n, p in model.named_parameters()}
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr, betas=(0.9, 0.999), eps=1e-8)
    return TrainState(model, ema, opt)


def grad_norm(model) -> float:
    total = 0.0
    for p in model.parameters():
        if p.grad is not None:
            total += float(p.grad.detach().double().pow(2).sum())
    return math.sqrt(total)


def train_loop(cfg: TrainConfig, records, state: TrainState, ckpt_path=None, log_path=None) -> TrainState:
    """Run ``cfg.steps`` optimisation steps from ``state.step``.

    Each step uses its own RNG stream ``[seed, step]``, so a resumed run draws
    the same batches as an uninterrupted one.
    """
    if not records:
        raise ValueError("dataset is empty")
    model = state.model
    model.train()
    for step in range(state.step, cfg.steps):
        rng = make_rng([cfg.seed, step])
        batch = assemble_batch(records, rng, cfg)
        state.optimizer.zero_grad(set_to_none=True)
        parts = shortcut_loss(model, batch)
        if not math.isfinite(float(parts.loss.detach())):
            if ckpt_path is not None:
                save_state(Path(str(ckpt_path) + ".diverged"), state, cfg)
            raise NumericError(f"non-finite loss at step {step}")
        parts.loss.backward()
        gnorm = grad_norm(model)
        state.optimizer.step()
        ema_update(state.ema, dict(model.named_parameters()), ema_rate_at(step, cfg.ema_rate))
        state.step = step + 1
        state.log.append({"step": step, "loss_fm": parts.loss_fm, "loss_sc": parts.loss_sc, "grad_norm": gnorm})
        if step % 100 == 0:
            log.info("step %d loss_fm %.4f loss_sc %.4f", step, parts.loss_fm, parts.loss_sc)
        if ckpt_path is not None and cfg.checkpoint_every and state.step % cfg.checkpoint_every == 0:
            save_state(ckpt_path, state, cfg)
    if log_path is not None:
        write_log(log_path, state.log)
    if ckpt_path is not None:
        save_state(ckpt_path, state, cfg)
    return state


def write_log(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["step", "loss_fm", "loss_sc", "grad_norm"])
        for r in rows:
            writer.writerow([r["step"], repr(r["loss_fm"]), repr(r["loss_sc"]), repr(r["grad_norm"])])


def read_log(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{"step": int(r["step"]), "loss_fm": float(r["loss_fm"]), "loss_sc": float(r["loss_sc"]),
                 "grad_norm": float(r["grad_norm"])} for r in csv.DictReader(fh)]


# --------------------------------------------------------------------------
# persistence
# --------------------------------------------------------------------------

def save_state(path, state: TrainState, cfg: TrainConfig) -> None:
    names = [n for n, _ in state.model.named_parameters()]
    tensors = {f"params.{n}": p for n, p in state.model.named_parameters()}
    tensors.update({f"ema.{n}": v for n, v in state.ema.items()})
    opt_state = state.optimizer.state_dict()["state"]
    adam_step = 0
    for i, n in enumerate(names):
        s = opt_state.get(i)
        if s:
            tensors[f"adam_m.{n}"] = s["exp_avg"]
            tensors[f"adam_v.{n}"] = s["exp_avg_sq"]
            adam_step = int(s["step"])
    meta = {"step": state.step, "adam_step": adam_step, "n_levels": cfg.n_levels,
            "shortcut": int(cfg.consistency_ratio > 0), "seed": cfg.seed}
    save_checkpoint(path, state.model.cfg, tensors, meta)


def load_state_file(path, cfg: TrainConfig) -> TrainState:
    model_cfg, tensors, meta = load_checkpoint(path)
    model = VelocityNet(model_cfg)
    load_state(model, group(tensors, "params"))
    state = new_state(model_cfg, cfg, model)
    for name, value in group(tensors, "ema").items():
        if name not in state.ema:
            raise CheckpointError(f"unexpected EMA tensor {name}")
        state.ema[name].copy_(torch.as_tensor(value))
    m, v = group(tensors, "adam_m"), group(tensors, "adam_v")
    if m:
        adam_step = float(meta.get("adam_step", meta.get("step", 0)))
        for p_name, p in model.named_parameters():
            state.optimizer.state[p] = {
                "step": torch.tensor(adam_step),
                "exp_avg": torch.as_tensor(m[p_name], dtype=p.dtype).clone(),
                "exp_avg_sq": torch.as_tensor(v[p_name], dtype=p.dtype).clone(),
            }
    state.step = int(meta.get("step", 0))
    return state


def load_model(path, use_ema: bool = True) -> tuple[VelocityNet, dict[str, str]]:
    """Model for inference from a checkpoint (EMA weights by default)."""
    model_cfg, tensors, meta = load_checkpoint(path)
    model = VelocityNet(model_cfg)
    weights = group(tensors, "ema") if use_ema and group(tensors, "ema") else group(tensors, "params")
    load_state(model, weights)
    model.eval()
    return model, meta
