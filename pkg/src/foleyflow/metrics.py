"""Evaluation metrics: log-mel frames, sliced-Wasserstein spectral distance,
Fréchet distance and an onset-alignment proxy for audio-visual sync."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.signal import get_window

from .errors import DimensionError, LengthError, NumericError
from .synth import LATENT_RATE


@dataclass(frozen=True)
class MelConfig:
    sample_rate: int = 16000
    win_ms: float = 25.0
    hop_ms: float = 10.0
    n_mels: int = 128
    eps: float = 1e-8
    nonnegative: bool = False  # shift log-mels by -log(eps) before normalising

    def __post_init__(self):
        if not (self.win_ms >= self.hop_ms > 0):
            raise ValueError("need win_ms >= hop_ms > 0")
        if self.n_mels < 1:
            raise ValueError("n_mels must be at least 1")

    @property
    def hop(self) -> int:
        return int(math.floor(self.sample_rate * self.hop_ms / 1000))

    @property
    def win(self) -> int:
        return int(math.floor(self.sample_rate * self.win_ms / 1000))


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(n_mels: int, n_fft: int, sample_rate: int, f_min: float = 0.0, f_max: float | None = None):
    """HTK triangular filters, ``[n_mels, n_fft // 2 + 1]``."""
    f_max = sample_rate / 2 if f_max is None else f_max
    bins = np.linspace(0, sample_rate / 2, n_fft // 2 + 1)
    edges = mel_to_hz(np.linspace(hz_to_mel(f_min), hz_to_mel(f_max), n_mels + 2))
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    up = (bins[None] - lo) / (mid - lo)
    down = (hi - bins[None]) / (hi - mid)
    return np.maximum(0.0, np.minimum(up, down))


def power_spectrogram(x, win: int, hop: int) -> np.ndarray:
    """``[n_fft // 2 + 1, frames]`` power spectrum of un-padded Hann-windowed frames."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise DimensionError("expected a mono waveform")
    if x.shape[0] < win:
        raise LengthError(f"signal of {x.shape[0]} samples is shorter than one window ({win})")
    n_frames = (x.shape[0] - win) // hop + 1
    idx = np.arange(win)[None, :] + hop * np.arange(n_frames)[:, None]
    frames = x[idx] * get_window("hann", win)[None, :]
    return (np.abs(np.fft.rfft(frames, n=win, axis=1)) ** 2).T


def mel_spectrogram(x, cfg: MelConfig = MelConfig()) -> np.ndarray:
    spec = power_spectrogram(x, cfg.win, cfg.hop)
    return mel_filterbank(cfg.n_mels, cfg.win, cfg.sample_rate) @ spec


def log_mel_columns(x, cfg: MelConfig = MelConfig()) -> np.ndarray:
    """Normalised log-mel matrix ``[n_mels, frames]``; every column sums to 1."""
    s = np.log(mel_spectrogram(x, cfg) + cfg.eps)
    if cfg.nonnegative:
        s = s - math.log(cfg.eps)
    total = s.sum(axis=0, keepdims=True)
    if np.any(total == 0):
        raise NumericError("log-mel column sums to zero; cannot normalise")
    s = s / total
    if not np.all(np.isfinite(s)):
        raise NumericError("non-finite log-mel frames")
    return s


def log_mel_frames(x, cfg: MelConfig = MelConfig()) -> np.ndarray:
    """Spectral frames ``[frames, n_mels]``."""
    return log_mel_columns(x, cfg).T


def random_unit_vectors(rng: np.random.Generator, k: int, dim: int) -> np.ndarray:
    u = rng.standard_normal((k, dim))
    return u / np.linalg.norm(u, axis=1, keepdims=True)


def sliced_w1(a, b, k: int, rng: np.random.Generator | None = None, projections=None) -> float:
    """Mean over ``k`` random directions of the 1D Wasserstein-1 distance
    between the projected rows of ``a`` and ``b`` (equal row counts)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise DimensionError(f"feature dimensions differ: {a.shape} vs {b.shape}")
    if a.shape[0] != b.shape[0]:
        raise DimensionError(f"row counts differ: {a.shape[0]} vs {b.shape[0]}")
    if projections is None:
        if k < 1:
            raise ValueError("k must be at least 1")
        projections = random_unit_vectors(rng, k, a.shape[1])
    pa = np.sort(a @ projections.T, axis=0)
    pb = np.sort(b @ projections.T, axis=0)
    return float(np.mean(np.abs(pa - pb).mean(axis=0)))


def subsample_rows(frames: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    if frames.shape[0] == n:
        return frames
    keep = np.sort(rng.choice(frames.shape[0], size=n, replace=False))
    return frames[keep]


def swsd_frames(fa: np.ndarray, fb: np.ndarray, k: int, rng: np.random.Generator) -> float:
    n = min(fa.shape[0], fb.shape[0])
    fa, fb = subsample_rows(fa, n, rng), subsample_rows(fb, n, rng)
    return sliced_w1(fa, fb, k, rng)


def swsd(x_ref, x_gen, cfg: MelConfig = MelConfig(), k: int = 100, rng: np.random.Generator | None = None) -> float:
    """Sliced-Wasserstein spectral distance between two waveforms."""
    if rng is None:
        raise ValueError("swsd needs an explicit rng")
    return swsd_frames(log_mel_frames(x_ref, cfg), log_mel_frames(x_gen, cfg), k, rng)


# --------------------------------------------------------------------------
# Fréchet distance
# --------------------------------------------------------------------------

def _sym_sqrt(m: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh((m + m.T) / 2)
    return (v * np.sqrt(np.clip(w, 0, None))) @ v.T


def frechet_from_stats(mu_a, cov_a, mu_b, cov_b) -> float:
    root_a = _sym_sqrt(cov_a)
    w = np.linalg.eigvalsh(_symmetrize(root_a @ cov_b @ root_a))
    tr_sqrt = float(np.sum(np.sqrt(np.clip(w, 0, None))))
    diff = mu_a - mu_b
    return float(diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2 * tr_sqrt)


def _symmetrize(m):
    return (m + m.T) / 2


def gaussian_fit(emb, reg: float = 1e-6):
    emb = np.asarray(emb, dtype=np.float64)
    if emb.ndim == 1:
        emb = emb[:, None]
    if emb.shape[0] < 2:
        raise ValueError("need at least two embeddings for a covariance")
    cov = np.atleast_2d(np.cov(emb, rowvar=False))
    return emb.mean(axis=0), cov + reg * np.eye(emb.shape[1])


def frechet_distance(emb_a, emb_b, reg: float = 1e-6) -> float:
    """``||mu_a - mu_b||^2 + tr(S_a + S_b - 2 (S_a S_b)^(1/2))`` of Gaussian fits."""
    for r in (reg, reg * 100):
        try:
            mu_a, cov_a = gaussian_fit(emb_a, r)
            mu_b, cov_b = gaussian_fit(emb_b, r)
            if cov_a.shape != cov_b.shape:
                raise DimensionError(f"embedding widths differ: {cov_a.shape[0]} vs {cov_b.shape[0]}")
            value = frechet_from_stats(mu_a, cov_a, mu_b, cov_b)
        except np.linalg.LinAlgError:
            continue
        if math.isfinite(value):
            return max(value, 0.0)
    raise NumericError("matrix square root failed after regularisation retry")


def mel_embedder(x, cfg: MelConfig = MelConfig()) -> np.ndarray:
    """Default embedder: one log-mel frame per embedding."""
    return log_mel_frames(x, cfg)


def frechet_audio(x_a, x_b, embedder: Callable = mel_embedder) -> float:
    return frechet_distance(embedder(x_a), embedder(x_b))


# --------------------------------------------------------------------------
# onset alignment
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class OnsetConfig:
    rel_threshold: float = 0.1
    abs_threshold: float = 20.0  # energy units of the toy latent space
    min_gap: int = 3  # frames


def frame_energy(clip) -> np.ndarray:
    clip = np.asarray(clip, dtype=np.float64)
    return np.sum(clip ** 2, axis=1)


def detect_onsets(clip, cfg: OnsetConfig = OnsetConfig(), rate: float = LATENT_RATE) -> np.ndarray:
    """Onset times (s): local maxima of the positive frame-energy derivative."""
    energy = frame_energy(clip)
    if energy.shape[0] < 2:
        return np.zeros(0)
    flux = np.maximum(np.diff(energy, prepend=energy[0]), 0.0)
    peak = flux.max()
    if peak <= 0:
        return np.zeros(0)
    thr = max(cfg.abs_threshold, cfg.rel_threshold * peak)
    nxt = np.append(flux[1:], -np.inf)
    prv = np.insert(flux[:-1], 0, -np.inf)
    cand = np.nonzero((flux >= thr) & (flux >= prv) & (flux > nxt))[0]
    picked: list[int] = []
    for f in cand[np.argsort(-flux[cand], kind="stable")]:
        if all(abs(int(f) - p) >= cfg.min_gap for p in picked):
            picked.append(int(f))
    return np.sort(np.asarray(picked, dtype=np.float64)) / rate


def match_onsets(event_times, onset_times) -> np.ndarray:
    """Greedy nearest-pair matching; returns ``|dt|`` per event. Events left
    over once every onset is used fall back to their nearest onset, and no
    event is charged more than the distance to its nearest onset."""
    ev = np.asarray(event_times, dtype=np.float64)
    on = np.asarray(onset_times, dtype=np.float64)
    gaps = np.abs(ev[:, None] - on[None, :])
    out = np.full(ev.shape[0], np.nan)
    used_e, used_o = set(), set()
    for flat in np.argsort(gaps, axis=None, kind="stable"):
        i, j = divmod(int(flat), on.shape[0])
        if i in used_e or j in used_o:
            continue
        out[i] = gaps[i, j]
        used_e.add(i), used_o.add(j)
        if len(used_e) == ev.shape[0] or len(used_o) == on.shape[0]:
            break
    nearest = gaps.min(axis=1)
    left = np.isnan(out)
    out[left] = nearest[left]
    return np.minimum(out, nearest)


def onset_desync(event_times, clip, cfg: OnsetConfig = OnsetConfig(), rate: float = LATENT_RATE) -> float | None:
    """Mean onset misalignment (s); ``None`` when no onset is detected."""
    if len(event_times) == 0:
        raise ValueError("need at least one event")
    onsets = detect_onsets(clip, cfg, rate)
    if onsets.size == 0:
        return None
    return float(match_onsets(event_times, onsets).mean())
