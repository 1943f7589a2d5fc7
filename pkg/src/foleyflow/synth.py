"""Deterministic toy audiovisual world.

A scene is a list of timed sound events plus a background class. From it we
render the ground-truth 64-channel latent clip (43 Hz), the conditioning
streams a video encoder would provide (semantic at 8 FPS, sync at 24 FPS,
a text vector), and a listenable 16 kHz waveform.

The background is a bed of partials that flicker on and off (a two-state
Markov gate per channel) under a spectral tilt set by the background class.
Neither the class nor the gates are visible in the conditioning; only
reference audio reveals them.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import DimensionError
from .numerics import make_rng, read_tensor, write_tensor

LATENT_RATE = 43
SEMANTIC_FPS = 8
SYNC_FPS = 24
SAMPLE_RATE = 16000
LATENT_DIM = 64
GRACE = 0.05

N_CLASSES = 8
N_BACKGROUNDS = 4
SEMANTIC_DIM = 16
SYNC_DIM = 8
TEXT_DIM = 16

_CHANNELS_PER_CLASS = LATENT_DIM // N_CLASSES
_LATENT_SCALE = 4.0  # keeps clip variance near that of the unit Gaussian prior
_BG_AMPLITUDE = 0.2 * _LATENT_SCALE
_BG_TILT = 0.8
_GATE_ON = 0.5
_GATE_STAY = 0.85  # probability a gate keeps its state for another frame
_DECODER_GAIN = 0.002 / _LATENT_SCALE


def _build_world():
    rng = make_rng(20251014)
    patterns = _LATENT_SCALE * rng.uniform(0.5, 1.2, size=(N_CLASSES, _CHANNELS_PER_CLASS))
    decay_frames = 3.0 + 2.5 * np.arange(N_CLASSES)
    k = np.arange(LATENT_DIM)
    phase = 0.5 * np.pi * np.arange(N_BACKGROUNDS)[:, None]
    profiles = _BG_AMPLITUDE * (1 + _BG_TILT * np.cos(4 * np.pi * k[None, :] / LATENT_DIM + phase))
    mel = np.linspace(_hz_to_mel(150.0), _hz_to_mel(7000.0), LATENT_DIM)
    partials = 700.0 * (10 ** (mel / 2595.0) - 1)
    return patterns, decay_frames, profiles, partials


def _hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + f / 700.0)


CLASS_PATTERNS, DECAY_FRAMES, BACKGROUND_PROFILES, PARTIAL_HZ = _build_world()


@dataclass(frozen=True)
class ToyEvent:
    time_s: float
    class_id: int
    intensity: float


@dataclass(frozen=True)
class ToyScene:
    duration_s: float
    events: tuple[ToyEvent, ...] = ()
    background_class: int = 0
    texture_seed: int = 0

    def to_json(self) -> dict:
        return {
            "duration_s": self.duration_s,
            "events": [asdict(e) for e in self.events],
            "background_class": self.background_class,
            "texture_seed": self.texture_seed,
        }

    @classmethod
    def from_json(cls, blob: dict) -> "ToyScene":
        return cls(
            duration_s=float(blob["duration_s"]),
            events=tuple(ToyEvent(float(e["time_s"]), int(e["class_id"]), float(e["intensity"]))
                         for e in blob["events"]),
            background_class=int(blob["background_class"]),
            texture_seed=int(blob["texture_seed"]),
        )


@dataclass
class SceneConfig:
    duration_range: tuple[float, float] = (5.0, 15.0)
    event_rate: float = 1.0
    n_classes: int = N_CLASSES
    intensity_range: tuple[float, float] = (0.7, 1.3)


@dataclass
class Conditioning:
    """Per-clip conditioning streams, unbatched numpy arrays."""
    semantic: np.ndarray  # [t_vs, SEMANTIC_DIM]
    sync: np.ndarray      # [t_vsyn, SYNC_DIM]
    text: np.ndarray      # [TEXT_DIM]

    def slice_time(self, start_s: float, duration_s: float) -> "Conditioning":
        """Frames covering ``[start_s, start_s + duration_s)`` of each stream."""
        def cut(arr, fps):
            lo = int(round(start_s * fps))
            n = num_frames(duration_s, fps)
            out = arr[lo:lo + n]
            if out.shape[0] < n:
                out = np.concatenate([out, np.zeros((n - out.shape[0], arr.shape[1]))])
            return out
        return Conditioning(cut(self.semantic, SEMANTIC_FPS), cut(self.sync, SYNC_FPS), self.text.copy())


def num_frames(duration_s: float, rate: float) -> int:
    return int(round(duration_s * rate))


def within_grace(n_frames: int, n_latents: int, fps: float) -> bool:
    """Frame/latent ratio within the 5% grace band around ``fps / 43``."""
    if n_latents == 0:
        return n_frames == 0
    expected = fps / LATENT_RATE
    return abs(n_frames / n_latents - expected) <= GRACE * expected


# --------------------------------------------------------------------------
# generation and rendering
# --------------------------------------------------------------------------

def gen_scene(rng: np.random.Generator, cfg: SceneConfig | None = None,
              duration_s: float | None = None) -> ToyScene:
    cfg = cfg or SceneConfig()
    if duration_s is None:
        lo, hi = cfg.duration_range
        duration_s = float(rng.uniform(lo, hi))
    n_events = int(rng.poisson(cfg.event_rate * duration_s)) if cfg.event_rate > 0 else 0
    times = np.sort(rng.uniform(0.0, duration_s, size=n_events))
    classes = rng.integers(0, cfg.n_classes, size=n_events)
    intensities = rng.uniform(*cfg.intensity_range, size=n_events)
    events = tuple(ToyEvent(float(t), int(c), float(i)) for t, c, i in zip(times, classes, intensities))
    return ToyScene(
        duration_s=duration_s,
        events=events,
        background_class=int(rng.integers(0, N_BACKGROUNDS)),
        texture_seed=int(rng.integers(0, 2**31 - 1)),
    )


def background_latents(scene: ToyScene, n_frames: int) -> np.ndarray:
    rng = make_rng(scene.texture_seed)
    gates = np.empty((n_frames, LATENT_DIM), dtype=bool)
    state = rng.random(LATENT_DIM) < _GATE_ON
    for f in range(n_frames):
        redraw = rng.random(LATENT_DIM) >= _GATE_STAY
        fresh = rng.random(LATENT_DIM) < _GATE_ON
        state = np.where(redraw, fresh, state)
        gates[f] = state
    return BACKGROUND_PROFILES[scene.background_class] * gates


def event_latents(event: ToyEvent, n_frames: int) -> np.ndarray:
    out = np.zeros((n_frames, LATENT_DIM))
    f0 = int(round(event.time_s * LATENT_RATE))
    if f0 >= n_frames:
        return out
    c = event.class_id
    env = np.exp(-np.arange(n_frames - f0) / DECAY_FRAMES[c])
    block = slice(c * _CHANNELS_PER_CLASS, (c + 1) * _CHANNELS_PER_CLASS)
    out[f0:, block] = event.intensity * env[:, None] * CLASS_PATTERNS[c][None, :]
    return out


def render_latents(scene: ToyScene) -> np.ndarray:
    """Ground-truth latent clip ``[round(43 * duration), 64]``."""
    n = num_frames(scene.duration_s, LATENT_RATE)
    clip = background_latents(scene, n)
    for event in scene.events:
        clip += event_latents(event, n)
    return clip


def render_conditioning(scene: ToyScene) -> Conditioning:
    n_sem = num_frames(scene.duration_s, SEMANTIC_FPS)
    n_sync = num_frames(scene.duration_s, SYNC_FPS)
    semantic = np.zeros((n_sem, SEMANTIC_DIM))
    sync = np.zeros((n_sync, SYNC_DIM))
    hist = np.zeros(N_CLASSES)
    centers = (np.arange(n_sem) + 0.5) / SEMANTIC_FPS
    for e in scene.events:
        c = e.class_id
        hist[c] += 1
        lag = centers - e.time_s
        tau_s = DECAY_FRAMES[c] / LATENT_RATE
        presence = np.where(lag >= 0, e.intensity * np.exp(-np.maximum(lag, 0) / tau_s), 0.0)
        semantic[:, c] += presence
        j = int(math.floor(e.time_s * SEMANTIC_FPS))
        if j < n_sem:
            semantic[j, N_CLASSES + c] = 1.0
        k = int(round(e.time_s * SYNC_FPS))
        if k < n_sync:
            sync[k, c] += e.intensity
    np.minimum(semantic[:, :N_CLASSES], 1.5, out=semantic[:, :N_CLASSES])
    text = np.concatenate([hist / max(1, len(scene.events)), (hist > 0).astype(float)])
    return Conditioning(semantic, sync, text)


def decode_to_waveform(clip: np.ndarray, sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    """Additive synthesis: latent channel ``k`` is the amplitude envelope of a
    sine partial at ``PARTIAL_HZ[k]``. Envelopes ramp linearly from frame
    ``f - 1`` to frame ``f`` across the slot ``[f, f + 1) / 43`` s, so an
    onset at frame ``f`` starts sounding at ``f / 43`` s."""
    clip = np.asarray(clip, dtype=np.float64)
    if clip.ndim != 2 or clip.shape[1] != LATENT_DIM:
        raise DimensionError(f"expected a [t, {LATENT_DIM}] clip, got {clip.shape}")
    n_frames = clip.shape[0]
    n_samples = int(round(n_frames * sample_rate / LATENT_RATE))
    out = np.zeros(n_samples)
    block = sample_rate
    for lo in range(0, n_samples, block):
        t = np.arange(lo, min(lo + block, n_samples)) / sample_rate
        pos = np.clip(t * LATENT_RATE - 1, 0, n_frames - 1)  # frame f is reached at the end of its slot
        i0 = np.floor(pos).astype(int)
        i1 = np.minimum(i0 + 1, n_frames - 1)
        frac = (pos - i0)[:, None]
        env = clip[i0] * (1 - frac) + clip[i1] * frac
        phases = np.sin(2 * np.pi * t[:, None] * PARTIAL_HZ[None, :])
        out[lo:lo + t.size] = _DECODER_GAIN * np.einsum("tk,tk->t", env, phases)
    return out


# --------------------------------------------------------------------------
# dataset on disk
# --------------------------------------------------------------------------

@dataclass
class ClipRecord:
    clip_id: str
    seed: int
    scene: ToyScene
    latents: np.ndarray
    cond: Conditioning = field(repr=False)


def build_clip(clip_id: str, seed: int, cfg: SceneConfig) -> ClipRecord:
    scene = gen_scene(make_rng(seed), cfg)
    latents = render_latents(scene)
    cond = render_conditioning(scene)
    for stream, fps in ((cond.semantic, SEMANTIC_FPS), (cond.sync, SYNC_FPS)):
        if not within_grace(stream.shape[0], latents.shape[0], fps):
            raise DimensionError(f"{clip_id}: frame ratio outside the grace band")
    return ClipRecord(clip_id, seed, scene, latents, cond)


def write_clip(path: Path, record: ClipRecord) -> None:
    manifest = {"clip_id": record.clip_id, "seed": record.seed, "scene": record.scene.to_json()}
    with open(path, "wb") as fh:
        fh.write((json.dumps(manifest, sort_keys=True) + "\n").encode("utf-8"))
        for arr in (record.latents, record.cond.semantic, record.cond.sync, record.cond.text):
            write_tensor(fh, arr)


def read_clip(path: Path) -> ClipRecord:
    with open(path, "rb") as fh:
        manifest = json.loads(fh.readline().decode("utf-8"))
        latents, semantic, sync, text = (read_tensor(fh) for _ in range(4))
    return ClipRecord(manifest["clip_id"], int(manifest["seed"]), ToyScene.from_json(manifest["scene"]),
                      latents, Conditioning(semantic, sync, text))


def write_dataset(out_dir, n_clips: int, seed: int, cfg: SceneConfig | None = None) -> list[ClipRecord]:
    cfg = cfg or SceneConfig()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = make_rng(seed)
    records = []
    while len(records) < n_clips:
        clip_id = f"clip{len(records):05d}"
        try:
            record = build_clip(clip_id, int(rng.integers(0, 2**32 - 1)), cfg)
        except DimensionError:
            continue  # rejected: stream lengths outside the grace band
        write_clip(out / f"{record.clip_id}.clip", record)
        records.append(record)
    with open(out / "index.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["clip_id", "duration_s", "seed"])
        for r in records:
            writer.writerow([r.clip_id, repr(r.scene.duration_s), r.seed])
    return records


def read_dataset(data_dir) -> list[ClipRecord]:
    root = Path(data_dir)
    index = root / "index.csv"
    if not index.is_file():
        raise FileNotFoundError(f"no dataset index at {index}")
    with open(index, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [read_clip(root / f"{row['clip_id']}.clip") for row in rows]
