"""Command-line entry point: ``foleyflow <command> [options]``.

Numeric settings come from the ``--config`` file (see ``foleyflow config``);
only two environment variables are read: ``FOLEYFLOW_THREADS`` (torch thread
count, default 1) and ``FOLEYFLOW_LOG_LEVEL`` (default WARNING).

Exit codes: 0 success, 2 config error, 3 I/O error, 4 numeric error,
5 range or dimension error.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch

from . import metrics as M
from .config import DOCS, RunConfig
from .errors import (CheckpointError, ConfigError, DimensionError, NumericError, RangeError)
from .numerics import load_tensor, make_rng, save_tensor
from .sampling import (GenerationRequest, ReferenceAudio, SamplerConfig, long_form_generate, sample_batch,
                       shortcut_sample)
from .synth import (LATENT_RATE, SAMPLE_RATE, ClipRecord, decode_to_waveform, read_clip, read_dataset,
                    write_dataset)
from .training import load_model, load_state_file, new_state, train_loop
from .model import ConditioningBundle

log = logging.getLogger("foleyflow")

EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC, EXIT_RANGE = 2, 3, 4, 5


# --------------------------------------------------------------------------
# helpers
# --------------------------------------------------------------------------

def write_wav(path, wave: np.ndarray) -> None:
    from scipy.io import wavfile
    pcm = np.clip(np.round(np.asarray(wave) * 32767.0), -32768, 32767).astype("<i2")
    wavfile.write(path, SAMPLE_RATE, pcm)


def read_wav(path) -> np.ndarray:
    from scipy.io import wavfile
    rate, data = wavfile.read(path)
    if rate != SAMPLE_RATE:
        raise DimensionError(f"{path}: sample rate {rate} Hz, expected {SAMPLE_RATE} Hz")
    if data.ndim != 1:
        raise DimensionError(f"{path}: expected mono audio")
    if data.dtype == np.int16:
        return data.astype(np.float64) / 32767.0
    if data.dtype.kind == "f":
        return data.astype(np.float64)
    raise DimensionError(f"{path}: unsupported PCM type {data.dtype}")


def load_waveform(path) -> np.ndarray:
    """Waveform from a ``.wav`` file, a latent tensor file or a dataset clip."""
    path = Path(path)
    if path.suffix == ".wav":
        return read_wav(path)
    return decode_to_waveform(load_latents(path))


def load_latents(path) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"{path} not found")
    if path.suffix == ".clip":
        return read_clip(path).latents
    return load_tensor(path)


def load_scene_clip(path) -> ClipRecord:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"scene clip {path} not found")
    return read_clip(path)


def spectrogram_matrix(wave: np.ndarray, mel_cfg: M.MelConfig) -> np.ndarray:
    """``[frames, n_mels]`` log-mel values used for plots."""
    return np.log(M.mel_spectrogram(wave, mel_cfg) + mel_cfg.eps).T


def write_matrix_csv(path, matrix: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        for row in matrix:
            writer.writerow([repr(float(v)) for v in row])


def write_png(path, matrix: np.ndarray) -> None:
    from PIL import Image
    lo, hi = float(matrix.min()), float(matrix.max())
    scaled = np.zeros_like(matrix) if hi <= lo else (matrix - lo) / (hi - lo)
    img = np.flipud(np.round(scaled.T * 255).astype(np.uint8))  # low frequencies at the bottom
    Image.fromarray(img, mode="L").save(path, format="PNG", optimize=False)


def emit_outputs(prefix: str, clip: np.ndarray, cfg: RunConfig) -> None:
    prefix = Path(prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    save_tensor(prefix.with_suffix(".lat"), clip)
    wave = decode_to_waveform(clip)
    write_wav(prefix.with_suffix(".wav"), wave)
    write_matrix_csv(prefix.with_suffix(".mel.csv"), spectrogram_matrix(wave, cfg.metrics.mel()))


def sampler_for(cfg: RunConfig, meta: dict, args) -> SamplerConfig:
    sample = cfg.sample
    if getattr(args, "steps", None) is not None:
        sample = type(sample)(**{**vars(sample), "n_steps": args.steps})
    if getattr(args, "guidance", None) is not None:
        sample = type(sample)(**{**vars(sample), "guidance_w": args.guidance})
    if getattr(args, "seed", None) is not None:
        sample = type(sample)(**{**vars(sample), "seed": args.seed})
    try:
        return sample.sampler(int(meta.get("n_levels", cfg.train.n_levels)), meta.get("shortcut", "1") == "1")
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def cmd_gen_data(args, cfg: RunConfig) -> int:
    n = cfg.data.n_clips if args.n_clips is None else args.n_clips
    seed = cfg.data.seed if args.seed is None else args.seed
    write_dataset(args.out, n, seed, cfg.data.scene_config())
    return 0


def cmd_train(args, cfg: RunConfig) -> int:
    records = read_dataset(args.data)
    train_cfg = cfg.train
    if args.steps is not None:
        train_cfg = type(train_cfg)(**{**vars(train_cfg), "steps": args.steps})
    state = load_state_file(args.resume, train_cfg) if args.resume else new_state(cfg.model, train_cfg)
    log_path = args.log or str(args.out) + ".csv"
    if not records and train_cfg.steps > state.step:
        raise ValueError("dataset is empty")
    train_loop(train_cfg, records, state, ckpt_path=args.out, log_path=log_path)
    return 0


def _reference(args, total_len: int):
    if not args.reference:
        if args.ref_start is not None:
            raise ConfigError("--ref-start requires --reference")
        return None
    latents = load_latents(args.reference)
    if args.ref_len is not None:
        if not 0 < args.ref_len <= latents.shape[0]:
            raise RangeError(f"--ref-len {args.ref_len} outside [1, {latents.shape[0]}]")
        latents = latents[:args.ref_len]
    ref = ReferenceAudio(torch.as_tensor(latents), args.ref_start or 0)
    ref.check(total_len)
    return ref


def cmd_sample(args, cfg: RunConfig) -> int:
    model, meta = load_model(args.ckpt)
    scene = load_scene_clip(args.scene)
    sampler = sampler_for(cfg, meta, args)
    seconds = args.seconds if args.seconds is not None else len(scene.latents) / LATENT_RATE
    total_len = int(round(seconds * LATENT_RATE))
    cond = scene.cond.slice_time(0.0, total_len / LATENT_RATE)
    request = GenerationRequest(cond, total_len, _reference(args, total_len))
    clip = shortcut_sample(model, request, sampler, make_rng(sampler.seed))
    emit_outputs(args.out, clip, cfg)
    return 0


def cmd_outpaint(args, cfg: RunConfig) -> int:
    model, meta = load_model(args.ckpt)
    scene = load_scene_clip(args.scene)
    sampler = sampler_for(cfg, meta, args)
    seconds = args.seconds if args.seconds is not None else scene.scene.duration_s
    clip = long_form_generate(model, scene.cond, seconds, sampler, make_rng(sampler.seed),
                              cfg.sample.chunk_seconds, cfg.sample.overlap_tokens)
    emit_outputs(args.out, clip, cfg)
    return 0


def _parse_span(text: str | None):
    if not text:
        return None
    try:
        start, length = (int(v) for v in text.split(":"))
    except ValueError as exc:
        raise ConfigError(f"--exclude-span expects START:LEN tokens, got {text!r}") from exc
    if start < 0 or length < 0:
        raise RangeError("--exclude-span values must be non-negative")
    return start, length


def exclude_span(clip: np.ndarray, span) -> np.ndarray:
    if span is None:
        return clip
    start, length = span
    if start + length > clip.shape[0]:
        raise RangeError(f"exclusion span {start}:{length} beyond clip length {clip.shape[0]}")
    return np.concatenate([clip[:start], clip[start + length:]], axis=0)


def evaluate_pair(clip_id: str, gen: np.ndarray, ref: np.ndarray, events, cfg: RunConfig, span=None) -> dict:
    gen, ref = exclude_span(gen, span), exclude_span(ref, span)
    if span is not None:
        start, length = span
        events = [t - (length / LATENT_RATE if t >= (start + length) / LATENT_RATE else 0.0)
                  for t in events if not start / LATENT_RATE <= t < (start + length) / LATENT_RATE]
    mel = cfg.metrics.mel()
    w_gen, w_ref = decode_to_waveform(gen), decode_to_waveform(ref)
    rng = make_rng([cfg.metrics.seed, int.from_bytes(clip_id.encode(), "little") % (1 << 32)])
    row = {
        "clip_id": clip_id,
        "swsd": M.swsd(w_ref, w_gen, mel, cfg.metrics.n_projections, rng),
        "frechet": M.frechet_distance(M.log_mel_frames(w_ref, mel), M.log_mel_frames(w_gen, mel)),
        "onset_desync": M.onset_desync(events, gen) if events else None,
    }
    return row


def _fmt(v):
    if v is None:
        return "undetected"
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def write_eval_csv(path, rows, summary_label: str = "mean") -> None:
    cols = ["clip_id", "swsd", "frechet", "onset_desync"]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(cols)
        for r in rows:
            writer.writerow([_fmt(r[c]) for c in cols])
        writer.writerow([summary_label] + [_fmt(v) for v in summarize(rows)])


def summarize(rows):
    out = []
    for c in ("swsd", "frechet", "onset_desync"):
        vals = [r[c] for r in rows if r[c] is not None]
        out.append(float(np.mean(vals)) if vals else None)
    return out


def cmd_eval(args, cfg: RunConfig) -> int:
    span = _parse_span(args.exclude_span)
    ref_dir, gen_dir = Path(args.reference), Path(args.generated)
    if not ref_dir.is_dir() or not gen_dir.is_dir():
        raise FileNotFoundError("both --generated and --reference must be directories")
    rows = []
    for ref_path in sorted(ref_dir.glob("*.clip")):
        clip_id = ref_path.stem
        gen_path = next((p for p in (gen_dir / f"{clip_id}.lat", gen_dir / f"{clip_id}.clip") if p.is_file()), None)
        if gen_path is None:
            continue
        ref = read_clip(ref_path)
        gen = load_latents(gen_path)
        n = min(gen.shape[0], ref.latents.shape[0])
        events = [e.time_s for e in ref.scene.events if e.time_s < n / LATENT_RATE]
        rows.append(evaluate_pair(clip_id, gen[:n], ref.latents[:n], events, cfg, span))
    if not rows:
        raise FileNotFoundError("no matching clips between generated and reference directories")
    write_eval_csv(args.out, rows)
    return 0


def cmd_sweep(args, cfg: RunConfig) -> int:
    """Few-step curve: one summary row per sampler step count."""
    model, meta = load_model(args.ckpt)
    records = read_dataset(args.data)[:args.n_clips]
    if not records:
        raise FileNotFoundError("dataset has no clips")
    total_len = int(round(args.seconds * LATENT_RATE))
    records = [r for r in records if r.latents.shape[0] >= total_len]
    if not records:
        raise RangeError(f"no clip is at least {args.seconds} s long")
    conds = [r.cond.slice_time(0.0, total_len / LATENT_RATE) for r in records]
    bundle = ConditioningBundle.from_arrays([c.semantic for c in conds], [c.sync for c in conds],
                                            [c.text for c in conds], dtype=next(model.parameters()).dtype)
    steps_list = [int(s) for s in args.steps_list.split(",")]
    with open(args.out, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["n_steps", "swsd", "frechet", "onset_desync"])
        for n_steps in steps_list:
            args.steps = n_steps
            sampler = sampler_for(cfg, meta, args)
            clips = sample_batch(model, bundle, total_len, None, sampler, make_rng(sampler.seed)).numpy()
            rows = []
            for rec, clip in zip(records, clips):
                events = [e.time_s for e in rec.scene.events if e.time_s < total_len / LATENT_RATE]
                rows.append(evaluate_pair(rec.clip_id, clip, rec.latents[:total_len], events, cfg))
            writer.writerow([n_steps] + [_fmt(v) for v in summarize(rows)])
    return 0


def cmd_plot(args, cfg: RunConfig) -> int:
    wave = load_waveform(args.input)
    matrix = spectrogram_matrix(wave, cfg.metrics.mel())
    prefix = Path(args.out)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    write_png(prefix.with_suffix(".png"), matrix)
    write_matrix_csv(prefix.with_suffix(".csv"), matrix)
    return 0


def cmd_config(args, cfg: RunConfig) -> int:
    """Print the effective configuration (defaults when no file is given)."""
    sys.stdout.write(cfg.to_text())
    return 0


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    epilog = ("config sections:\n" + "\n".join(f"  [{k}] {v}" for k, v in DOCS.items())
              + "\n\ndefaults:\n" + RunConfig().to_text())
    parser = argparse.ArgumentParser(prog="foleyflow", description="Toy video-to-audio shortcut flow matching.",
                                     epilog=epilog, formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_text):
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", help="run configuration file (defaults are used when omitted)")
        p.set_defaults(func=func)
        return p

    p = add("gen-data", cmd_gen_data, "write a synthetic dataset")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--n-clips", type=int, help="override [data] n_clips")
    p.add_argument("--seed", type=int, help="override [data] seed")

    p = add("train", cmd_train, "train a velocity network")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--steps", type=int, help="override [train] steps (total, including resumed steps)")
    p.add_argument("--resume", help="checkpoint to resume from")
    p.add_argument("--log", help="metrics CSV path (default: <out>.csv)")

    for name, func, text in (("sample", cmd_sample, "generate one clip"),
                             ("outpaint", cmd_outpaint, "generate a long clip by chunked outpainting")):
        p = add(name, func, text)
        p.add_argument("--ckpt", required=True, help="checkpoint path")
        p.add_argument("--scene", required=True, help="dataset clip providing the conditioning")
        p.add_argument("--out", required=True, help="output prefix (.lat, .wav, .mel.csv)")
        p.add_argument("--steps", type=int, help="override [sample] n_steps")
        p.add_argument("--guidance", type=float, help="override [sample] guidance_w")
        p.add_argument("--seed", type=int, help="override [sample] seed")
        p.add_argument("--seconds", type=float, help="output duration (default: scene duration)")
        if name == "sample":
            p.add_argument("--reference", help="latent file or clip used as reference audio")
            p.add_argument("--ref-start", type=int, help="token index of the reference inside the output")
            p.add_argument("--ref-len", type=int, help="use only the first N reference tokens")

    p = add("eval", cmd_eval, "score generated clips against a reference dataset")
    p.add_argument("--generated", required=True, help="directory of <clip_id>.lat files")
    p.add_argument("--reference", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="CSV path")
    p.add_argument("--exclude-span", help="START:LEN tokens removed before scoring")

    p = add("sweep", cmd_sweep, "evaluate a range of sampler step counts")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="CSV path")
    p.add_argument("--steps-list", default="1,2,4,8,16,32")
    p.add_argument("--n-clips", type=int, default=8)
    p.add_argument("--seconds", type=float, default=2.0)
    p.add_argument("--guidance", type=float, help="override [sample] guidance_w")
    p.add_argument("--seed", type=int, help="override [sample] seed")

    p = add("plot", cmd_plot, "mel-spectrogram image and CSV for a clip or WAV")
    p.add_argument("--input", required=True, help=".wav, latent file or dataset clip")
    p.add_argument("--out", required=True, help="output prefix (.png, .csv)")

    add("config", cmd_config, "print the effective configuration")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=os.environ.get("FOLEYFLOW_LOG_LEVEL", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    torch.set_num_threads(int(os.environ.get("FOLEYFLOW_THREADS", "1")))
    try:
        cfg = RunConfig.load(args.config)
        return args.func(args, cfg)
    except ConfigError as exc:
        log.error("%s", exc)
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, CheckpointError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (RangeError, DimensionError) as exc:
        print(f"range error: {exc}", file=sys.stderr)
        return EXIT_RANGE
    except (NumericError, ArithmeticError) as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
