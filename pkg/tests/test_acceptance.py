"""End-to-end acceptance checks, one test per criterion.

Heavy criteria (7 to 10) share two 2k-step toy training runs that are cached on
disk under ``$FOLEYFLOW_ACCEPTANCE_CACHE`` (default ``.acceptance_cache`` in the
repository root), keyed by their configuration.
"""

import dataclasses
import hashlib
import math
import os
import time
from pathlib import Path

import numpy as np
import pytest
import torch
from torch import nn

from conftest import record
from foleyflow.cli import main
from foleyflow.config import RunConfig
from foleyflow.contrastive import ContrastiveConfig, ContrastivePair, make_batch, make_scenes, train_contrastive
from foleyflow.metrics import (MelConfig, frechet_distance, log_mel_frames, onset_desync, sliced_w1, swsd)
from foleyflow.model import ConditioningBundle, LengthUnify, ModelConfig, VelocityNet, randomize_parameters
from foleyflow.numerics import finite_diff_grad, make_rng
from foleyflow.sampling import (GenerationRequest, ReferenceAudio, SamplerConfig, cfg_velocity, chunk_borders,
                                long_form_generate, reference_mask, restitch_generate, sample_batch, seam_jump,
                                shortcut_sample)
from foleyflow.synth import LATENT_RATE, SceneConfig, build_clip, decode_to_waveform, write_dataset
from foleyflow.training import (TrainConfig, assemble_batch, compute_targets, load_model, loss_and_grads, new_state,
                                shortcut_loss, train_loop)

REPO = Path(__file__).resolve().parents[1]
CACHE = Path(os.environ.get("FOLEYFLOW_ACCEPTANCE_CACHE", REPO / ".acceptance_cache"))

GRAD_TINY = ModelConfig(model_dim=8, heads=2, n_mm_blocks=2, n_mm_blocks_with_audio_self_attn=1,
                        n_single_blocks=1, mlp_ratio=2, freq_dim=4)


def rel_err(a, n, floor=1e-6):
    a, n = np.asarray(a, dtype=np.float64), np.asarray(n, dtype=np.float64)
    return float(np.max(np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)))


def sampled_fd_error(loss_fn, params: dict, budget: int, seed: int) -> tuple[float, int]:
    """Max relative error between autograd and central differences over at most
    ``budget`` coordinates spread across every tensor."""
    for p in params.values():
        p.grad = None
    loss_fn().backward()
    analytic = {n: p.grad.detach().clone() for n, p in params.items()}
    rng = make_rng(seed)
    names = list(params)
    per = max(1, budget // len(names))
    coords = {n: sorted(set(int(i) for i in rng.integers(0, params[n].numel(), per))) for n in names}
    total = sum(len(v) for v in coords.values())
    assert total <= budget
    with torch.no_grad():
        fd = finite_diff_grad(lambda _: float(loss_fn()), params, eps=1e-6, coords=coords)
    a = np.concatenate([analytic[n].view(-1)[coords[n]].numpy() for n in names])
    f = np.concatenate([fd[n].view(-1)[coords[n]].numpy() for n in names])
    return rel_err(a, f), total


# --------------------------------------------------------------------------
# 1. gradients
# --------------------------------------------------------------------------

def test_criterion_01_gradient_correctness():
    start = time.time()
    # shortcut loss through the full velocity network
    model = VelocityNet(GRAD_TINY).double()
    randomize_parameters(model, make_rng(1), scale=0.3)
    records = [build_clip(f"g{i}", 40 + i, SceneConfig(duration_range=(1.2, 1.6))) for i in range(3)]
    batch = assemble_batch(records, make_rng(2), TrainConfig(batch_size=4, crop_seconds=1, mask_prob=0.5, n_levels=3),
                           dtype=torch.float64)
    batch.is_consistency[:2] = True
    batch.t[:2] = torch.tensor([0.2, 0.5], dtype=torch.float64)
    batch.d[:2] = torch.tensor([0.25, 0.125], dtype=torch.float64)
    targets = compute_targets(model, batch)
    # null_sync also feeds the detached interpolation branch of length unification
    params = {n: p for n, p in model.named_parameters() if n != "null_sync"}
    err_shortcut, n1 = sampled_fd_error(lambda: shortcut_loss(model, batch, targets).loss, params, 100, 3)

    # sigmoid contrastive loss through both toy encoders and the head
    torch.manual_seed(0)
    ccfg = ContrastiveConfig(batch_size=4, snippets_per_scene=2, hidden=6, embed_dim=3)
    pair = ContrastivePair(ccfg).double()
    snippets = make_batch(make_scenes(make_rng(4), 3, ccfg), make_rng(5), ccfg)
    snippets.video, snippets.audio = snippets.video.double(), snippets.audio.double()
    err_siglip, n2 = sampled_fd_error(lambda: pair.loss(snippets), dict(pair.named_parameters()), 100, 6)

    # length unification (learned branch; the interpolation branch has no parameters)
    lu = LengthUnify(3).double()
    with torch.no_grad():
        lu.gate.fill_(0.7)
    v = torch.as_tensor(make_rng(7).standard_normal((2, 12, 3)))
    weights = torch.as_tensor(make_rng(8).standard_normal((2, 21, 3)))
    err_lu, n3 = sampled_fd_error(lambda: (lu(v, 21) * weights).sum(), dict(lu.named_parameters()), 100, 9)

    elapsed = time.time() - start
    worst = max(err_shortcut, err_siglip, err_lu)
    ok = worst < 1e-4 and elapsed < 60
    record(1, ok, f"max rel err shortcut {err_shortcut:.2e} ({n1} coords), siglip {err_siglip:.2e} ({n2}), "
                  f"length-unify {err_lu:.2e} ({n3}); {elapsed:.1f}s")
    assert ok


# --------------------------------------------------------------------------
# 2. SWSD oracle
# --------------------------------------------------------------------------

def test_criterion_02_swsd_oracle():
    start = time.time()
    rng = make_rng(10)
    a = rng.standard_normal(8000)
    b = 0.5 * np.sin(2 * np.pi * 700 * np.arange(12000) / 16000) + 0.05 * rng.standard_normal(12000)
    one = MelConfig(n_mels=1)
    # independent oracle: per-frame log-mel values normalised by their column sum, subsampled with the
    # same rng stream, then compared by sorted differences
    fa, fb = log_mel_frames(a, one), log_mel_frames(b, one)
    sub = make_rng(11)
    keep = np.sort(sub.choice(fb.shape[0], size=fa.shape[0], replace=False))
    oracle = float(np.mean(np.abs(np.sort(fa[:, 0]) - np.sort(fb[keep, 0]))))
    got_mel1 = swsd(a, b, one, k=7, rng=make_rng(11))
    err_mel1 = abs(got_mel1 - oracle)
    # the same identity on arbitrary one-dimensional samples
    xa, xb = rng.standard_normal((300, 1)), rng.exponential(size=(300, 1))
    err_1d = abs(sliced_w1(xa, xb, 5, rng) - np.mean(np.abs(np.sort(xa[:, 0]) - np.sort(xb[:, 0]))))
    self_dist = swsd(a, a.copy(), rng=make_rng(12))

    frames_a = log_mel_frames(a)
    frames_b = log_mel_frames(b)[:frames_a.shape[0]]
    ks = np.array([10, 100, 1000])
    var = np.array([np.var([sliced_w1(frames_a, frames_b, k, make_rng([13, k, s])) for s in range(60)]) for k in ks])
    slope = float(np.polyfit(np.log(ks), np.log(var), 1)[0])
    elapsed = time.time() - start
    ok = err_mel1 < 1e-9 and err_1d < 1e-9 and self_dist == 0.0 and abs(slope + 1) <= 0.2 and elapsed < 60
    record(2, ok, f"n_mels=1 err {err_mel1:.1e}, 1D err {err_1d:.1e}, swsd(a,a)={self_dist}, "
                  f"variance slope {slope:.3f}; {elapsed:.1f}s")
    assert ok


# --------------------------------------------------------------------------
# 3. Fréchet closed form
# --------------------------------------------------------------------------

def test_criterion_03_frechet_closed_form():
    rng = make_rng(14)
    cases = [((0.0, 1.0), (1.0, 1.0)), ((0.0, 1.0), (0.0, 2.0)), ((0.5, 1.0), (-1.0, 3.0))]
    details, ok = [], True
    for (m1, s1), (m2, s2) in cases:
        a = m1 + s1 * rng.standard_normal(10_000)
        b = m2 + s2 * rng.standard_normal(10_000)
        expected = (m1 - m2) ** 2 + (s1 - s2) ** 2
        got = frechet_distance(a, b)
        ok &= abs(got - expected) <= 0.05 * expected
        details.append(f"{got:.4f}/{expected:.4f}")
    record(3, ok, "got/expected " + ", ".join(details))
    assert ok


# --------------------------------------------------------------------------
# 4. masked objective
# --------------------------------------------------------------------------

class PerToken(nn.Module):
    """Each output row depends only on the same input row."""

    def __init__(self):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(66, 16), nn.GELU(), nn.Linear(16, 64)).double()

    def forward(self, x_t, t, d, cond, mask=None):
        b, n, _ = x_t.shape
        t = torch.as_tensor(t, dtype=x_t.dtype).expand(b)[:, None, None].expand(b, n, 1)
        d = torch.as_tensor(d, dtype=x_t.dtype).expand(b)[:, None, None].expand(b, n, 1)
        return self.net(torch.cat([x_t, t, d], dim=-1))


def test_criterion_04_masked_objective():
    records = [build_clip(f"m{i}", 60 + i, SceneConfig(duration_range=(2.0, 3.0))) for i in range(4)]
    net = VelocityNet(GRAD_TINY).double()
    randomize_parameters(net, make_rng(15), scale=0.3)
    torch.manual_seed(1)
    token_net = PerToken()
    checked, ok = 0, True
    for seed in range(6):
        cfg = TrainConfig(batch_size=6, crop_seconds=1, mask_prob=0.8, consistency_ratio=0.5)
        batch = assemble_batch(records, make_rng([16, seed]), cfg, dtype=torch.float64)
        span = batch.mask[..., None]
        bump = torch.as_tensor(make_rng([17, seed]).standard_normal(batch.x1.shape))
        # full network: ground truth inside spans enters only through loss terms that are excluded
        targets = compute_targets(net, batch)
        _, base = loss_and_grads(net, batch, targets)
        _, moved = loss_and_grads(net, batch, torch.where(span, targets + 3 * bump, targets))
        ok &= all(torch.equal(base[n], moved[n]) for n in base)
        noisy = dataclasses.replace(batch, x0=torch.where(span, batch.x0 + 3 * bump, batch.x0))
        _, moved = loss_and_grads(net, noisy)
        ok &= all(torch.equal(base[n], moved[n]) for n in base)
        # per-token network: the ground-truth latents themselves may be perturbed inside spans
        _, base = loss_and_grads(token_net, batch)
        shifted = dataclasses.replace(batch, x1=torch.where(span, batch.x1 + 3 * bump, batch.x1))
        _, moved = loss_and_grads(token_net, shifted)
        ok &= all(torch.equal(base[n], moved[n]) for n in base)
        checked += int(batch.mask.any(dim=1).sum())
    record(4, ok, f"bit-exact gradients over 6 batches ({checked} masked items)")
    assert ok


# --------------------------------------------------------------------------
# 5. reference preservation
# --------------------------------------------------------------------------

class Recording(nn.Module):
    def __init__(self, inner):
        super().__init__()
        self.inner = inner
        self.cfg = inner.cfg
        self.inputs = []

    def forward(self, x_t, t, d, cond, mask=None):
        self.inputs.append((x_t.detach().clone(), mask))
        return self.inner(x_t, t, d, cond, mask)


def test_criterion_05_reference_preservation():
    model = VelocityNet(GRAD_TINY)
    randomize_parameters(model, make_rng(18), scale=0.3)
    rec = build_clip("r", 19, SceneConfig(duration_range=(2.0, 2.0)))
    ref = ReferenceAudio(torch.as_tensor(rec.latents[20:42]), 30)
    ok, counts = True, []
    for n_steps in (1, 2, 4, 8, 16, 32, 64, 128):
        wrapped = Recording(model)
        out = shortcut_sample(wrapped, GenerationRequest(rec.cond.slice_time(0, 2.0), 86, ref),
                              SamplerConfig(n_steps=n_steps), make_rng(n_steps))
        ok &= np.array_equal(out[30:52], rec.latents[20:42])
        # conditional passes see the reference at every step
        cond_inputs = [x for x, m in wrapped.inputs if m is not None]
        ok &= len(cond_inputs) == n_steps
        ok &= all(torch.equal(x[0, 30:52], ref.latents.to(x.dtype)) for x in cond_inputs)
        counts.append(n_steps)
    record(5, ok, f"reference span bit-identical for step counts {counts}")
    assert ok


# --------------------------------------------------------------------------
# 6. CFG identities
# --------------------------------------------------------------------------

class TwoValueStub(nn.Module):
    def __init__(self):
        super().__init__()
        self.cfg = GRAD_TINY
        self.anchor = nn.Parameter(torch.zeros(()))

    def forward(self, x_t, t, d, cond, mask=None):
        uncond = cond.drop_flags().all(dim=1)[:, None, None]
        base = torch.sin(3 * x_t) + t
        return torch.where(uncond, base - 0.7, base * 1.3 + 0.2)


def test_criterion_06_cfg_identities():
    stub = TwoValueStub()
    rng = make_rng(20)
    x = torch.as_tensor(rng.standard_normal((2, 43, 64)))
    rec = build_clip("c", 21, SceneConfig(duration_range=(1.0, 1.0)))
    cond = ConditioningBundle.from_arrays([rec.cond.semantic] * 2, [rec.cond.sync] * 2, [rec.cond.text] * 2,
                                          dtype=torch.float64)
    mask, values = reference_mask([ReferenceAudio(torch.as_tensor(rec.latents[:5]), 3), None], 43, 64,
                                  torch.float64)
    x_hat = torch.where(mask[..., None], values, x)
    ok = True
    for model in (stub, VelocityNet(GRAD_TINY).double()):
        if isinstance(model, VelocityNet):
            randomize_parameters(model, make_rng(22), scale=0.3)
        with torch.no_grad():
            v_c = model(x_hat, 0.3, 0.125, cond, mask)
            v_u = model(x, 0.3, 0.125, cond.unconditional(), None)
            ok &= torch.equal(cfg_velocity(model, x, mask, values, cond, 0.3, 0.125, 1.0), v_c)
            ok &= torch.equal(cfg_velocity(model, x, mask, values, cond, 0.3, 0.125, 0.0), v_u)
            ok &= torch.allclose(cfg_velocity(model, x, mask, values, cond, 0.3, 0.125, 4.0), v_u + 4 * (v_c - v_u),
                                 atol=1e-12)
    record(6, ok, "w=1 conditional and w=0 unconditional bit-exact on stub and network")
    assert ok


# --------------------------------------------------------------------------
# 11. contrastive retrieval
# --------------------------------------------------------------------------

def test_criterion_11_contrastive_retrieval():
    aligned = train_contrastive(ContrastiveConfig())
    control = train_contrastive(ContrastiveConfig(shuffled=True))
    chance = 1 / ContrastiveConfig().batch_size
    ok = aligned.heldout_top1 >= 0.90 and abs(control.heldout_top1 - chance) <= 0.05
    record(11, ok, f"held-out top-1 {aligned.heldout_top1:.3f}; misaligned control {control.heldout_top1:.3f} "
                   f"(chance {chance:.3f})")
    assert ok


# --------------------------------------------------------------------------
# 12. CLI determinism
# --------------------------------------------------------------------------

SMALL_CONFIG = """
[model]
model_dim = 16
heads = 2
n_single_blocks = 1
mlp_ratio = 2
freq_dim = 8

[train]
batch_size = 4
crop_seconds = 1
steps = 4

[sample]
n_steps = 4
guidance_w = 2.0
chunk_seconds = 2

[data]
n_clips = 4
duration_min = 2.0
duration_max = 3.0

[metrics]
n_projections = 20
"""


def run_every_command(root: Path, capsys) -> dict[str, bytes]:
    root.mkdir()
    cfg = root / "run.ini"
    cfg.write_text(SMALL_CONFIG)
    c = ["--config", str(cfg)]
    data, gen = root / "data", root / "gen"
    assert main(["gen-data", *c, "--out", str(data)]) == 0
    first = sorted(data.glob("*.clip"))[0]
    assert main(["train", *c, "--data", str(data), "--out", str(root / "m.ckpt"), "--steps", "2"]) == 0
    assert main(["train", *c, "--data", str(data), "--out", str(root / "m.ckpt"),
                 "--resume", str(root / "m.ckpt"), "--log", str(root / "resumed.csv")]) == 0
    assert main(["sample", *c, "--ckpt", str(root / "m.ckpt"), "--scene", str(first),
                 "--out", str(gen / first.stem)]) == 0
    assert main(["sample", *c, "--ckpt", str(root / "m.ckpt"), "--scene", str(first), "--out", str(root / "ref"),
                 "--reference", str(first), "--ref-start", "10", "--ref-len", "20"]) == 0
    assert main(["outpaint", *c, "--ckpt", str(root / "m.ckpt"), "--scene", str(first), "--seconds", "5",
                 "--out", str(root / "long")]) == 0
    assert main(["eval", *c, "--generated", str(gen), "--reference", str(data), "--out", str(root / "eval.csv")]) == 0
    assert main(["sweep", *c, "--ckpt", str(root / "m.ckpt"), "--data", str(data), "--steps-list", "1,2,4",
                 "--n-clips", "2", "--out", str(root / "sweep.csv")]) == 0
    assert main(["plot", *c, "--input", str(root / "long.wav"), "--out", str(root / "plot")]) == 0
    capsys.readouterr()
    assert main(["config", *c]) == 0
    outputs = {"config.stdout": capsys.readouterr().out.encode()}
    for path in sorted(p for p in root.rglob("*") if p.is_file()):
        outputs[str(path.relative_to(root))] = path.read_bytes()
    return outputs


def test_criterion_12_cli_determinism(tmp_path, capsys):
    a = run_every_command(tmp_path / "a", capsys)
    b = run_every_command(tmp_path / "b", capsys)
    differing = sorted(k for k in a.keys() | b.keys() if a.get(k) != b.get(k))
    commands = "gen-data train (fresh and resumed) sample outpaint eval sweep plot config"
    ok = not differing and len(a) > 10
    record(12, ok, f"{len(a)} output files byte-identical across two runs of {commands}"
           if ok else f"differing outputs: {differing}")
    assert ok


# --------------------------------------------------------------------------
# 7 to 10. trained toy models
# --------------------------------------------------------------------------

# the default command-line run profile
DESK_MODEL = RunConfig().model
DESK_TRAIN = RunConfig().train
DESK_DATA = dict(n_clips=RunConfig().data.n_clips, seed=RunConfig().data.seed)
HELDOUT_SEED = 99
EVAL_SECONDS = 4
N_EVAL = 24
EVAL_GUIDANCE = 1.0


def _cache_key(train_cfg: TrainConfig) -> str:
    import foleyflow
    h = hashlib.sha256(repr((DESK_MODEL, train_cfg, DESK_DATA)).encode())
    # only code that shapes the trained weights invalidates the cache
    for name in ("numerics", "model", "training", "synth", "checkpoint"):
        h.update((Path(foleyflow.__file__).parent / f"{name}.py").read_bytes())
    return h.hexdigest()[:16]


def _trained(kind: str, train_cfg: TrainConfig, records) -> tuple[VelocityNet, float]:
    ckpt = CACHE / f"{kind}-{_cache_key(train_cfg)}.ckpt"
    seconds_file = ckpt.with_suffix(".seconds")
    if not ckpt.is_file():
        CACHE.mkdir(parents=True, exist_ok=True)
        start = time.time()
        tmp = ckpt.with_suffix(".partial")
        train_loop(train_cfg, records, new_state(DESK_MODEL, train_cfg), ckpt_path=tmp)
        seconds_file.write_text(f"{time.time() - start:.1f}\n")
        tmp.replace(ckpt)
    model, _ = load_model(ckpt)
    model.eval()
    return model, float(seconds_file.read_text())


@pytest.fixture(scope="session")
def desk_models(tmp_path_factory):
    data = tmp_path_factory.mktemp("desk") / "data"
    records = write_dataset(data, DESK_DATA["n_clips"], DESK_DATA["seed"], RunConfig().data.scene_config())
    shortcut, t_sc = _trained("shortcut", DESK_TRAIN, records)
    ablation, t_fm = _trained("fm", dataclasses.replace(DESK_TRAIN, consistency_ratio=0.0), records)
    return {"shortcut": shortcut, "fm": ablation, "train_seconds": t_sc + t_fm}


def heldout(seconds: float, n: int, seed: int = HELDOUT_SEED):
    rng = make_rng(seed)
    return [build_clip(f"h{i}", int(s), SceneConfig(duration_range=(seconds, seconds)))
            for i, s in enumerate(rng.integers(0, 2**31, n))]


def bundle_of(records, length: int) -> ConditioningBundle:
    conds = [r.cond.slice_time(0.0, length / LATENT_RATE) for r in records]
    return ConditioningBundle.from_arrays([c.semantic for c in conds], [c.sync for c in conds],
                                          [c.text for c in conds])


def per_clip_swsd(records, clips, lo: int, hi: int) -> np.ndarray:
    return np.array([swsd(decode_to_waveform(r.latents[lo:hi]), decode_to_waveform(c[lo:hi]), rng=make_rng([1, i]))
                     for i, (r, c) in enumerate(zip(records, clips))])


@pytest.fixture(scope="session")
def step_curves(desk_models):
    start = time.time()
    records = heldout(EVAL_SECONDS, N_EVAL)
    length = EVAL_SECONDS * LATENT_RATE
    cond = bundle_of(records, length)
    curves = {}
    for kind, shortcut in (("shortcut", True), ("fm", False)):
        for n_steps in (8, 32):
            cfg = SamplerConfig(n_steps=n_steps, guidance_w=EVAL_GUIDANCE, shortcut=shortcut)
            with torch.no_grad():
                clips = sample_batch(desk_models[kind], cond, length, None, cfg, make_rng(5)).numpy()
            curves[kind, n_steps] = per_clip_swsd(records, clips, 0, length)
    curves["eval_seconds"] = time.time() - start
    return curves


def test_criterion_07_few_step_fidelity(desk_models, step_curves):
    def degradation(kind):
        s8, s32 = step_curves[kind, 8], step_curves[kind, 32]
        diff = s8 - s32
        return diff.mean() / s32.mean(), diff.std(ddof=1) / math.sqrt(diff.size) / s32.mean()

    deg_sc, _ = degradation("shortcut")
    deg_fm, se_fm = degradation("fm")
    minutes = (desk_models["train_seconds"] + step_curves["eval_seconds"]) / 60
    # the ablation must lose at least twice as much, and by more than its own seed noise
    ok = deg_sc <= 0.25 and deg_fm >= 2 * max(deg_sc, 0.0) and deg_fm > 2 * se_fm and minutes < 30
    record(7, ok, f"8-vs-32-step degradation shortcut {deg_sc:+.3f}, flow-matching ablation {deg_fm:+.3f} "
                  f"(standard error {se_fm:.3f}); swsd32 {step_curves['shortcut', 32].mean():.5f}; "
                  f"{minutes:.1f} min")
    assert ok


def test_criterion_08_shortcut_matches_flow_matching(step_curves):
    sc, fm = step_curves["shortcut", 32].mean(), step_curves["fm", 32].mean()
    gap = abs(sc - fm) / fm
    ok = gap < 0.15
    record(8, ok, f"32-step swsd shortcut {sc:.5f}, flow matching {fm:.5f}, relative gap {gap:.3f}")
    assert ok


def test_criterion_09_long_form_stability(desk_models):
    model = desk_models["shortcut"]
    cfg = SamplerConfig(n_steps=8, guidance_w=EVAL_GUIDANCE)
    short, long, seams_out, seams_rest = [], [], [], []
    for i, rec in enumerate(heldout(30.0, 16, seed=77)):
        events = [e.time_s for e in rec.scene.events]
        with torch.no_grad():
            single = shortcut_sample(model, GenerationRequest(rec.cond.slice_time(0.0, 10.0), 430), cfg,
                                     make_rng([3, i]))
            chained = long_form_generate(model, rec.cond, 30.0, cfg, make_rng([4, i]))
            restitched = restitch_generate(model, rec.cond, 30.0, cfg, make_rng([4, i]))
        borders = chunk_borders(chained.shape[0])
        short.append(onset_desync([t for t in events if t < 10.0], single))
        long.append(onset_desync(events, chained))
        seams_out.append(seam_jump(chained, borders))
        seams_rest.append(seam_jump(restitched, borders))
    d10 = np.mean([v for v in short if v is not None])
    d30 = np.mean([v for v in long if v is not None])
    seam_ratio = np.mean(seams_rest) / np.mean(seams_out)
    ok = d30 <= 1.5 * d10 and seam_ratio >= 2.0
    record(9, ok, f"desync 10 s single chunk {d10:.3f} s, 30 s outpainted {d30:.3f} s (ratio {d30 / d10:.2f}); "
                  f"seam jump restitched/outpainted {np.mean(seams_rest):.2f}/{np.mean(seams_out):.2f} "
                  f"(ratio {seam_ratio:.2f})")
    assert ok


def test_criterion_10_reference_length_trend(desk_models):
    model = desk_models["shortcut"]
    records = heldout(EVAL_SECONDS, N_EVAL, seed=HELDOUT_SEED + 1)
    length = EVAL_SECONDS * LATENT_RATE
    cond = bundle_of(records, length)
    cfg = SamplerConfig(n_steps=8, guidance_w=EVAL_GUIDANCE)
    # every reference length is scored on the same section, outside even the longest reference
    lo = 2 * LATENT_RATE
    scores = []
    for seconds in (0.0, 0.5, 1.0, 2.0):
        n = int(round(seconds * LATENT_RATE))
        refs = [ReferenceAudio(torch.as_tensor(r.latents[:n]), 0) if n else None for r in records]
        with torch.no_grad():
            clips = sample_batch(model, cond, length, refs, cfg, make_rng(5)).numpy()
        scores.append(per_clip_swsd(records, clips, lo, length).mean())
    ok = all(b <= 1.10 * a for a, b in zip(scores, scores[1:]))
    record(10, ok, "swsd after 2 s for reference 0/0.5/1/2 s: " + " ".join(f"{s:.5f}" for s in scores))
    assert ok
