"""Acceptance suite: one test per criterion, with a PASS/FAIL summary line each.

Trained models are shared through session fixtures. Set
``SFVD_ACCEPTANCE_CACHE`` to a directory to keep checkpoints between runs;
by default everything is trained from scratch in a temporary directory.
"""
import dataclasses
import hashlib
import json
import os
import time

import numpy as np
import pytest
import torch

from gradcheck import denoiser_probe_errors, seg_grad_probe_errors
from oracles import brute_dice, brute_directed, schedule_mp
from sfvd import io, metrics
from sfvd.ablation import ablation_grid
from sfvd.denoiser import SCENE, ConditionSet, DenoiserModel, TrainConfig, predict, train_motion, train_scene
from sfvd.guidance import combine_fc, combine_motion, combine_scene
from sfvd.sampler import (PlanStep, VideoGuidance, generate_frame, generate_videos, subdivision_order)
from sfvd.schedule import build_schedule, forward_sample, reverse_variance
from sfvd.segmenter import (SegmenterModel, SegTrainConfig, augmentation_experiment, mask_log_likelihood,
                            predict_masks, segment, train_segmenter)
from sfvd.synth import FrameSet, SceneConfig, consecutive_mse, make_fvideo_set

N_TRAIN, N_VAL, N_TEST = 40, 10, 20
# denoisers used for synthesis; the 2000-step sanity check uses the plain defaults
PIPELINE_TRAIN = dict(steps=2000)
GUIDE_TRAIN = dict(steps=2000)
SEG_EVAL = SegTrainConfig(steps=2000, eval_every=200)
AUG_SEEDS = (0, 1, 2)
TIMINGS = {}


def detail(request, text):
    request.node.user_properties.append(("detail", text))


# -- shared data and models ---------------------------------------------------------------

@pytest.fixture(scope="session")
def cache_dir(tmp_path_factory):
    d = os.environ.get("SFVD_ACCEPTANCE_CACHE")
    if d:
        os.makedirs(d, exist_ok=True)
        return d
    return str(tmp_path_factory.mktemp("acceptance"))


@pytest.fixture(scope="session")
def corpus():
    videos = make_fvideo_set(N_TRAIN + N_VAL + N_TEST, SceneConfig(), seed=2024)
    return {"train": videos[:N_TRAIN], "val": videos[N_TRAIN:N_TRAIN + N_VAL], "test": videos[N_TRAIN + N_VAL:]}


def _cached(cache_dir, name, spec, train):
    """Train once per (name, spec); the log's loss ratio travels in the checkpoint."""
    key = hashlib.sha256(json.dumps(spec, sort_keys=True).encode()).hexdigest()[:12]
    path = os.path.join(cache_dir, f"{name}-{key}.ckpt")
    if os.path.exists(path):
        model = io.read_ckpt(path)
        return model, model.ckpt_header["extra"]
    t0 = time.perf_counter()
    model, log = train()
    extra = {"ratio": log.smoothed_ratio(), "seconds": time.perf_counter() - t0}
    io.write_ckpt(path, model, extra)
    return model, extra


@pytest.fixture(scope="session")
def trainer(cache_dir, corpus):
    frames = FrameSet.from_videos(corpus["train"])

    def get(role, seed, **overrides):
        # keyed by the resolved config, so equal trainings share one checkpoint
        if role == "scene":
            cfg = TrainConfig(seed=seed, **overrides)
            fn = lambda: train_scene(frames, cfg)
        elif role == "motion":
            cfg = TrainConfig(seed=seed, **overrides)
            fn = lambda: train_motion(corpus["train"], cfg)
        else:
            noise = overrides.pop("noise_augment", False)
            cfg = SegTrainConfig(seed=seed, **overrides)
            fn = lambda: train_segmenter(frames, cfg, noise_augment=noise)
            role = "seg-noised" if noise else "seg"
        spec = {"role": role, **dataclasses.asdict(cfg)}
        return _cached(cache_dir, f"{role}-s{seed}", spec, fn)

    return get


@pytest.fixture(scope="session")
def pipeline(trainer):
    t0 = time.perf_counter()
    scene, _ = trainer("scene", 0, **PIPELINE_TRAIN)
    motion, _ = trainer("motion", 0, **PIPELINE_TRAIN)
    guide, _ = trainer("seg", 0, noise_augment=True, **GUIDE_TRAIN)
    oracle, _ = trainer("seg", 100)
    TIMINGS["pipeline models"] = time.perf_counter() - t0
    return {"scene": scene, "motion": motion, "guide": guide, "oracle": oracle}


@pytest.fixture(scope="session")
def synthesized(pipeline, corpus):
    t0 = time.perf_counter()
    masks = [v.masks for v in corpus["train"]]
    vids = generate_videos(masks, pipeline["scene"], pipeline["motion"], pipeline["guide"], VideoGuidance(),
                           seeds=list(range(len(masks))))
    TIMINGS["synthesis"] = time.perf_counter() - t0
    return vids


# -- criteria -----------------------------------------------------------------------------

@pytest.mark.criterion(1, "guidance algebra identities")
def test_c01_guidance_algebra(request):
    t0 = time.perf_counter()
    g = torch.Generator().manual_seed(1)
    for _ in range(1000):
        shape = tuple(torch.randint(1, 9, (3,), generator=g).tolist())
        a, b, c = (torch.randn(shape, generator=g) for _ in range(3))
        w = float(torch.randn((), generator=g) * 3)
        for combine in (combine_scene, combine_motion):
            assert torch.equal(combine(a, a, w), a)
            assert torch.equal(combine(a, b, 0.0), a)
            assert torch.equal(combine(a, b, 1.0), b)
        assert torch.equal(combine_fc(a, a, a, w), a)
        assert torch.equal(combine_fc(a, b, c, 0.0), a)
        assert torch.equal(combine_fc(a, b, c, w), combine_fc(a, c, b, w))
    elapsed = time.perf_counter() - t0
    detail(request, f"1000 random tensors, exact; {elapsed:.2f} s")
    assert elapsed < 1.0


@pytest.mark.criterion(2, "schedule math vs 64-bit oracle")
def test_c02_schedule_oracle(request):
    t0 = time.perf_counter()
    worst = 0.0
    for kind in ("linear", "cosine"):
        for T in (4, 100, 1000):
            s = build_schedule(kind, T)
            ref = schedule_mp(kind, T)
            ones = torch.ones(T, dtype=torch.float64)
            steps = torch.arange(1, T + 1)
            checks = {"alpha_bars": s.alpha_bars, "posterior_variance": s.posterior_variance,
                      "var_v1": reverse_variance(ones, steps, s).numpy(),
                      "var_v0": reverse_variance(0 * ones, steps, s).numpy()}
            # at t = 1 both variance endpoints are beta_1
            expected = {"alpha_bars": ref["alpha_bars"], "posterior_variance": ref["posterior_variance"],
                        "var_v1": [ref["betas"][0]] + ref["posterior_variance"][1:], "var_v0": ref["betas"]}
            for name, got in checks.items():
                for k, (x, y) in enumerate(zip(got, expected[name])):
                    err = abs(float(x) - float(y)) / abs(float(y)) if y != 0 else abs(float(x))
                    worst = max(worst, err)
                    assert err < 1e-10, (kind, T, name, k, err)
    elapsed = time.perf_counter() - t0
    detail(request, f"max rel err {worst:.1e}; {elapsed:.2f} s incl. oracle")
    assert elapsed < 1.0


@pytest.mark.criterion(3, "forward-process Monte-Carlo statistics")
def test_c03_forward_statistics(request):
    t0 = time.perf_counter()
    s = build_schedule("cosine", 1000)
    g = torch.Generator().manual_seed(3)
    n = 100_000
    errs = []
    for t in (10, 300, 600):
        x0 = torch.full((n,), 0.8, dtype=torch.float64)
        x = forward_sample(x0, t, torch.randn(n, generator=g, dtype=torch.float64), s)
        mean_ref = np.sqrt(s.alpha_bars[t - 1]) * 0.8
        var_ref = 1 - s.alpha_bars[t - 1]
        errs += [abs(x.mean().item() - mean_ref) / mean_ref, abs(x.var().item() - var_ref) / var_ref]
    elapsed = time.perf_counter() - t0
    detail(request, f"max rel dev {max(errs):.2%}; {elapsed:.2f} s")
    assert max(errs) < 0.02 and elapsed < 10


@pytest.mark.criterion(4, "gradient checks against central differences")
def test_c04_gradient_checks(request):
    t0 = time.perf_counter()
    den = np.array(denoiser_probe_errors(100, seed=0))
    seg = np.array(seg_grad_probe_errors(100, seed=0))
    elapsed = time.perf_counter() - t0
    fd, fs = (den < 1e-2).mean(), (seg < 1e-2).mean()
    detail(request, f"denoiser {fd:.0%}, seg-grad {fs:.0%} of 100 probes within 1e-2; {elapsed:.1f} s")
    assert fd >= 0.95 and fs >= 0.95 and elapsed < 120


@pytest.mark.criterion(5, "frame plan invariants and N=16 order")
def test_c05_frame_plan(request):
    t0 = time.perf_counter()
    for n in range(1, 65):
        plan = subdivision_order(n).validate()
        assert sorted(plan.order) == list(range(n))
        done = set()
        for step in plan.steps:
            assert all(r in done for r, _ in step.refs)
            if len(step.refs) == 2:
                (a, da), (b, db) = step.refs
                assert step.target == (a + b) // 2 and -db - da in (0, 1)
            done.add(step.target)
    assert subdivision_order(16).order == [0, 15, 7, 3, 11, 1, 5, 9, 13, 2, 4, 6, 8, 10, 12, 14]
    elapsed = time.perf_counter() - t0
    detail(request, f"N=1..64 exhaustive; {elapsed:.3f} s")
    assert elapsed < 1.0


def _leading_frames(pipeline, masks, gamma, seeds, psi):
    """Scene-stage frames for a batch of masks at a fixed segmentation-guidance weight."""
    guidance = VideoGuidance(gamma=gamma)
    sched = pipeline["scene"].schedule.respace(guidance.sample_steps)
    step = PlanStep(0)
    spec = guidance.for_step(step, gamma)
    rngs = [torch.Generator().manual_seed(s) for s in seeds]
    m = torch.as_tensor(np.asarray(masks, np.float32))[:, None]
    return generate_frame(step, m, {}, pipeline["scene"], pipeline["motion"], psi, sched, spec, rngs,
                          [gamma] * len(seeds))


@pytest.mark.criterion(6, "segmentation-guidance mechanism")
def test_c06_guidance_mechanism(request, pipeline, corpus):
    t0 = time.perf_counter()
    masks = np.stack([v.masks[0] for v in corpus["test"][:10]])
    seeds = list(range(10))
    guide = pipeline["guide"]
    off = _leading_frames(pipeline, masks, 0.0, seeds, None)
    on = _leading_frames(pipeline, masks, 0.0, seeds, guide)
    assert torch.equal(off, on)
    medians = []
    m = torch.as_tensor(masks.astype(np.float32))[:, None]
    for gamma in (0.0, 5.0, 10.0, 15.0):
        x = off if gamma == 0 else _leading_frames(pipeline, masks, gamma, seeds, guide)
        with torch.no_grad():
            medians.append(float(mask_log_likelihood(guide, x, m).median()))
    elapsed = time.perf_counter() - t0
    detail(request, "median log p(M|x) at gamma 0/5/10/15: " + ", ".join(f"{v:.1f}" for v in medians)
           + f"; {elapsed:.0f} s (+ shared training)")
    assert all(b >= a for a, b in zip(medians, medians[1:]))
    assert elapsed < 600


@pytest.mark.criterion(7, "training sanity: >=30% smoothed loss reduction")
def test_c07_training_sanity(request, trainer):
    t0 = time.perf_counter()
    ratios = {}
    seconds = 0.0
    for role in ("scene", "motion", "seg"):
        extras = [trainer(role, seed)[1] for seed in (0, 1, 2)]
        ratios[role] = float(np.median([e["ratio"] for e in extras]))
        seconds += sum(e["seconds"] for e in extras)
    elapsed = time.perf_counter() - t0
    detail(request, "median final/initial smoothed loss: " + ", ".join(f"{k} {v:.3f}" for k, v in ratios.items())
           + f"; training time {seconds / 60:.1f} min")
    assert all(r <= 0.7 for r in ratios.values())
    assert seconds < 30 * 60


@pytest.mark.criterion(8, "conditioning fidelity of generated leading frames")
def test_c08_conditioning_fidelity(request, pipeline, synthesized):
    t0 = time.perf_counter()
    oracle = pipeline["oracle"]
    frames = np.stack([v.frames[0] for v in synthesized[:20]])
    masks = np.stack([v.masks[0] for v in synthesized[:20]])
    scores = [metrics.dice(p, m) for p, m in zip(predict_masks(oracle, frames), masks)]
    med = float(np.median(scores))
    elapsed = time.perf_counter() - t0 + TIMINGS.get("synthesis", 0.0)
    detail(request, f"median oracle Dice {med:.3f} over 20 frames; {elapsed / 60:.1f} min incl. synthesis")
    assert med >= 0.5
    assert elapsed < 15 * 60


@pytest.fixture(scope="session")
def augmentation(pipeline, corpus, synthesized):
    t0 = time.perf_counter()
    cache = {}
    reports = augmentation_experiment(corpus, synthesized, SEG_EVAL, AUG_SEEDS, baseline_cache=cache)
    TIMINGS["augmentation"] = time.perf_counter() - t0
    return reports, cache


@pytest.mark.criterion(9, "augmentation improves held-out Dice (directional)")
def test_c09_augmentation(request, augmentation):
    reports, _ = augmentation
    gains = [r.dice_gain for r in reports]
    base = [r.baseline.dice for r in reports]
    total = sum(TIMINGS.get(k, 0.0) for k in ("pipeline models", "synthesis", "augmentation"))
    detail(request, "Dice baseline " + "/".join(f"{b:.3f}" for b in base) + ", gain "
           + "/".join(f"{g:+.3f}" for g in gains) + f", median {np.median(gains):+.3f}; {total / 60:.0f} min")
    assert np.median(gains) > 0
    assert total < 2 * 3600


@pytest.mark.criterion(10, "FCxSG ablation grid and background jitter")
def test_c10_ablation(request, pipeline, corpus, synthesized, augmentation):
    t0 = time.perf_counter()
    reports, cache = augmentation
    masks = [v.masks for v in corpus["train"]]
    rows = ablation_grid(corpus, masks, pipeline["scene"], pipeline["motion"], pipeline["guide"], SEG_EVAL,
                         AUG_SEEDS, VideoGuidance(), list(range(len(masks))),
                         cells=((False, False), (False, True), (True, False)), baseline_cache=cache)
    full = rows[0].__class__(True, True, metrics.SegMetricsReport.mean([r.augmented for r in reports]),
                             metrics.SegMetricsReport.mean([r.baseline for r in reports]),
                             float(np.mean([consecutive_mse(v.frames) for v in synthesized])))
    rows.append(full)
    for r in rows:
        vals = r.augmented.row()
        assert len(vals) == 6 and all(np.isfinite(vals))
    by = {(r.fc, r.sg): r for r in rows}
    elapsed = time.perf_counter() - t0
    detail(request, "; ".join(f"{r.tag} dice {r.augmented.dice:.3f} mse {r.consecutive_mse:.4f}" for r in rows)
           + f"; {elapsed / 60:.0f} min")
    for sg in (False, True):
        assert by[(False, sg)].consecutive_mse > by[(True, sg)].consecutive_mse
    total = elapsed + sum(TIMINGS.get(k, 0.0) for k in ("pipeline models", "synthesis", "augmentation"))
    assert total < 2 * 3600


@pytest.mark.criterion(11, "metrics vs brute-force oracles")
def test_c11_metrics(request):
    t0 = time.perf_counter()
    rng = np.random.default_rng(11)
    for _ in range(200):
        h, w = rng.integers(1, 65, size=2)
        a = rng.random((h, w)) < rng.uniform(0.01, 0.5)
        b = rng.random((h, w)) < rng.uniform(0.01, 0.5)
        a.flat[rng.integers(a.size)] = True
        b.flat[rng.integers(b.size)] = True
        assert metrics.dice(a, b) == brute_dice(a, b)
        g2r, r2g = brute_directed(b, a), brute_directed(a, b)
        assert metrics.directed_errors(a, b) == (g2r.mean(), r2g.mean())
        hd = metrics.hausdorff(a, b)
        assert hd == max(g2r.max(), r2g.max()) and hd >= max(g2r.mean(), r2g.mean())
    samples = rng.normal(size=(6, 8, 8))
    assert metrics.diversity_score(np.stack([samples[0]] * 4)).mean == 0.0
    assert metrics.overfitting_score(samples[:3], samples).mean == 0.0
    elapsed = time.perf_counter() - t0
    detail(request, f"200 pairs exact; {elapsed:.1f} s")
    assert elapsed < 30


@pytest.mark.criterion(12, "persistence round trips and error codes")
def test_c12_persistence(request, tmp_path):
    t0 = time.perf_counter()
    video = make_fvideo_set(1, SceneConfig(), seed=12)[0]
    io.write_fvd(tmp_path / "v.fvd", video)
    back = io.read_fvd(tmp_path / "v.fvd")
    assert back.frames.tobytes() == video.frames.tobytes() and back.masks.tobytes() == video.masks.tobytes()
    data = (tmp_path / "v.fvd").read_bytes()
    codes = {}
    for name, bad in {"magic": b"XXXX" + data[4:], "version": data[:4] + b"\x07" + data[5:],
                      "size": data[:-3], "crc": data[:40] + bytes([data[40] ^ 1]) + data[41:]}.items():
        try:
            io.decode_fvd(bad)
        except io.FormatError as e:
            codes[name] = e.code
    assert codes == {"magic": 11, "version": 12, "size": 13, "crc": 14}

    sched = build_schedule("cosine", 1000)
    scene = DenoiserModel(SCENE, sched, seed=5)
    psi = SegmenterModel(seed=6)
    psi.steps_trained = 1
    with torch.no_grad():
        for p in list(scene.parameters()) + list(psi.parameters()):
            p.add_(0.01 * torch.randn_like(p))
    x = torch.randn(2, 1, 32, 32, generator=torch.Generator().manual_seed(0))
    mask = (x > 1).float()
    for model in (scene, psi):
        io.write_ckpt(tmp_path / "m.ckpt", model.eval())
        re = io.read_ckpt(tmp_path / "m.ckpt")
        assert io.encode_ckpt(re) == io.encode_ckpt(model)
        if model is scene:
            a = predict(model, x, 500, ConditionSet(mask=mask))
            b = predict(re, x, 500, ConditionSet(mask=mask))
            assert all(torch.equal(u, v) for u, v in zip(a, b))
        else:
            assert torch.equal(segment(model, x), segment(re, x))
    raw = (tmp_path / "m.ckpt").read_bytes()
    try:
        io.decode_ckpt(raw[:-5] + bytes([raw[-5] ^ 1]) + raw[-4:])
        raise AssertionError("corrupted checkpoint was accepted")
    except io.ChecksumError as e:
        assert e.code == 14
    elapsed = time.perf_counter() - t0
    detail(request, f"bitwise round trips, codes 11-14; {elapsed:.2f} s")
    assert elapsed < 5
