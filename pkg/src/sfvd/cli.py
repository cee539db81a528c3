"""Command-line entry point: ``sfvd <command> [options]``.

Every option can also come from a JSON file given with ``--config``; an
explicit flag beats the file, which beats the built-in default. The
effective configuration is printed as JSON before any work starts.

Exit codes: 0 success, 1 unexpected failure, 2 invalid arguments or
parameters, 3 missing input, 10-15 file format errors.
"""
from __future__ import annotations

import argparse
import hashlib
import io as _io
import json
import os
import sys
from pathlib import Path

import numpy as np

EXIT_USAGE = 2
EXIT_MISSING = 3

# name -> (default, type, help); a None default marks a required option
_COMMON = {"seed": (0, int, "random seed")}
COMMANDS = {
    "gen-data": {
        "kind": ("fvideo", str, "fvideo (fully annotated) or pimage (partially annotated)"),
        "count": (40, int, "number of videos"),
        "fraction": (4000 / 14000, float, "annotated fraction for pimage"),
        "frames": (8, int, "frames per video"),
        "size": (32, int, "frame size in pixels"),
        "out": (None, str, "output directory for .fvd files"),
    },
    "train-scene": {
        "data": (None, str, "directory of .fvd files"),
        "steps": (2000, int, "optimizer steps"),
        "lr": (3e-4, float, "learning rate"),
        "ema_decay": (0.995, float, "weight averaging decay, 0 disables"),
        "batch_size": (16, int, "batch size"),
        "out": (None, str, "checkpoint path"),
    },
    "train-motion": {
        "data": (None, str, "directory of fully annotated .fvd files"),
        "steps": (2000, int, "optimizer steps"),
        "lr": (3e-4, float, "learning rate"),
        "ema_decay": (0.995, float, "weight averaging decay, 0 disables"),
        "batch_size": (16, int, "batch size"),
        "p_drop": (0.2, float, "probability of dropping the reference frame"),
        "out": (None, str, "checkpoint path"),
    },
    "train-seg": {
        "data": (None, str, "directory of .fvd files (annotated frames are used)"),
        "steps": (2000, int, "optimizer steps"),
        "lr": (1e-3, float, "learning rate"),
        "batch_size": (16, int, "batch size"),
        "noise_augment": (False, bool, "train on diffusion-noised inputs (needed for guidance)"),
        "out": (None, str, "checkpoint path"),
    },
    "synthesize": {
        "scene": (None, str, "scene model checkpoint"),
        "motion": (None, str, "motion model checkpoint"),
        "guide": ("", str, "noise-trained segmenter checkpoint (empty: no segmentation guidance)"),
        "masks": (None, str, ".fvd file or directory supplying mask sequences"),
        "omega_scene": (0.7, float, "scene guidance weight"),
        "omega_concluding": (-2.5, float, "concluding-frame guidance weight"),
        "omega_intermediate": (-1.5, float, "intermediate-frame guidance weight"),
        "gamma_max": (15.0, float, "segmentation guidance drawn uniformly from [0, gamma_max]"),
        "mode": ("subdivision", str, "subdivision or chronological"),
        "sample_steps": (100, int, "reverse steps"),
        "out": (None, str, "output directory"),
    },
    "augment-eval": {
        "real": (None, str, "directory of real .fvd videos"),
        "synthetic": (None, str, "directory of synthesized .fvd videos"),
        "seeds": ("0,1,2", str, "comma-separated training seeds"),
        "steps": (2000, int, "segmenter steps"),
        "out": (None, str, "output directory for CSV reports"),
    },
    "metrics": {
        "pred": (None, str, ".fvd file or directory whose masks are predictions"),
        "gt": (None, str, ".fvd file or directory with ground-truth masks (matched by file name)"),
        "tolerance": (2.0, float, "distance tolerance for sensitivity and precision, px"),
        "out": (None, str, "CSV report path"),
    },
    "ablate": {
        "scene": (None, str, "scene model checkpoint"),
        "motion": (None, str, "motion model checkpoint"),
        "guide": (None, str, "noise-trained segmenter checkpoint"),
        "real": (None, str, "directory of real .fvd videos"),
        "seeds": ("0,1,2", str, "comma-separated training seeds"),
        "steps": (2000, int, "segmenter steps"),
        "sample_steps": (100, int, "reverse steps"),
        "out": (None, str, "output directory"),
    },
}


class UsageError(Exception):
    pass


class MissingInput(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser():
    p = _Parser(prog="sfvd", description="Mask-conditioned fluoroscopy-like video synthesis.")
    sub = p.add_subparsers(dest="command", required=True)
    for name, opts in COMMANDS.items():
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="JSON file with option values")
        for key, (default, typ, help_) in {**_COMMON, **opts}.items():
            flag = "--" + key.replace("_", "-")
            shown = f"{help_} (default: {default})" if default is not None else help_
            if typ is bool:
                sp.add_argument(flag, dest=key, action="store_const", const=True, default=None, help=help_)
            else:
                sp.add_argument(flag, dest=key, type=typ, default=None, help=shown)
    return p


def effective_config(command, args):
    spec = {**_COMMON, **COMMANDS[command]}
    cfg = {k: v[0] for k, v in spec.items()}
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise MissingInput(f"config file not found: {path}")
        try:
            from_file = json.loads(path.read_text())
        except ValueError as e:
            raise UsageError(f"config file is not valid JSON: {e}") from None
        unknown = set(from_file) - set(spec)
        if unknown:
            raise UsageError(f"unknown config keys: {', '.join(sorted(unknown))}")
        cfg.update({k: spec[k][1](v) for k, v in from_file.items()})
    cfg.update({k: getattr(args, k) for k in spec if getattr(args, k) is not None})
    missing = [k for k, v in cfg.items() if v is None]
    if missing:
        raise UsageError("missing required options: " + ", ".join("--" + k.replace("_", "-") for k in missing))
    return cfg


# -- helpers ------------------------------------------------------------------------------

def _fvd_paths(path):
    path = Path(path)
    if not path.exists():
        raise MissingInput(f"not found: {path}")
    files = sorted(path.glob("*.fvd")) if path.is_dir() else [path]
    if not files:
        raise MissingInput(f"no .fvd files in {path}")
    return files


def _read_videos(path):
    from . import io

    return [(p, io.read_fvd(p)) for p in _fvd_paths(path)]


def _with_ids(videos, offset=0):
    for i, (_, v) in enumerate(videos):
        v.meta["video_id"] = offset + i
    return [v for _, v in videos]


def _load_ckpt(path):
    from . import io

    if not Path(path).exists():
        raise MissingInput(f"checkpoint not found: {path}")
    return io.read_ckpt(path)


def _seeds(text):
    try:
        return tuple(int(s) for s in str(text).split(",") if s.strip())
    except ValueError:
        raise UsageError(f"seeds must be comma-separated integers, got {text!r}") from None


def _sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _write_json(path, payload):
    from .io import atomic_write

    if "config" in payload:
        # the output location is not part of what was computed
        payload = {**payload, "config": {k: v for k, v in payload["config"].items() if k != "out"}}
    atomic_write(path, (json.dumps(payload, indent=2, sort_keys=True) + "\n").encode())


def contact_sheet(path, frames, masks):
    """PNG with frames on the top row and their masks below."""
    from PIL import Image

    from .io import atomic_write

    frames = np.asarray(frames, dtype=np.float32)
    top = np.concatenate(list(np.clip((frames + 1) * 127.5, 0, 255).round().astype(np.uint8)), axis=1)
    bottom = np.concatenate(list(np.asarray(masks, dtype=np.uint8) * 255), axis=1)
    buf = _io.BytesIO()
    Image.fromarray(np.concatenate([top, bottom], axis=0), mode="L").save(buf, format="PNG")
    atomic_write(path, buf.getvalue())


def _guidance(cfg, gamma_max=None):
    from .sampler import VideoGuidance

    return VideoGuidance(cfg.get("omega_scene", 0.7), cfg.get("omega_concluding", -2.5),
                         cfg.get("omega_intermediate", -1.5),
                         cfg["gamma_max"] if gamma_max is None else gamma_max,
                         sample_steps=cfg["sample_steps"])


def _check_range(cond, message):
    if not cond:
        raise UsageError(message)


# -- commands -----------------------------------------------------------------------------

def cmd_gen_data(cfg):
    from . import io
    from .synth import LabeledVideo, SceneConfig, make_fvideo_set, make_pimage_set

    _check_range(cfg["count"] >= 1, "--count must be >= 1")
    _check_range(cfg["kind"] in ("fvideo", "pimage"), "--kind must be fvideo or pimage")
    scene_cfg = SceneConfig(size=cfg["size"], n_frames=cfg["frames"])
    out = Path(cfg["out"])
    if cfg["kind"] == "fvideo":
        videos = [(v.frames, v.masks, v.annotated) for v in make_fvideo_set(cfg["count"], scene_cfg, cfg["seed"])]
    else:
        fs = make_pimage_set(cfg["count"], cfg["fraction"], scene_cfg, cfg["seed"])
        videos = [(fs.frames[fs.video_ids == i], fs.masks[fs.video_ids == i], fs.annotated[fs.video_ids == i])
                  for i in range(cfg["count"])]
    for i, (f, m, a) in enumerate(videos):
        io.write_fvd(out / f"video_{i:04d}.fvd", LabeledVideo(f, m, a))
    _write_json(out / "provenance.json", {"command": "gen-data", "config": cfg, "scene_config": scene_cfg.to_dict()})
    return f"wrote {len(videos)} videos to {out}"


def _train_denoiser(cfg, role):
    from . import io
    from .denoiser import TrainConfig, train_motion, train_scene
    from .synth import FrameSet

    _check_range(cfg["steps"] >= 1 and cfg["batch_size"] >= 1 and cfg["lr"] > 0, "steps, batch size and lr must be positive")
    _check_range(0.0 <= cfg["ema_decay"] < 1.0, "ema_decay must lie in [0, 1)")
    videos = _with_ids(_read_videos(cfg["data"]))
    tc = TrainConfig(steps=cfg["steps"], batch_size=cfg["batch_size"], lr=cfg["lr"], seed=cfg["seed"],
                     ema_decay=cfg["ema_decay"], **({"p_drop": cfg["p_drop"]} if role == "motion" else {}))
    if role == "scene":
        model, log = train_scene(FrameSet.from_videos(videos), tc)
    else:
        model, log = train_motion(videos, tc)
    io.write_ckpt(cfg["out"], model, extra={"train": cfg, "counters": log.counters})
    log.to_csv(str(cfg["out"]) + ".loss.csv")
    return f"{role} model: smoothed loss ratio {log.smoothed_ratio():.3f}, saved {cfg['out']}"


def cmd_train_seg(cfg):
    from . import io
    from .segmenter import SegTrainConfig, train_segmenter
    from .synth import FrameSet

    _check_range(cfg["steps"] >= 1 and cfg["batch_size"] >= 1 and cfg["lr"] > 0, "steps, batch size and lr must be positive")
    videos = _with_ids(_read_videos(cfg["data"]))
    sc = SegTrainConfig(steps=cfg["steps"], batch_size=cfg["batch_size"], lr=cfg["lr"], seed=cfg["seed"])
    psi, log = train_segmenter(FrameSet.from_videos(videos), sc, noise_augment=bool(cfg["noise_augment"]))
    io.write_ckpt(cfg["out"], psi, extra={"train": cfg, "counters": log.counters})
    log.to_csv(str(cfg["out"]) + ".loss.csv")
    return f"segmenter: smoothed loss ratio {log.smoothed_ratio():.3f}, saved {cfg['out']}"


def cmd_synthesize(cfg):
    from . import io
    from .sampler import CHRONOLOGICAL, SUBDIVISION, generate_videos
    from .synth import LabeledVideo

    _check_range(cfg["gamma_max"] >= 0, "--gamma-max must be >= 0")
    _check_range(cfg["sample_steps"] >= 1, "--sample-steps must be >= 1")
    _check_range(cfg["mode"] in (SUBDIVISION, CHRONOLOGICAL), "--mode must be subdivision or chronological")
    scene, motion = _load_ckpt(cfg["scene"]), _load_ckpt(cfg["motion"])
    psi = _load_ckpt(cfg["guide"]) if cfg["guide"] else None
    sources = _read_videos(cfg["masks"])
    for p, v in sources:
        if not v.annotated.all():
            raise UsageError(f"{p.name}: every frame needs a mask to condition on")
    seeds = [cfg["seed"] + i for i in range(len(sources))]
    gen = generate_videos([v.masks for _, v in sources], scene, motion, psi, _guidance(cfg), cfg["mode"], seeds)
    out = Path(cfg["out"])
    record = []
    for (src, _), g in zip(sources, gen):
        stem = src.stem
        io.write_fvd(out / f"{stem}.fvd", LabeledVideo(g.frames, g.masks, g.annotated))
        contact_sheet(out / f"{stem}.png", g.frames, g.masks)
        record.append({"source": src.name, "seed": g.seed, "gamma": g.gamma, "order": g.order})
    inputs = {k: _sha256(cfg[k]) for k in ("scene", "motion", "guide") if cfg[k]}
    _write_json(out / "provenance.json", {"command": "synthesize", "config": cfg, "inputs": inputs, "videos": record})
    return f"wrote {len(gen)} videos to {out}"


def _splits(videos, seed):
    from .synth import split_indices

    idx = split_indices(len(videos), seed)
    if not idx["train"] or not idx["test"]:
        raise UsageError("need enough real videos for non-empty train and test splits")
    return {k: [videos[i] for i in v] for k, v in idx.items()}


def cmd_augment_eval(cfg):
    from .metrics import SegMetricsReport
    from .segmenter import SegTrainConfig, augmentation_experiment, write_augmentation_csv

    real = _with_ids(_read_videos(cfg["real"]))
    synth = [v for _, v in _read_videos(cfg["synthetic"])]
    reports = augmentation_experiment(_splits(real, cfg["seed"]), synth, SegTrainConfig(steps=cfg["steps"]),
                                      _seeds(cfg["seeds"]))
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    write_augmentation_csv(out / "augmentation.csv", reports)
    gain = float(np.median([r.dice_gain for r in reports]))
    b = SegMetricsReport.mean([r.baseline for r in reports]).dice
    a = SegMetricsReport.mean([r.augmented for r in reports]).dice
    _write_json(out / "provenance.json", {"command": "augment-eval", "config": cfg, "median_dice_gain": gain})
    return f"mean Dice baseline {b:.4f} augmented {a:.4f}; median gain {gain:+.4f}"


def cmd_metrics(cfg):
    from .metrics import video_metrics, write_seg_report

    preds = _read_videos(cfg["pred"])
    gts = {p.name: v for p, v in _read_videos(cfg["gt"])}
    reports = []
    for p, pv in preds:
        if p.name not in gts and len(gts) == 1 and len(preds) == 1:
            gv = next(iter(gts.values()))
        elif p.name in gts:
            gv = gts[p.name]
        else:
            raise MissingInput(f"no ground truth for {p.name}")
        if pv.masks.shape != gv.masks.shape:
            raise UsageError(f"{p.name}: prediction and ground truth shapes differ")
        keep = gv.annotated
        reports.append(video_metrics(pv.masks[keep], gv.masks[keep], cfg["tolerance"]))
    agg = write_seg_report(cfg["out"], reports)
    return "aggregate " + " ".join(f"{k}={v:.4f}" for k, v in zip(("dice", "hd", "g2re", "r2ge", "sens", "prec"), agg.row()))


def cmd_ablate(cfg):
    from .ablation import ablation_grid, write_ablation_csv
    from .segmenter import SegTrainConfig

    real = _with_ids(_read_videos(cfg["real"]))
    splits = _splits(real, cfg["seed"])
    scene, motion, psi = _load_ckpt(cfg["scene"]), _load_ckpt(cfg["motion"]), _load_ckpt(cfg["guide"])

    masks = [v.masks for v in splits["train"]]
    seeds = [cfg["seed"] + i for i in range(len(masks))]
    rows = ablation_grid(splits, masks, scene, motion, psi, SegTrainConfig(steps=cfg["steps"]), _seeds(cfg["seeds"]),
                         _guidance({**cfg, "gamma_max": 15.0}), seeds,
                         progress=lambda r: print(f"{r.tag}: dice {r.augmented.dice:.4f} "
                                                  f"consecutive-mse {r.consecutive_mse:.5f}", flush=True))
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    write_ablation_csv(out / "ablation.csv", rows)
    _write_json(out / "provenance.json", {"command": "ablate", "config": cfg,
                                          "baseline_dice": rows[0].baseline.dice})
    return f"wrote {out / 'ablation.csv'}"


HANDLERS = {
    "gen-data": cmd_gen_data,
    "train-scene": lambda cfg: _train_denoiser(cfg, "scene"),
    "train-motion": lambda cfg: _train_denoiser(cfg, "motion"),
    "train-seg": cmd_train_seg,
    "synthesize": cmd_synthesize,
    "augment-eval": cmd_augment_eval,
    "metrics": cmd_metrics,
    "ablate": cmd_ablate,
}


def _set_threads():
    import torch

    raw = os.environ.get("SFVD_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"SFVD_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise UsageError("SFVD_THREADS must be >= 1")
    torch.set_num_threads(n)


def main(argv=None):
    from .io import FormatError

    try:
        args = build_parser().parse_args(None if argv is None else [os.fspath(a) for a in argv])
        cfg = effective_config(args.command, args)
        print(json.dumps({"command": args.command, **cfg}, sort_keys=True), flush=True)
        _set_threads()
        message = HANDLERS[args.command](cfg)
    except UsageError as e:
        print(f"sfvd: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except MissingInput as e:
        print(f"sfvd: error: {e}", file=sys.stderr)
        return EXIT_MISSING
    except FormatError as e:
        print(f"sfvd: error: {type(e).__name__}: {e}", file=sys.stderr)
        return e.code
    except ValueError as e:
        print(f"sfvd: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as e:  # noqa: BLE001 - last-resort one-line diagnostic
        print(f"sfvd: error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1
    print(message)
    return 0


if __name__ == "__main__":
    sys.exit(main())
