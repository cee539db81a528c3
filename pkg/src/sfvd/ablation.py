"""Frame-consistency x segmentation-guidance grid.

Each cell synthesizes the same mask sequences with the same seeds, either in
subdivision or chronological order (FC on/off) and with or without the
segmentation-guided mean shift (SG on/off), then scores the synthesized
videos by how much they help a downstream segmenter.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, replace

import numpy as np

from . import metrics
from .sampler import CHRONOLOGICAL, SUBDIVISION, VideoGuidance, generate_videos
from .segmenter import SegTrainConfig, augmentation_experiment
from .synth import consecutive_mse

CELLS = ((False, False), (False, True), (True, False), (True, True))


@dataclass
class AblationRow:
    fc: bool
    sg: bool
    augmented: metrics.SegMetricsReport
    baseline: metrics.SegMetricsReport
    consecutive_mse: float
    videos: list = None

    @property
    def tag(self):
        return f"FC{'+' if self.fc else '-'} SG{'+' if self.sg else '-'}"


def synthesize_cell(mask_seqs, scene, motion, psi, fc, sg, guidance: VideoGuidance = None, video_seeds=None):
    guidance = guidance or VideoGuidance()
    if not sg:
        guidance = replace(guidance, gamma=0.0)
    video_seeds = list(range(len(mask_seqs))) if video_seeds is None else list(video_seeds)
    return generate_videos(mask_seqs, scene, motion, psi if sg else None, guidance,
                           SUBDIVISION if fc else CHRONOLOGICAL, video_seeds)


def ablation_grid(splits, mask_seqs, scene, motion, psi, seg_config: SegTrainConfig = None, seeds=(0, 1, 2),
                  guidance: VideoGuidance = None, video_seeds=None, cells=CELLS, baseline_cache=None, progress=None):
    """One row per (FC, SG) cell with the six segmentation metrics of the augmented segmenter."""
    cache = {} if baseline_cache is None else baseline_cache
    rows = []
    for fc, sg in cells:
        vids = synthesize_cell(mask_seqs, scene, motion, psi, fc, sg, guidance, video_seeds)
        reports = augmentation_experiment(splits, vids, seg_config, seeds, baseline_cache=cache)
        row = AblationRow(fc, sg, metrics.SegMetricsReport.mean([r.augmented for r in reports]),
                          metrics.SegMetricsReport.mean([r.baseline for r in reports]),
                          float(np.mean([consecutive_mse(v.frames) for v in vids])), vids)
        rows.append(row)
        if progress:
            progress(row)
    return rows


def write_ablation_csv(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["fc", "sg", *metrics.SEG_COLUMNS, "consecutive_mse"])
        for r in rows:
            w.writerow([int(r.fc), int(r.sg), *[f"{v:.6g}" for v in r.augmented.row()], f"{r.consecutive_mse:.6g}"])
