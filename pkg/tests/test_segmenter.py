import numpy as np
import pytest
import torch

from gradcheck import seg_grad_probe_errors
from sfvd.segmenter import (SegmenterModel, SegTrainConfig, augmentation_experiment, mask_log_likelihood,
                            predict_masks, segment, seg_loss, train_segmenter, write_augmentation_csv)
from sfvd.synth import FrameSet, SceneConfig, make_fvideo_set

CFG = SceneConfig(size=16, n_frames=4)
SMALL = dict(widths=(8, 8, 8), batch_size=4)


def test_segment_shapes_and_range():
    psi = SegmenterModel(widths=(8, 8, 8))
    p = segment(psi, np.zeros((16, 16), np.float32))
    assert p.shape == (16, 16) and np.all((p > 0) & (p < 1))
    assert segment(psi, torch.zeros(3, 1, 16, 16)).shape == (3, 1, 16, 16)
    with pytest.raises(ValueError):
        segment(psi, np.zeros((14, 16), np.float32))


def test_translation_equivariance_by_multiples_of_four():
    psi = SegmenterModel(widths=(8, 8, 8), seed=1).double()
    x = torch.randn(1, 1, 16, 16, dtype=torch.float64)
    for dy, dx in [(4, 0), (0, 8), (12, 4)]:
        shifted = segment(psi, torch.roll(x, (dy, dx), (-2, -1)))
        assert torch.allclose(shifted, torch.roll(segment(psi, x), (dy, dx), (-2, -1)), atol=1e-12)


def test_mask_log_likelihood_is_negative_and_additive():
    psi = SegmenterModel(widths=(8, 8, 8))
    x = torch.randn(2, 1, 8, 8)
    m = (torch.rand(2, 1, 8, 8) > 0.5).float()
    ll = mask_log_likelihood(psi, x, m)
    assert ll.shape == (2,) and torch.all(ll < 0)
    assert torch.allclose(ll[1], mask_log_likelihood(psi, x[1:], m[1:])[0])


def test_seg_gradient_probes():
    errs = np.array(seg_grad_probe_errors(n_probes=20, seed=2))
    assert (errs < 1e-2).mean() >= 0.95


def test_seg_loss_perfect_prediction_is_small():
    target = torch.zeros(1, 1, 8, 8)
    target[..., 3, :] = 1
    good = seg_loss((target * 2 - 1) * 20, target)
    bad = seg_loss(-(target * 2 - 1) * 20, target)
    assert good.item() < 1e-6 and bad.item() > 1


def test_training_counts_noise_augmentation():
    data = FrameSet.from_videos(make_fvideo_set(2, CFG, seed=0))
    psi, log = train_segmenter(data, SegTrainConfig(steps=10, **SMALL), noise_augment=True)
    assert psi.steps_trained == 10 and psi.noise_trained
    assert log.counters["noised"] + log.counters["clean"] == 40 and log.counters["noised"] > 0
    _, plain = train_segmenter(data, SegTrainConfig(steps=3, **SMALL))
    assert plain.counters == {"clean": 12}


def test_training_ignores_unannotated_frames():
    data = FrameSet.from_videos(make_fvideo_set(2, CFG, seed=0))
    data.annotated[:] = False
    with pytest.raises(ValueError):
        train_segmenter(data, SegTrainConfig(steps=1, **SMALL))


def test_validation_keeps_best_parameters():
    vids = make_fvideo_set(3, CFG, seed=0)
    psi, log = train_segmenter(FrameSet.from_videos(vids[:2]), SegTrainConfig(steps=6, eval_every=2, **SMALL),
                               val=FrameSet.from_videos(vids[2:]))
    assert [s for s, _ in log.val] == [1, 3, 5]
    best = max(score for _, score in log.val)
    from sfvd.metrics import dice
    got = np.mean([dice(p, g) for p, g in zip(predict_masks(psi, vids[2].frames), vids[2].masks)])
    assert got == pytest.approx(best)


def test_augmentation_experiment_bookkeeping(tmp_path):
    vids = make_fvideo_set(6, CFG, seed=0)
    splits = {"train": vids[:3], "val": vids[3:4], "test": vids[4:]}
    reports = augmentation_experiment(splits, vids[:2], SegTrainConfig(steps=3, **SMALL), seeds=(0, 1))
    assert [r.seed for r in reports] == [0, 1]
    assert len(reports[0].baseline_videos) == 2
    write_augmentation_csv(tmp_path / "a.csv", reports)
    assert len(open(tmp_path / "a.csv").read().strip().splitlines()) == 5
    with pytest.raises(ValueError):
        augmentation_experiment({"train": vids[:3], "val": [], "test": vids[2:]}, vids[:1],
                                SegTrainConfig(steps=1, **SMALL), seeds=(0,))
