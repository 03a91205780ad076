import json
import math

import numpy as np
import pytest

from carfit3d.geometry import Box3, PointCloud, iou_bev
from carfit3d.kitti_io import record_to_box
from carfit3d.refine_net.network import NetConfig, RefineNet
from carfit3d.refine_net.training import (
    EmptyDataset,
    NoPositives,
    SampleSet,
    TrainConfig,
    assign_labels,
    background_boxes,
    build_samples,
    fit_target_std,
    jitter_boxes,
    make_samples,
    train,
)
from carfit3d.synth import make_scene, random_scene_spec, synthetic_calibration

GT = Box3((10.0, 0.0, -0.9), 1.5, 4.0, 2.0, 0.0)


@pytest.fixture(scope="module")
def samples():
    calib = synthetic_calibration()
    scenes = []
    for s in range(6):
        cloud, labels = make_scene(random_scene_spec(500 + s))
        scenes.append((cloud, [record_to_box(r, calib) for r in labels]))
    return build_samples(scenes, 1, np.random.default_rng(0), jitter_per_gt=8, background_per_frame=4)


def test_iou_point_six_labels():
    # shifting a 4 m box by 1 m along its length leaves 3/5 BEV IoU
    b = GT.replace(center=(11.0, 0.0, -0.9))
    assert iou_bev(b, GT) == pytest.approx(0.6, abs=1e-12)
    assert assign_labels([b], [GT], 1)[0].tolist() == [1]
    assert assign_labels([b], [GT], 2)[0].tolist() == [0]


def test_no_gts():
    labels, matched = assign_labels([GT], [], 1)
    assert labels.tolist() == [0] and matched.tolist() == [-1]


def test_make_samples_targets_only_for_positives():
    cloud = PointCloud(np.array([[10.0, 0.0, -0.9], [10.5, 0.2, -0.5]]))
    far = GT.replace(center=(30.0, 5.0, -0.9))
    s = make_samples(cloud, [GT, far], [GT], 1)
    assert s.label_array().tolist() == [1, 0]
    np.testing.assert_allclose(s.targets[0], 0.0, atol=1e-12)
    assert np.isnan(s.targets[1]).all()
    assert s.dense([0]).sum() == 2


def test_jitter_and_background(rng):
    boxes = jitter_boxes([GT], 10, rng)
    assert len(boxes) == 10
    cloud = PointCloud(rng.uniform(-30, 30, (500, 3)))
    bg = background_boxes(cloud, [GT], 6, rng)
    assert len(bg) == 6 and all(iou_bev(b, GT) == 0 for b in bg)


def test_samples_are_mixed(samples):
    lab = samples.label_array()
    assert 0 < lab.sum() < len(lab)
    std = fit_target_std(samples.target_array()[lab == 1])
    assert len(std) == 7 and min(std) >= 1e-3


def test_empty():
    with pytest.raises(EmptyDataset):
        train(SampleSet(), TrainConfig(iterations=1))


def test_no_positives():
    s = SampleSet()
    s.add(np.array([0], np.int32), 0)
    with pytest.raises(NoPositives):
        train(s, TrainConfig(iterations=1, batch_size=2, widths=(4, 8), fc_hidden=8))


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(stage=3)
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=0.0)
    with pytest.raises(ValueError):
        TrainConfig(positive_fraction=1.5)


def test_deterministic_training(samples):
    cfg = TrainConfig(iterations=4, batch_size=8, widths=(4, 8), fc_hidden=8, seed=7, log_every=1)
    logs = []
    a = train(samples, cfg, logs.append)
    b = train(samples, cfg)
    assert a.to_bytes() == b.to_bytes()
    assert len(logs) == 4 and set(json.loads(logs[0])) == {"iter", "loss", "cls", "reg"}


def test_positive_fraction(samples, monkeypatch):
    seen = []
    orig = RefineNet.loss_and_grads

    def spy(self, x, labels, *a, **k):
        seen.append(np.asarray(labels).copy())
        return orig(self, x, labels, *a, **k)

    monkeypatch.setattr(RefineNet, "loss_and_grads", spy)
    train(samples, TrainConfig(iterations=3, batch_size=10, widths=(4, 8), fc_hidden=8))
    assert all(l.sum() == 5 for l in seen)


def test_loss_halves_in_200_steps(samples):
    """200 plain SGD steps on one fixed 64-sample batch at least halve the stage-1 loss."""
    lab = samples.label_array()
    pos, neg = np.flatnonzero(lab == 1), np.flatnonzero(lab == 0)
    idx = np.concatenate([pos[:32], neg[:32]])
    assert len(idx) == 64
    x, y = samples.dense(idx), lab[idx]
    t = np.nan_to_num(samples.target_array()[idx])
    net = RefineNet(NetConfig(1, (8, 16), 32), seed=0, target_std=fit_target_std(samples.target_array()[pos]))
    first = None
    for _ in range(200):
        total, _, grads, _ = net.loss_and_grads(x, y, t)
        first = total if first is None else first
        for k, g in grads.items():
            net.params[k] -= np.float32(0.01) * g
    assert total <= 0.5 * first, (first, total)
