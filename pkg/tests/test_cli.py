import filecmp
import os

import pytest

from carfit3d import kitti_io
from carfit3d.cli import main, synth_dataset
from carfit3d.geometry import Detection
from carfit3d.synth import IMAGE_SIZE


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    synth_dataset(str(root), 5, seed=3)
    return str(root)


@pytest.fixture(scope="module")
def maps_file(tmp_path_factory):
    p = tmp_path_factory.mktemp("maps") / "maps.bin"
    assert main(["build-maps", "--out", str(p), "--points", "60000"]) == 0
    return str(p)


def fit(dataset, out, maps_file, *extra):
    return main(["fit", "--data", dataset, "--out", str(out), "--maps", maps_file, "--oracle-2d",
                 "--stop-after", "fit", *extra])


def test_synth_layout(dataset):
    for sub in ("velodyne", "calib", "label_2", "det2d"):
        assert len(os.listdir(os.path.join(dataset, sub))) == 5
    assert open(os.path.join(dataset, "ImageSets", "all.txt")).read().split() == [f"{i:06d}" for i in range(5)]


def test_synth_is_deterministic(tmp_path):
    assert main(["synth", "--out", str(tmp_path / "a"), "--scenes", "3", "--seed", "11"]) == 0
    assert main(["synth", "--out", str(tmp_path / "b"), "--scenes", "3", "--seed", "11"]) == 0
    for sub in ("velodyne", "calib", "label_2", "det2d"):
        names = sorted(os.listdir(tmp_path / "a" / sub))
        match, mismatch, errors = filecmp.cmpfiles(tmp_path / "a" / sub, tmp_path / "b" / sub, names, shallow=False)
        assert mismatch == [] and errors == []


def test_synth_spec_file(tmp_path):
    spec = tmp_path / "s.txt"
    spec.write_text("scenes = 2\nmin_cars = 2\nmax_cars = 2\nfirst_id = 40\n")
    assert main(["synth", "--spec", str(spec), "--out", str(tmp_path / "d")]) == 0
    assert sorted(os.listdir(tmp_path / "d" / "label_2")) == ["000040.txt", "000041.txt"]
    assert all(len(kitti_io.load_labels(tmp_path / "d" / "label_2" / n)) == 2 for n in ("000040.txt", "000041.txt"))


def test_synth_exit_codes(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("")
    assert main(["synth", "--out", str(blocker / "sub"), "--scenes", "1"]) == 3
    bad = tmp_path / "bad.txt"
    bad.write_text("scenes = many\n")
    assert main(["synth", "--spec", str(bad), "--out", str(tmp_path / "x")]) == 2
    assert main(["synth", "--spec", str(tmp_path / "missing.txt"), "--out", str(tmp_path / "x")]) == 3


def test_usage_errors():
    assert main([]) == 2
    assert main(["fit", "--stop-after", "nowhere"]) == 2


def test_fit_five_scenes(dataset, maps_file, tmp_path):
    assert fit(dataset, tmp_path / "out", maps_file) == 0
    files = sorted(os.listdir(tmp_path / "out"))
    assert files == [f"{i:06d}.txt" for i in range(5)]


def test_fit_and_eval_are_deterministic(dataset, maps_file, tmp_path):
    for run in ("a", "b"):
        assert fit(dataset, tmp_path / run, maps_file) == 0
        assert main(["eval", "--data", dataset, "--dets", str(tmp_path / run), "--pr"]) == 0
    names = sorted(os.listdir(tmp_path / "a"))
    assert "report.kv" in names and "report.txt" in names and "pr.txt" in names
    match, mismatch, errors = filecmp.cmpfiles(tmp_path / "a", tmp_path / "b", names, shallow=False)
    assert mismatch == [] and errors == []


def test_fit_with_workers_matches_serial(dataset, maps_file, tmp_path):
    assert fit(dataset, tmp_path / "one", maps_file) == 0
    assert fit(dataset, tmp_path / "two", maps_file, "--workers", "2") == 0
    names = sorted(os.listdir(tmp_path / "one"))
    assert filecmp.cmpfiles(tmp_path / "one", tmp_path / "two", names, shallow=False)[1] == []


def test_eval_ground_truth_scores_one(dataset, tmp_path, capsys):
    out = tmp_path / "gt"
    out.mkdir()
    for i in range(5):
        fid = f"{i:06d}"
        calib = kitti_io.load_calib(os.path.join(dataset, "calib", fid + ".txt"))
        labels = kitti_io.load_labels(os.path.join(dataset, "label_2", fid + ".txt"))
        dets = [Detection(kitti_io.record_to_box(r, calib), 1.0) for r in labels]
        kitti_io.write_detections(out / f"{fid}.txt", dets, calib, IMAGE_SIZE)
    assert main(["eval", "--data", dataset, "--dets", str(out), "--report", str(tmp_path / "rep")]) == 0
    kv = dict(line.split(" = ") for line in (tmp_path / "rep" / "report.kv").read_text().splitlines())
    aps = {k: float(v) for k, v in kv.items() if k.startswith("ap.") and v != "nan"}
    assert aps and all(v == 1.0 for v in aps.values()), aps


def test_eval_without_ground_truth(tmp_path):
    root = tmp_path / "empty"
    synth_dataset(str(root), 1, seed=0)
    (root / "label_2" / "000000.txt").write_text("")
    assert main(["eval", "--data", str(root), "--dets", str(tmp_path / "none")]) == 4


def test_fit_exit_codes(dataset, maps_file, tmp_path):
    assert main(["fit", "--out", str(tmp_path / "o")]) == 2  # no data root
    assert fit(dataset, tmp_path / "o", str(tmp_path / "missing.bin")) == 3
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("proposal.iterations = 0\n")
    assert fit(dataset, tmp_path / "o", maps_file, "--config", str(cfg)) == 2
    assert main(["fit", "--data", dataset, "--out", str(tmp_path / "o"), "--stop-after", "stage1",
                 "--stage1", str(tmp_path / "nope.bin")]) == 3


def test_train_stage_mismatch(dataset, tmp_path):
    p = tmp_path / "s2.bin"
    assert main(["train", "--stage", "2", "--data", dataset, "--out", str(p), "--iterations", "2",
                 "--batch-size", "4", "--config", str(_tiny_cfg(tmp_path)), "--log", str(tmp_path / "log")]) == 0
    assert len((tmp_path / "log").read_text().splitlines()) == 2
    assert main(["fit", "--data", dataset, "--out", str(tmp_path / "o"), "--stop-after", "stage1",
                 "--stage1", str(p)]) == 2


def _tiny_cfg(tmp_path):
    p = tmp_path / "tiny.cfg"
    p.write_text("train.widths = 4 8\ntrain.fc_hidden = 8\ntrain.jitter_per_gt = 2\ntrain.background_per_frame = 1\n")
    return p
