import json

import pytest

from stonefuse.cli import main
from stonefuse.dataprep import Manifest
from stonefuse.evaluation import write_labels
from stonefuse.pipeline import read_results, roi_id

from conftest import synth_ct, write_png


@pytest.fixture
def ten(testset_dir, tmp_path):
    """First ten test-set images, one corrupted, plus a classifier replay."""
    rows = Manifest.from_csv(testset_dir / "manifest.csv").rows[:10]
    bad = tmp_path / "bad.png"
    bad.write_bytes(b"\xff\xd8\xff\xe0 truncated jpeg")
    rows[4] = rows[4].__class__(rows[4].stem, bad, rows[4].label, rows[4].split)
    Manifest(rows).to_csv(tmp_path / "m.csv")
    with open(tmp_path / "cls.jsonl", "w") as fh:
        for i, r in enumerate(rows):
            for k in (0, 1):
                fh.write(json.dumps({"roi": roi_id(r.stem, k), "logit": 2.0 if (i + k) % 3 == 0 else -2.0}) + "\n")
    return tmp_path, testset_dir / "replay.jsonl"


def run_args(tmp, replay, *extra):
    return ["run", "--manifest", str(tmp / "m.csv"), "--detector-replay", str(replay),
            "--classifier-replay", str(tmp / "cls.jsonl"), "--out", str(tmp / "r.jsonl"), *extra]


def test_help(capsys):
    assert main(["--help"]) == 0
    assert "score" in capsys.readouterr().out


def test_unknown_subcommand():
    assert main(["frobnicate"]) == 2


def test_unknown_flag(capsys):
    assert main(["score", "--results", "r", "--labels", "l", "--out", "o", "--bogus"]) == 2
    assert "--bogus" in capsys.readouterr().err


def test_run_with_one_corrupt_image(ten, capsys):
    tmp, replay = ten
    assert main(run_args(tmp, replay, "--crops", str(tmp / "crops"))) == 1
    lines = (tmp / "r.jsonl").read_text().splitlines()
    assert len(lines) == 10
    errs = [json.loads(l)["error"] for l in lines]
    assert [e["stage"] for e in errs if e] == ["decode"]
    out = capsys.readouterr()
    assert out.out == ""
    assert "errors" in out.err
    n_rois = sum(len(r.roi_verdicts) for r in read_results(tmp / "r.jsonl"))
    assert len(list((tmp / "crops").iterdir())) == n_rois


def test_grouped_spelling(ten):
    tmp, replay = ten
    assert main(["pipeline", *run_args(tmp, replay, "--filter", "label=normal")]) in (0, 1)
    assert all(json.loads(l)["label"] == "normal" for l in (tmp / "r.jsonl").read_text().splitlines())


def test_run_config_file_and_override(ten):
    tmp, replay = ten
    (tmp / "c.ini").write_text(f"[pipeline]\ndetector_replay_path = {replay}\nclassifier_model_path = missing.onnx\n")
    args = ["run", "--manifest", str(tmp / "m.csv"), "--config", str(tmp / "c.ini"), "--out", str(tmp / "r.jsonl")]
    assert main(args) == 2  # model file does not exist
    assert main([*args, "--classifier-replay", str(tmp / "cls.jsonl"), "--workers", "3"]) == 1


def test_run_without_sources_is_usage_error(ten):
    tmp, _ = ten
    assert main(["run", "--manifest", str(tmp / "m.csv"), "--out", str(tmp / "r.jsonl")]) == 2
    assert not (tmp / "r.jsonl").exists()


def test_score_round_trip(ten):
    tmp, replay = ten
    main(run_args(tmp, replay))
    results = read_results(tmp / "r.jsonl")
    write_labels({rid: "stone" for r in results for rid, _ in r.rois}, tmp / "labels.csv")
    (tmp / "ref.json").write_text(json.dumps({"recall": 0.0, "fn_rate": 1.0}))
    rc = main(["eval", "score", "--results", str(tmp / "r.jsonl"), "--labels", str(tmp / "labels.csv"),
               "--out", str(tmp / "rep.json"), "--reference", str(tmp / "ref.json"), "--tol", "0.03"])
    rep = json.loads((tmp / "rep.json").read_text())
    assert rep["failed_images"] == 1  # the corrupt image
    assert rc == 1
    assert {c["metric"]: c["passed"] for c in rep["reference"]} == {"recall": False, "fn_rate": False}


def test_score_missing_label(ten):
    tmp, replay = ten
    main(run_args(tmp, replay))
    write_labels({}, tmp / "labels.csv")
    assert main(["score", "--results", str(tmp / "r.jsonl"), "--labels", str(tmp / "labels.csv"),
                 "--out", str(tmp / "rep.json")]) == 2


def test_bench(ten):
    tmp, replay = ten
    args = ["bench", "--manifest", str(tmp / "m.csv"), "--detector-replay", str(replay),
            "--classifier-replay", str(tmp / "cls.jsonl"), "--reps", "3", "--out", str(tmp / "b.json")]
    assert main(args) == 1  # corrupt image fails every repetition
    report = json.loads((tmp / "b.json").read_text())
    assert report["repetitions"] == 3 and report["warmup_excluded"]
    assert report["stages_ms"]["decode"]["n"] == 18  # 9 good images x 2 timed reps
    assert main([*args[:-4], "--reps", "0"]) == 2


def test_manifest_and_augment(tmp_path):
    for i in range(4):
        write_png(tmp_path / "data" / "train" / "stone" / f"s{i}.png", synth_ct(i, 20, 16))
        write_png(tmp_path / "data" / "train" / "normal" / f"n{i}.png", synth_ct(10 + i, 20, 16))
    write_png(tmp_path / "data" / "test" / "stone" / "t0.png", synth_ct(99, 20, 16))
    assert main(["dataprep", "manifest", "--root", str(tmp_path / "data"), "--out", str(tmp_path / "m.csv")]) == 0
    assert Manifest.from_csv(tmp_path / "m.csv").split_sizes() == {"train": 8, "val": 0, "test": 1}
    assert main(["augment", "--manifest", str(tmp_path / "m.csv"), "--filter", "split=train", "--seed", "7",
                 "--out", str(tmp_path / "aug")]) == 0
    aug = Manifest.from_csv(tmp_path / "aug" / "manifest.csv")
    assert len(aug) == 12
    assert main(["augment", "--manifest", str(tmp_path / "m.csv"), "--filter", "split", "--out", str(tmp_path / "x")]) == 2


def test_manifest_leak_is_usage_error(tmp_path):
    write_png(tmp_path / "d" / "train" / "stone" / "p1_a.png", synth_ct(0, 8, 8))
    write_png(tmp_path / "d" / "test" / "stone" / "p1_b.png", synth_ct(1, 8, 8))
    rc = main(["manifest", "--root", str(tmp_path / "d"), "--out", str(tmp_path / "m.csv"),
               "--subject-pattern", r"^(?P<subject>p\d+)_"])
    assert rc == 2
