import json
import subprocess
import sys

import pytest

from cryopick.cli import main
from cryopick.data import file_digest

CLASSES = ["apo-ferritin", "beta-amylase", "beta-galactosidase", "ribosome", "thyroglobulin",
           "virus-like-particle"]


def _write(path, obj):
    path.write_text(json.dumps(obj))
    return path


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    return tmp_path_factory.mktemp("cli")


@pytest.fixture(scope="module")
def dataset(work):
    cfg = _write(work / "synth.json", {
        "seed": 4, "splits": {"labeled": 1, "unlabeled": 1, "test": 1},
        "volume": {"dims": [32, 32, 32], "spacing": 20.0,
                   "counts": {c: 1 for c in CLASSES}, "noise_sd": 0.3}})
    assert main(["synth", str(cfg), str(work / "data")]) == 0
    return work / "data"


@pytest.fixture(scope="module")
def configs(work):
    net = {"stem_channels": 4, "encoder_channels": [8, 8, 8], "groups": 2, "head_bias": -2.0}
    train = _write(work / "train.json", {"net": net, "train": {
        "crop_size": 16, "steps": 4, "log_every": 1, "checkpoint_every": 2}})
    ssl = _write(work / "ssl.json", {"ssl": {
        "train": {"crop_size": 16, "steps": 2, "log_every": 1}, "alpha": 0.1}})
    return train, ssl


@pytest.fixture(scope="module")
def burnin(work, dataset, configs):
    out = work / "burnin"
    assert main(["train", str(configs[0]), str(dataset), str(out)]) == 0
    return out


def test_synth_layout_and_counts(work):
    cfg = _write(work / "s26.json", {"seed": 0, "splits": {"labeled": 2, "unlabeled": 16, "test": 8},
                                     "volume": {"dims": [16, 16, 16], "spacing": 10.0}})
    assert main(["synth", str(cfg), str(work / "d26")]) == 0
    d = work / "d26"
    assert len(list((d / "volumes").glob("*.json"))) == 26
    assert len(list((d / "volumes").glob("*.f32"))) == 26
    assert len(list((d / "picks").glob("*.jsonl"))) == 26
    assert sorted(p.name for p in (d / "splits").iterdir()) == \
        ["labeled.txt", "test.txt", "unlabeled.txt"]
    manifest = json.loads((d / "manifest.json").read_text())
    assert manifest["command"] == "synth" and manifest["seed"] == 0
    for rel, digest in manifest["artifacts"].items():
        assert file_digest(d / rel) == digest


def test_synth_rerun_identical_and_collision(work, dataset):
    cfg = work / "synth.json"
    assert main(["synth", str(cfg), str(work / "again")]) == 0
    a = json.loads((dataset / "manifest.json").read_text())["artifacts"]
    b = json.loads((work / "again" / "manifest.json").read_text())["artifacts"]
    assert a == b
    assert main(["synth", str(cfg), str(work / "again")]) == 1
    assert main(["synth", str(cfg), str(work / "again"), "--force"]) == 0


def test_synth_zero_volumes_is_an_error(work, capsys):
    cfg = _write(work / "zero.json", {"splits": {}})
    assert main(["synth", str(cfg), str(work / "zero")]) == 1
    assert "zero volumes" in capsys.readouterr().err
    assert not (work / "zero").exists()


def test_train_outputs(burnin):
    for name in ("checkpoint.json", "checkpoint.bin", "metrics.csv", "manifest.json",
                 "ckpt_000002.json", "ckpt_000004.json"):
        assert (burnin / name).exists(), name
    rows = (burnin / "metrics.csv").read_text().strip().splitlines()
    assert len(rows) == 1 + 4


def test_train_resume_is_identical(work, dataset, configs, burnin):
    out = work / "resumed"
    assert main(["train", str(configs[0]), str(dataset), str(out),
                 "--resume", str(burnin / "ckpt_000002.json")]) == 0
    assert (out / "checkpoint.bin").read_bytes() == (burnin / "checkpoint.bin").read_bytes()


def test_cotrain_requires_init(work, dataset, configs, capsys):
    assert main(["cotrain", str(configs[1]), str(dataset), str(work / "co")]) == 1
    assert "burn-in" in capsys.readouterr().err


@pytest.mark.parametrize("ablate", ["mt", "mv", "dropblock"])
def test_cotrain_ablations(work, dataset, configs, burnin, ablate):
    out = work / f"co_{ablate}"
    assert main(["cotrain", str(configs[1]), str(dataset), str(out), "--init",
                 str(burnin / "checkpoint.json"), "--ablate", ablate]) == 0
    m = json.loads((out / "manifest.json").read_text())
    assert m["config"]["ablate"] == ablate
    assert m["config"]["ssl"]["multi_view"] == (ablate != "mt")
    assert (m["config"]["ssl"]["train"]["augment"]["dropblock"]["rate"] > 0) == (ablate == "dropblock")


def test_cotrain_rejects_non_burnin_init(work, dataset, configs, burnin):
    co = work / "co_mt" / "checkpoint.json"
    assert main(["cotrain", str(configs[1]), str(dataset), str(work / "co_bad"),
                 "--init", str(co)]) == 1


def test_infer_and_eval(work, dataset, burnin, capsys):
    vol = dataset / "volumes" / "test_002.json"
    ck = str(burnin / "checkpoint.json")
    assert main(["infer", ck, str(vol), "--out", str(work / "det_off"), "--tta", "off",
                 "--thresholds", "0.3"]) == 0
    assert "1 forwards" in capsys.readouterr().out
    assert main(["infer", ck, str(vol), "--out", str(work / "det")]) == 0
    text = capsys.readouterr().out
    n = int(text.split(":")[1].split()[0])
    assert "4 forwards" in text
    assert len((work / "det" / "test_002.jsonl").read_text().splitlines()) == n

    assert main(["eval", str(work / "det"), "--truth", str(dataset / "picks"),
                 "--data", str(dataset), "--out", str(work / "ev"), "--sweep", "0.1:0.9:0.1"]) == 0
    reps = json.loads((work / "ev" / "report.json").read_text())
    assert [r["tau"] for r in reps] == [0.5, 0.75]
    assert reps[1]["macro_f1"] >= reps[0]["macro_f1"]
    assert len(json.loads((work / "ev" / "sweep.json").read_text())["grid"]) == 9


def test_eval_perfect_and_missing_truth(work, dataset, capsys):
    # ground-truth picks rewritten as detections score 1.0 at both tau
    det = work / "perfect"
    det.mkdir()
    src = dataset / "picks" / "test_002.jsonl"
    (det / "test_002.jsonl").write_text(src.read_text())
    assert main(["eval", str(det), "--truth", str(dataset / "picks"), "--data", str(dataset),
                 "--out", str(work / "ev_perfect")]) == 0
    reps = json.loads((work / "ev_perfect" / "report.json").read_text())
    assert all(r["macro_f1"] == 1.0 for r in reps)
    assert main(["eval", str(det), "--truth", str(work / "nope.jsonl"), "--data", str(dataset),
                 "--out", str(work / "ev_missing")]) == 1
    assert "missing truth" in capsys.readouterr().err
    assert not (work / "ev_missing").exists()


def test_eval_parse_error_names_line(work, dataset, capsys):
    det = work / "broken"
    det.mkdir()
    (det / "test_002.jsonl").write_text('{"class_name": "ribosome"}\n')
    assert main(["eval", str(det), "--truth", str(dataset / "picks"), "--data", str(dataset),
                 "--out", str(work / "ev_broken")]) == 1
    assert "test_002.jsonl:1" in capsys.readouterr().err


def test_bench(work, capsys):
    assert main(["bench", "--sizes", "6x8x16x16,6x8x20x20", "--reps", "2", "--n-per-class", "2",
                 "--out", str(work / "bench")]) == 0
    rows = (work / "bench" / "bench.csv").read_text().strip().splitlines()[1:]
    assert len(rows) == 4 and all(r.split(",")[2] == "2" for r in rows)
    assert {r.split(",")[0] for r in rows} == {"nms", "ccl"}
    assert main(["bench", "--sizes", "5x8x8x8", "--out", str(work / "bench2")]) == 1


def test_console_entry_point_help():
    res = subprocess.run([sys.executable, "-m", "cryopick.cli", "--help"], capture_output=True,
                         text=True)
    assert res.returncode == 0
    for cmd in ("synth", "train", "cotrain", "infer", "eval", "bench"):
        assert cmd in res.stdout
