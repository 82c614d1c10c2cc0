import csv
import io
import json

import numpy as np
import pytest

from latentflow.cli import main
from latentflow.model import checkpoint_dict, load_checkpoint


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


def run_json(capsys, *argv):
    code, out, err = run(capsys, *argv)
    assert code == 0, err
    return json.loads(out)


def write_jsonl(path, records):
    path.write_text("".join(json.dumps(r) + "\n" for r in records), encoding="utf-8")
    return path


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    out = tmp_path_factory.mktemp("train")
    assert main(["train", "--steps", "60", "--batch", "32", "--hidden", "8,8", "--log-every", "10",
                 "--out-dir", str(out)]) == 0
    return out


def test_tokens_default_is_73728(capsys):
    report = run_json(capsys, "tokens")
    assert report["tokens"] == 73728
    assert report["latent_thw"] == [32, 96, 96]
    assert report["seed"] == 0 and report["config"]["patch"] == "1,2,2"


def test_tokens_trivial_and_errors(capsys):
    assert run_json(capsys, "tokens", "--frames", 1, "--height", 8, "--width", 8, "--patch", "1,1,1")["tokens"] == 1
    code, _, err = run(capsys, "tokens", "--height", 100)
    assert code == 2 and "multiple" in err
    code, _, err = run(capsys, "tokens", "--frames", 8, "--height", 24, "--width", 24, "--patch", "1,2,2")
    assert code == 2 and "patch size" in err


def test_tokens_csv(capsys):
    code, out, _ = run(capsys, "tokens", "--format", "csv")
    assert code == 0
    rows = list(csv.reader(io.StringIO(out)))
    assert rows[0][-1] == "tokens" and rows[1][-1] == "73728"
    assert "\r" not in out


def test_usage_errors(capsys):
    assert run(capsys, "bogus")[0] == 2
    assert run(capsys, "tokens", "--frames", "x")[0] == 2


def test_train_writes_checkpoint_and_trace(trained):
    model = load_checkpoint(trained / "model.json")
    assert model.hidden == (8, 8)
    lines = (trained / "loss_trace.csv").read_text().splitlines()
    assert lines[0] == "step,loss" and len(lines) == 7


def test_train_same_seed_identical_traces(tmp_path, capsys):
    for name in ("a", "b"):
        assert main(["train", "--steps", "30", "--batch", "16", "--hidden", "8", "--log-every", "5",
                     "--seed", "4", "--out-dir", str(tmp_path / name)]) == 0
    capsys.readouterr()
    assert (tmp_path / "a" / "loss_trace.csv").read_bytes() == (tmp_path / "b" / "loss_trace.csv").read_bytes()
    assert (tmp_path / "a" / "model.json").read_bytes() == (tmp_path / "b" / "model.json").read_bytes()


def test_train_errors(tmp_path, capsys):
    assert run(capsys, "train", "--steps", 0, "--out-dir", tmp_path)[0] == 2
    code, _, err = run(capsys, "train", "--steps", 3, "--batch", 8, "--lr", 1e300, "--out-dir", tmp_path)
    assert code == 3 and "step" in err


def test_sample_basic(trained, tmp_path, capsys):
    report = run_json(capsys, "sample", "--ckpt", trained / "model.json", "--n", 5, "--out-dir", tmp_path)
    assert len(report["samples"]) == 5 and all(len(p) == 2 for p in report["samples"])
    assert report["config"]["schedule"] == "linquad:50,250"
    assert len(report["schedule"]) == 51
    assert json.loads((tmp_path / "samples.json").read_text()) == report["samples"]
    again = run_json(capsys, "sample", "--ckpt", trained / "model.json", "--n", 5, "--out-dir", tmp_path)
    assert again["samples"] == report["samples"]


def test_sample_schedule_and_empty(trained, tmp_path, capsys):
    report = run_json(capsys, "sample", "--ckpt", trained / "model.json", "--n", 0,
                      "--schedule", "linquad:50,1000", "--out-dir", tmp_path)
    assert report["samples"] == []
    assert report["schedule"][1] == 0.001


def test_sample_errors(trained, tmp_path, capsys):
    doc = checkpoint_dict(load_checkpoint(trained / "model.json"))
    doc["format_version"] = 7
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps(doc))
    assert run(capsys, "sample", "--ckpt", bad, "--out-dir", tmp_path)[0] == 2
    assert run(capsys, "sample", "--out-dir", tmp_path)[0] == 2
    assert run(capsys, "sample", "--ckpt", tmp_path / "missing.json", "--out-dir", tmp_path)[0] == 2
    assert run(capsys, "sample", "--ckpt", trained / "model.json", "--schedule", "cosine:4",
               "--out-dir", tmp_path)[0] == 2
    # guidance needs a class on a conditional checkpoint
    assert run(capsys, "sample", "--ckpt", trained / "model.json", "--guidance", 2,
               "--out-dir", tmp_path)[0] == 2


def test_conditional_train_and_guided_sample(tmp_path, capsys):
    assert main(["train", "--steps", "20", "--batch", "16", "--hidden", "8", "--conditional",
                 "--out-dir", str(tmp_path)]) == 0
    capsys.readouterr()
    report = run_json(capsys, "sample", "--ckpt", tmp_path / "model.json", "--n", 3, "--cls", 1,
                      "--guidance", 3.0, "--out-dir", tmp_path)
    assert len(report["samples"]) == 3


def test_extend_worked_example(tmp_path, capsys):
    report = run_json(capsys, "extend", "--mode", "md", "--n", 30, "--hop", 15, "--ctx", 5,
                      "--out-dir", tmp_path)
    assert report["plan"]["spans"] == [[0, 15], [10, 30]]
    masks = np.array(report["mask_report"])
    assert np.max(np.abs(masks.sum(axis=1) - 1)) <= 1e-12
    rows = list(csv.reader(io.StringIO((tmp_path / "masks.csv").read_text())))
    assert rows[0] == ["frame", "seg0", "seg1"] and len(rows) == 31
    assert (tmp_path / "sequence.csv").exists()


def test_extend_defaults(tmp_path, capsys):
    report = run_json(capsys, "extend", "--out-dir", tmp_path)
    plan = report["plan"]
    assert (plan["n_win"], plan["n_hop"], plan["n_ctx"]) == (40, 30, 10)
    assert np.array(report["sequence"]).shape == (100, 2)


def test_extend_single_segment_modes_agree(tmp_path, capsys):
    outs = {}
    for mode in ("md", "ar", "beam"):
        extra = ["--candidates", 1, "--beam", 1] if mode == "beam" else []
        outs[mode] = run_json(capsys, "extend", "--mode", mode, "--n", 20, "--hop", 30, "--ctx", 10,
                              "--seed", 5, "--out-dir", tmp_path, *extra)["sequence"]
    assert outs["md"] == outs["ar"] == outs["beam"]


def test_extend_modes_run(tmp_path, capsys):
    for mode in ("ar", "beam"):
        report = run_json(capsys, "extend", "--mode", mode, "--n", 50, "--hop", 15, "--ctx", 5,
                          "--window", "uniform", "--out-dir", tmp_path)
        assert np.all(np.isfinite(report["sequence"]))
    assert run(capsys, "extend", "--hop", 0, "--out-dir", tmp_path)[0] == 2
    assert run(capsys, "extend", "--mode", "beam", "--candidates", 1, "--beam", 2, "--out-dir", tmp_path)[0] == 2


def test_eval_nwt_all_wins(tmp_path, capsys):
    path = write_jsonl(tmp_path / "v.jsonl", [
        {"item_id": str(k), "model_a": "A", "model_b": "B", "votes": [1, 1, 1]} for k in range(20)])
    for sigma in (1.0, 10.0, 49.9):
        report = run_json(capsys, "eval", "nwt", "--in", path, "--sigma", sigma)
        (row,) = report["results"]
        assert row["nwt"] == 100.0 and row["band"] == "significant"
        assert row["ci_low"] == row["ci_high"] == 100.0


def test_eval_nwt_bootstrap_deterministic(tmp_path, capsys):
    votes = [[1, -1, 1], [0, 0, 1], [-1, -1, -1], [1, 1, 0], [0, 1, -1]]
    path = write_jsonl(tmp_path / "v.jsonl", [
        {"item_id": str(k), "model_a": "A", "model_b": "B", "votes": v} for k, v in enumerate(votes)])
    a = run_json(capsys, "eval", "nwt", "--in", path, "--seed", 3)
    b = run_json(capsys, "eval", "nwt", "--in", path, "--seed", 3)
    assert a == b
    row = a["results"][0]
    assert row["ci_low"] <= row["nwt"] <= row["ci_high"]
    assert row["band"] is None


def test_eval_elo_symmetric(tmp_path, capsys):
    recs = [{"model_a": "A", "model_b": "B", "outcome": o} for o in ("win_a", "win_b", "tie", "tie")]
    report = run_json(capsys, "eval", "elo", "--in", write_jsonl(tmp_path / "b.jsonl", recs))
    ratings = {r["model"]: r["rating"] for r in report["ratings"]}
    assert ratings["A"] == pytest.approx(ratings["B"], abs=1e-9)
    assert ratings["A"] == pytest.approx(1000.0)


def test_eval_elo_csv_and_errors(tmp_path, capsys):
    recs = [{"model_a": "A", "model_b": "B", "outcome": "win_a"},
            {"model_a": "C", "model_b": "D", "outcome": "win_a"}]
    path = write_jsonl(tmp_path / "b.jsonl", recs)
    code, _, err = run(capsys, "eval", "elo", "--in", path)
    assert code == 2 and "disconnected" in err
    path = write_jsonl(tmp_path / "c.jsonl", recs[:1])
    code, out, _ = run(capsys, "eval", "elo", "--in", path, "--format", "csv")
    assert code == 0 and out.splitlines()[0] == "model,rating"
    assert run(capsys, "eval", "elo", "--in", tmp_path / "nope.jsonl")[0] == 2
    assert run(capsys, "eval", "nwt")[0] == 2


def test_eval_bt(tmp_path, capsys):
    recs = [{"model_a": "A", "model_b": "B", "votes": [1, 1, -1], "bin_a": 1},
            {"model_a": "A", "model_b": "B", "votes": [-1, 0], "bin_b": 1},
            {"model_a": "B", "model_b": "A", "votes": [1, -1, -1]}]
    report = run_json(capsys, "eval", "bt", "--in", write_jsonl(tmp_path / "bt.jsonl", recs))
    assert report["offsets"]["A"] == 0.0
    assert len(report["coef"]) == 2


def test_config_file_merge(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"frames": 8, "height": 64, "width": 64, "patch": "1,1,1"}))
    report = run_json(capsys, "tokens", "--config", cfg, "--width", 128)
    # flags win over the config file
    assert report["tokens"] == 1 * 8 * 16
    cfg.write_text(json.dumps({"nonsense": 1}))
    assert run(capsys, "tokens", "--config", cfg)[0] == 2
    assert run(capsys, "tokens", "--config", tmp_path / "missing.json")[0] == 2


def test_default_train_then_sample_finds_both_modes(tmp_path, capsys):
    assert main(["train", "--out-dir", str(tmp_path)]) == 0
    capsys.readouterr()
    report = run_json(capsys, "sample", "--ckpt", tmp_path / "model.json", "--n", 1000, "--out-dir", tmp_path)
    pts = np.array(report["samples"])
    right = pts[:, 0] > 0
    assert abs(right.mean() - 0.5) < 0.05
    np.testing.assert_allclose(pts[right].mean(axis=0), [2, 0], atol=0.15)
    np.testing.assert_allclose(pts[~right].mean(axis=0), [-2, 0], atol=0.15)
