import json

import pytest

from cwtscan.cli import EXIT_ANOMALY, EXIT_ERROR, EXIT_OK, main

TINY = {
    "synth": {"n_per_class": 8},
    "train": {"epochs": 2, "channels": [4, 8]},
    "siamese_train": {"epochs": 1, "channels": [4, 8]},
    "table3_train": {"epochs": 2, "channels": [4, 8]},
}


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.json"
    cfg.write_text(json.dumps(TINY))
    common = ["--config", str(cfg)]
    assert main(["generate", "--dataset", "2", "--out", str(root / "ds"), *common]) == EXIT_OK
    assert main(["train", "--manifest", str(root / "ds"), "--out", str(root / "t1"), *common]) == EXIT_OK
    assert main(["traces", "--out", str(root / "tr"), *common]) == EXIT_OK
    return root, common


def test_generate_and_train_outputs(work):
    root, _ = work
    manifest = json.loads((root / "ds" / "manifest.json").read_text())
    assert len(manifest["entries"]) == 56
    assert {"class_names", "entries", "seed", "generator_version"} <= set(manifest)
    for name in ("weights.cwtw", "metrics.json", "confusion.png"):
        assert (root / "t1" / name).exists()
    metrics = json.loads((root / "t1" / "metrics.json").read_text())
    assert metrics["confusion"]["total"] == sum(map(sum, metrics["confusion"]["counts"]))


def test_nway_output(work, capsys):
    root, common = work
    code = main(["nway", "--manifest", str(root / "ds"), "--weights", str(root / "t1" / "weights.cwtw"),
                 "--n-way", "5", "--out", str(root / "nw"), *common])
    assert code == EXIT_OK
    data = json.loads((root / "nw" / "nway.json").read_text())
    assert data["n_way"] == 5
    assert data["trials"] >= data["test_size"]
    assert "accuracy" in capsys.readouterr().out


def test_scan_exit_codes(work):
    root, common = work
    w = str(root / "t1" / "weights.cwtw")
    ref, qry = str(root / "tr" / "reference.csv"), str(root / "tr" / "query.csv")
    # threshold 0 can never flag, threshold 1 flags anything short of a perfect match
    assert main(["scan", "--weights", w, "--reference", ref, "--query", ref, "--threshold", "0",
                 "--out", str(root / "s0"), *common]) == EXIT_OK
    assert main(["scan", "--weights", w, "--reference", ref, "--query", qry, "--threshold", "1",
                 "--out", str(root / "s1"), *common]) == EXIT_ANOMALY
    report = json.loads((root / "s1" / "scan_report.json").read_text())
    assert [r["variable"] for r in report] == ["var1", "var2"]
    assert (root / "s1" / "timeline_var1.png").exists()


def test_mismatched_variables(work, tmp_path):
    root, common = work
    src = (root / "tr" / "query.csv").read_text().splitlines()
    src[0] = src[0].replace("var2", "pressure")
    bad = tmp_path / "bad.csv"
    bad.write_text("\n".join(src) + "\n")
    assert main(["scan", "--weights", str(root / "t1" / "weights.cwtw"),
                 "--reference", str(root / "tr" / "reference.csv"), "--query", str(bad),
                 "--out", str(tmp_path / "o"), *common]) == EXIT_ERROR


def test_corrupt_manifest(tmp_path, capsys):
    (tmp_path / "manifest.json").write_text('{"entries": [')
    assert main(["train", "--manifest", str(tmp_path), "--out", str(tmp_path / "o")]) == EXIT_ERROR
    assert "error" in capsys.readouterr().err


def test_corrupt_weights(work, tmp_path):
    root, common = work
    blob = (root / "t1" / "weights.cwtw").read_bytes()
    (tmp_path / "w.cwtw").write_bytes(blob[:-9])
    assert main(["nway", "--manifest", str(root / "ds"), "--weights", str(tmp_path / "w.cwtw"),
                 "--n-way", "5", "--out", str(tmp_path / "o"), *common]) == EXIT_ERROR


def test_generate_refuses_non_empty_out(tmp_path):
    out = tmp_path / "busy"
    out.mkdir()
    (out / "keep.txt").write_text("x")
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"synth": {"n_per_class": 4}}))
    assert main(["generate", "--dataset", "1", "--out", str(out), "--config", str(cfg)]) == EXIT_ERROR
    assert (out / "keep.txt").exists()
    assert main(["generate", "--dataset", "1", "--out", str(out), "--config", str(cfg),
                 "--force"]) == EXIT_OK
    assert not (out / "keep.txt").exists()


def test_bad_config(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"trian": {}}))
    assert main(["generate", "--dataset", "1", "--out", str(tmp_path / "o"), "--config", str(cfg)]) == EXIT_ERROR


def test_missing_trace_file(work, tmp_path):
    root, common = work
    assert main(["scan", "--weights", str(root / "t1" / "weights.cwtw"),
                 "--reference", str(tmp_path / "nope.csv"), "--query", str(tmp_path / "nope.csv"),
                 "--out", str(tmp_path / "o"), *common]) == EXIT_ERROR


def test_table3_runs(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps(TINY))
    assert main(["generate", "--dataset", "3", "--out", str(tmp_path / "d3"), "--config", str(cfg)]) == EXIT_OK
    assert main(["table3", "--manifest", str(tmp_path / "d3"), "--out", str(tmp_path / "t3"),
                 "--config", str(cfg)]) == EXIT_OK
    rows = json.loads((tmp_path / "t3" / "table3.json").read_text())["rows"]
    assert len(rows) == 12
    assert all(0 <= r["score"] <= 1 for r in rows)
    assert (tmp_path / "t3" / "weights.cwtw").exists()


def test_usage_errors_exit_two():
    with pytest.raises(SystemExit) as exc:
        main(["generate"])
    assert exc.value.code == 2
