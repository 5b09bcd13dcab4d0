import json

import pytest

from metapatch.cli import OUTPUT_ROOT_ENV, config_hash, load_config, main

SMALL = {
    "name": "small",
    "seed": 1,
    "data": {"source": "synthetic", "n_per_class": 6, "num_classes": 2, "resolution": [8, 8]},
    "threat": {"mode": "patch", "patch_size": [4, 4], "max_translation": [2, 2]},
    "model": {"widths": [4, 8], "groups": 2},
    "train": {"method": "MAT", "epochs": 2, "batch_size": 8, "P": 4, "K": 1},
    "attack": {"grid": [
        {"init": "random", "steps": 2, "batch_size": 4, "step_size": 0.1},
        {"init": "data", "steps": 2, "batch_size": 4, "data_candidates": 2},
        {"init": "random", "steps": 2, "batch_size": 4, "cutoff": 1.0},
    ]},
}


def write_config(tmp_path, cfg=None, **changes):
    cfg = json.loads(json.dumps(cfg or SMALL))
    cfg.update(changes)
    cfg.setdefault("output_dir", str(tmp_path / "run"))
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg))
    return path


def files(d):
    return {p.relative_to(d).as_posix(): p.read_bytes() for p in sorted(d.rglob("*")) if p.is_file()}


def test_dry_run_writes_nothing(tmp_path):
    path = write_config(tmp_path)
    assert main(["train", str(path), "--dry-run"]) == 0
    assert not (tmp_path / "run").exists()


@pytest.mark.parametrize("change, needle", [
    ({"bogus": 1}, "bogus"),
    ({"train": {"method": "MAT", "epochz": 1}}, "epochz"),
    ({"train": {"method": "nope"}}, "nope"),
    ({"threat": {"mode": "patch", "patch_size": [4, 4], "max_translation": [5, 5]}}, "outside"),
])
def test_invalid_config_exit_2(tmp_path, capsys, change, needle):
    path = write_config(tmp_path, **change)
    assert main(["train", str(path)]) == 2
    assert needle in capsys.readouterr().err


def test_malformed_config_exit_2(tmp_path, capsys):
    (tmp_path / "bad.json").write_text("{nope")
    assert main(["train", str(tmp_path / "bad.json")]) == 2
    assert "bad.json" in capsys.readouterr().err


def test_usage_error_exit_2():
    assert main(["frobnicate"]) == 2


def test_train_standard_has_no_meta(tmp_path):
    path = write_config(tmp_path, train={"method": "standard", "epochs": 1, "batch_size": 8})
    assert main(["train", str(path), "--quiet"]) == 0
    out = tmp_path / "run"
    assert (out / "model.json").exists() and (out / "model.bin").exists()
    assert not (out / "meta.json").exists()


def test_train_mat_artifacts_and_determinism(tmp_path):
    path = write_config(tmp_path)
    assert main(["train", str(path), "--quiet"]) == 0
    out = tmp_path / "run"
    for name in ("model.json", "meta.json", "meta.bin", "history.jsonl", "config.json"):
        assert (out / name).exists(), name
    h = config_hash(load_config(path))
    assert json.loads((out / "model.json").read_text())["extra"]["config_hash"] == h
    assert json.loads((out / "meta.json").read_text())["extra"]["config_hash"] == h
    assert all(json.loads(line)["config_hash"] == h for line in (out / "history.jsonl").read_text().splitlines())
    first = files(out)
    assert main(["train", str(path), "--quiet", "--output-dir", str(tmp_path / "again")]) == 0
    assert files(tmp_path / "again") == first


def test_set_overrides_scalars(tmp_path):
    path = write_config(tmp_path)
    cfg = load_config(path, ["train.epochs=3", "name=other"])
    assert cfg["train"]["epochs"] == 3 and cfg["name"] == "other"
    assert config_hash(cfg) != config_hash(load_config(path))


def test_output_root_env(tmp_path, monkeypatch):
    cfg = json.loads(json.dumps(SMALL))
    cfg["output_dir"] = "rel/run"
    cfg["train"] = {"method": "standard", "epochs": 1, "batch_size": 8}
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg))
    monkeypatch.setenv(OUTPUT_ROOT_ENV, str(tmp_path / "root"))
    assert main(["train", str(path), "--quiet"]) == 0
    assert (tmp_path / "root" / "rel" / "run" / "model.json").exists()


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("cli")
    path = write_config(tmp)
    assert main(["train", str(path), "--quiet"]) == 0
    return tmp, path


def test_attack_missing_checkpoint_exit_2(tmp_path, capsys):
    path = write_config(tmp_path)
    assert main(["attack", str(path)]) == 2
    assert "not found" in capsys.readouterr().err


def test_attack_single_config(trained, tmp_path):
    _, path = trained
    cfg = json.loads(path.read_text())
    cfg["attack"]["grid"] = cfg["attack"]["grid"][:1]
    one = tmp_path / "one.json"
    one.write_text(json.dumps(cfg))
    assert main(["attack", str(one), "--out", str(tmp_path / "a")]) == 0
    assert len(list((tmp_path / "a" / "results").glob("*.json"))) == 1
    assert len((tmp_path / "a" / "report.csv").read_text().splitlines()) == 2
    report = json.loads((tmp_path / "a" / "report.json").read_text())
    assert report["min"] == report["rows"][0]["accuracy"]
    assert report["provenance"]["config_hash"] == config_hash(load_config(one))


def test_attack_family_filter(trained, tmp_path):
    _, path = trained
    assert main(["attack", str(path), "--family", "LF", "--out", str(tmp_path / "lf")]) == 0
    rows = json.loads((tmp_path / "lf" / "report.json").read_text())["rows"]
    assert [r["family"] for r in rows] == ["LF"]


def test_attack_sequential_bitwise_and_parallel_equal(trained, tmp_path):
    _, path = trained
    assert main(["attack", str(path), "--deterministic", "--out", str(tmp_path / "s1")]) == 0
    assert main(["attack", str(path), "--deterministic", "--out", str(tmp_path / "s2")]) == 0
    assert files(tmp_path / "s1") == files(tmp_path / "s2")
    assert main(["attack", str(path), "--jobs", "3", "--out", str(tmp_path / "p")]) == 0
    seq = json.loads((tmp_path / "s1" / "report.json").read_text())
    par = json.loads((tmp_path / "p" / "report.json").read_text())
    key = lambda r: r["config_id"]  # noqa: E731
    assert sorted(seq.pop("rows"), key=key) == sorted(par.pop("rows"), key=key)
    assert seq == par


def _fake_report(d, label, fam, version=1):
    d.mkdir(parents=True)
    (d / "report.json").write_text(json.dumps({
        "schema": "metapatch-eval-report", "schema_version": version, "label": label, "model_id": "",
        "seed": 0, "spec": {}, "provenance": {}, "clean_accuracy": 0.9, "family_min": fam,
        "min": min(fam.values()), "rows": [],
    }))
    return d


def test_report_table(tmp_path, capsys):
    a = _fake_report(tmp_path / "a", "standard", {"RI": 0.5, "DI": 0.3, "LF": 0.4})
    b = _fake_report(tmp_path / "b", "MAT", {"RI": 0.8, "DI": 0.7, "LF": 0.75})
    assert main(["report", str(a), str(b), "--out", str(tmp_path / "sum")]) == 0
    lines = (tmp_path / "sum" / "summary.csv").read_text().splitlines()
    assert lines[0] == "method,seed,clean,RI,DI,LF,Min"
    assert lines[1].endswith(",0.3") and lines[2].endswith(",0.7")
    assert "MAT" in capsys.readouterr().out


def test_report_single_dir(tmp_path):
    a = _fake_report(tmp_path / "a", "standard", {"RI": 0.5})
    assert main(["report", str(a), "--out", str(tmp_path / "s")]) == 0
    assert len((tmp_path / "s" / "summary.csv").read_text().splitlines()) == 2


def test_report_errors(tmp_path, capsys):
    good = _fake_report(tmp_path / "good", "MAT", {"RI": 0.5})
    bad = tmp_path / "bad"
    bad.mkdir()
    (bad / "report.json").write_text("{broken")
    assert main(["report", str(good), str(bad)]) == 2
    assert str(bad / "report.json") in capsys.readouterr().err
    old = _fake_report(tmp_path / "old", "MAT", {"RI": 0.5}, version=0)
    assert main(["report", str(old)]) == 2
    assert "version" in capsys.readouterr().err


def test_synth_data(tmp_path):
    assert main(["synth-data", "--out", str(tmp_path / "d"), "--n-per-class", "2", "--resolution", "8", "8"]) == 0
    assert len(list((tmp_path / "d").rglob("*.ppm"))) == 8
    assert main(["synth-data", "--out", str(tmp_path / "d")]) == 2
