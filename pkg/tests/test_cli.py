import hashlib
import json

import numpy as np
import pytest

from kwta_ensemble import nn
from kwta_ensemble.cli import main
from kwta_ensemble.data import load_wdbc


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def digest_tree(root):
    return {p.name: hashlib.sha256(p.read_bytes()).hexdigest() for p in sorted(root.rglob("*")) if p.is_file()}


def test_fetch_wdbc_then_noop(tmp_path, capsys):
    code, out, _ = run(capsys, "fetch", "wdbc", "--data-dir", tmp_path)
    assert code == 0 and "fetched" in out
    assert len(load_wdbc(tmp_path / "wdbc" / "wdbc.data")) == 569
    before = digest_tree(tmp_path)
    code, out, _ = run(capsys, "fetch", "wdbc", "--data-dir", tmp_path)
    assert code == 0 and "present" in out
    assert digest_tree(tmp_path) == before


def test_fetch_quarantines_corrupt_file(tmp_path, capsys):
    run(capsys, "fetch", "wdbc", "--data-dir", tmp_path)
    target = tmp_path / "wdbc" / "wdbc.data"
    target.write_text(target.read_text().replace("M", "B", 1))
    code, out, _ = run(capsys, "fetch", "wdbc", "--data-dir", tmp_path)
    assert code == 1 and "corrupt" in out
    assert not target.exists() and (tmp_path / "wdbc" / "wdbc.data.corrupt").exists()
    # a later fetch restores a verified copy
    assert run(capsys, "fetch", "wdbc", "--data-dir", tmp_path)[0] == 0


def test_fetch_unknown_dataset_is_usage_error(tmp_path, capsys):
    code, _, err = run(capsys, "fetch", "cifar", "--data-dir", tmp_path)
    assert code == 2 and "cifar" in err


def test_train_writes_one_record(tmp_path, data_dir, capsys):
    code, out, err = run(
        capsys, "train", "--dataset", "wdbc", "--family", "kwta", "--M", 4, "--d", 3, "--seed", 42,
        "--epochs", 2, "--data-dir", data_dir, "--out-dir", tmp_path,
    )
    assert code == 0
    assert [p.name for p in tmp_path.iterdir()] == ["wdbc_kwta_M4_d3_seed42.json"]
    fields = out.strip().split("\t")
    assert fields[:5] == ["wdbc", "kwta", "M=4", "d=3", "seed=42"]
    assert fields[5].startswith("test_acc=") and fields[6].startswith("wall=")
    assert "effective config" in err and "epochs = 2  [flag]" in err


def test_train_reproducible_bytes_modulo_wall_time(tmp_path, data_dir, capsys):
    docs = []
    for name in ("a", "b"):
        run(capsys, "train", "--dataset", "wdbc", "--M", 2, "--epochs", 3, "--seed", 7,
            "--data-dir", data_dir, "--out-dir", tmp_path / name)
        doc = json.loads(next((tmp_path / name).glob("*.json")).read_text())
        doc.pop("wall_time")
        docs.append(json.dumps(doc, sort_keys=True))
    assert docs[0] == docs[1]


def test_train_member_output_flag(tmp_path, data_dir, capsys):
    code, _, err = run(capsys, "train", "--M", 2, "--epochs", 1, "--member-output", "logits",
                       "--data-dir", data_dir, "--out-dir", tmp_path)
    assert code == 0 and "member_output = 'logits'  [flag]" in err
    doc = json.loads(next(tmp_path.glob("*.json")).read_text())
    assert doc["config"]["member_output"] == "logits"


def test_config_precedence(tmp_path, data_dir, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"epochs": 4, "hidden_dim": 12, "batch_size": 64}))
    code, _, err = run(
        capsys, "train", "--preset", "paper", "--config", cfg, "--set", "hidden_dim=9", "--set", "batch_size=50",
        "--batch-size", 25, "--data-dir", data_dir, "--out-dir", tmp_path / "o",
    )
    assert code == 0
    assert "epochs = 4  [" in err and str(cfg) in err
    assert "hidden_dim = 9  [--set]" in err
    assert "batch_size = 25  [flag]" in err
    assert "momentum = 0.9  [preset paper]" in err
    doc = json.loads(next((tmp_path / "o").glob("*.json")).read_text())
    assert (doc["config"]["epochs"], doc["config"]["hidden_dim"], doc["config"]["batch_size"]) == (4, 9, 25)


@pytest.mark.parametrize("bad", [["--set", "learning_rate=1"], ["--set", "nokey"], ["--set", "epochs=x"]])
def test_bad_overrides_are_usage_errors(tmp_path, data_dir, capsys, bad):
    code, _, err = run(capsys, "train", *bad, "--data-dir", data_dir, "--out-dir", tmp_path)
    assert code == 2 and "usage error" in err
    assert not tmp_path.exists() or not list(tmp_path.iterdir())


def test_unknown_key_in_config_file(tmp_path, data_dir, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"lr": 0.1}))
    assert run(capsys, "train", "--config", cfg, "--data-dir", data_dir)[0] == 2


def test_missing_dataset_exits_1(tmp_path, capsys):
    code, _, err = run(capsys, "train", "--dataset", "mnist", "--data-dir", tmp_path, "--out-dir", tmp_path / "o")
    assert code == 1 and "fetch mnist" in err


def test_grid_then_resume_then_report(tmp_path, data_dir, capsys):
    args = ["grid", "--dataset", "wdbc", "--variants", "kwta:3,cooperative", "--Ms", "2", "--seeds", "42,1234",
            "--epochs", 2, "--data-dir", data_dir, "--out-dir", tmp_path / "runs"]
    before = digest_tree(data_dir)
    code, out, _ = run(capsys, *args)
    assert code == 0 and len(out.strip().splitlines()) == 4 and "(existing)" not in out
    code, out, _ = run(capsys, *args)
    assert code == 0 and out.count("(existing)") == 4
    assert digest_tree(data_dir) == before

    code, md, _ = run(capsys, "report", tmp_path / "runs", "--grouping", "kwta:3,cooperative")
    assert code == 0 and "## WDBC, 2 sub-networks" in md
    assert (tmp_path / "runs" / "report.md").read_text() == md
    report = json.loads((tmp_path / "runs" / "report.json").read_text())
    assert [c["n"] for c in report["tables"][0]["columns"]] == [2, 2]


def test_grid_paper_preset_enumerates_240(tmp_path, data_dir, capsys, monkeypatch):
    import kwta_ensemble.cli as cli

    captured = {}

    def fake_run_grid(configs, out_dir, **kw):
        captured["configs"] = configs
        return []

    monkeypatch.setattr(cli, "run_grid", fake_run_grid)
    code, _, err = run(capsys, "grid", "--dataset", "wdbc", "--preset", "paper", "--data-dir", data_dir, "--out-dir", tmp_path)
    assert code == 0 and "grid: 240 runs" in err
    assert len(captured["configs"]) == 240


def test_grid_exit_1_only_when_all_fail(tmp_path, capsys, monkeypatch):
    import kwta_ensemble.cli as cli
    from kwta_ensemble.train import RunRecord, TrainConfig

    def records(statuses):
        out = []
        for i, s in enumerate(statuses):
            r = RunRecord(TrainConfig(seed=i), test_accuracy=0.9)
            r.status = s
            out.append(r)
        return out

    for statuses, expected in ((["ok", "failed"], 0), (["failed", "failed"], 1)):
        monkeypatch.setattr(cli, "run_grid", lambda *a, s=statuses, **k: records(s))
        assert run(capsys, "grid", "--out-dir", tmp_path)[0] == expected


def test_report_empty_directory(tmp_path, capsys):
    code, _, err = run(capsys, "report", tmp_path)
    assert code == 1 and "no records" in err


def test_gradcheck_passes(capsys):
    code, out, _ = run(capsys, "gradcheck")
    assert code == 0
    lines = out.strip().splitlines()
    assert len(lines) == 7 and all(line.startswith("PASS") for line in lines[:6])


def test_gradcheck_catches_corrupted_kwta_backward(capsys, monkeypatch):
    # straight-through on every unit instead of winners only
    monkeypatch.setattr(nn, "kwta_backward", lambda grad, mask: np.array(grad, dtype=float))
    code, out, _ = run(capsys, "gradcheck")
    assert code == 1
    fail = [line for line in out.splitlines() if line.startswith("FAIL")]
    assert fail and all("kwta" in line for line in fail)
    assert "worst at" in fail[0] and "[" in fail[0]


def test_version_flag(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["--version"])
    assert exc.value.code == 0
    assert capsys.readouterr().out.strip() == "0.1.0"
