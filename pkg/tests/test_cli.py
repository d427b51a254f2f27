import filecmp
import json

import pandas as pd
import pytest
import yaml

from statfuse import cli
from statfuse.synthbench import SynthConfig, fusion_steps

SIM = {"population": 6000, "n_donor": 1200, "n_recipient": 400, "n_replicates": 4, "seed": 2}


def _same_dirs(a, b, skip=("run_manifest.json",)):
    def files(root):
        return sorted(str(p.relative_to(root)) for p in root.rglob("*") if p.is_file() and p.name not in skip)

    names = files(a)
    assert names == files(b)
    _, mismatch, errors = filecmp.cmpfiles(a, b, names, shallow=False)
    assert not mismatch and not errors, mismatch


def _manifest_core(path):
    doc = json.loads(path.read_text())
    return {k: v for k, v in doc.items() if k not in ("timestamp", "wall_seconds")}


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "synth.yaml").write_text(yaml.safe_dump(SIM))
    assert cli.run(["simulate", "--config", str(root / "synth.yaml"), "--out", str(root / "data")]) == 0
    cfg = SynthConfig(**SIM)
    spec = {"steps": fusion_steps(cfg), "predictors": cfg.predictors, "M": 4, "seed": 3, "K": 100,
            "train": {"leaf_grid": [8], "folds": 2, "max_iterations": 40}}
    (root / "spec.yaml").write_text(yaml.safe_dump(spec))
    code = cli.run(["train", "--donor", str(root / "data" / "donor.csv"), "--spec", str(root / "spec.yaml"),
                    "--out", str(root / "bundle")])
    assert code == 0
    return root


def test_simulate_outputs(work):
    names = {p.name for p in (work / "data").iterdir()}
    assert {"donor.csv", "recipient.csv", "truth.json", "run_manifest.json"} <= names
    man = json.loads((work / "data" / "run_manifest.json").read_text())
    assert man["command"] == "simulate" and len(man["config_hash"]) == 64


def test_train_writes_bundle_and_manifest(work):
    man = json.loads((work / "bundle" / "run_manifest.json").read_text())
    assert man["command"] == "train"
    assert set(man) >= {"versions", "config_hash", "fingerprints", "wall_seconds", "timestamp"}
    assert man["fingerprints"]["donor"]


def test_train_idempotent(work):
    args = ["train", "--donor", str(work / "data" / "donor.csv"), "--spec", str(work / "spec.yaml"),
            "--out", str(work / "bundle2")]
    assert cli.run(args) == 0
    _same_dirs(work / "bundle", work / "bundle2")
    assert _manifest_core(work / "bundle" / "run_manifest.json") == \
        _manifest_core(work / "bundle2" / "run_manifest.json")


def _fuse(work, out, *extra):
    return cli.run(["fuse", "--bundle", str(work / "bundle"), "--recipient", str(work / "data" / "recipient.csv"),
                    "--implicates", "4", "--seed", "7", "--out", str(work / out), *extra])


def test_fuse_byte_identical(work):
    assert _fuse(work, "f1") == 0
    assert _fuse(work, "f2") == 0
    _same_dirs(work / "f1", work / "f2")
    assert _manifest_core(work / "f1" / "run_manifest.json") == _manifest_core(work / "f2" / "run_manifest.json")
    assert _fuse(work, "f3", "--chunk-rows", "33") == 0
    _same_dirs(work / "f1", work / "f3")
    assert _fuse(work, "f4", "--memory-mb", "0.01") == 0
    _same_dirs(work / "f1", work / "f4")
    chunk = json.loads((work / "f4" / "run_manifest.json").read_text())["chunk_rows"]
    assert 1 <= chunk < 400


def test_fuse_long(work):
    assert _fuse(work, "flong", "--long") == 0
    f = pd.read_csv(work / "flong" / "implicates.csv")
    assert len(f) == 4 * 400 and list(f.columns[:2]) == ["id", "implicate"]


def test_analyze(work):
    assert _fuse(work, "fa") == 0
    out = work / "an" / "elec.csv"
    code = cli.run(["analyze", "--recipient", str(work / "data" / "recipient.csv"), "--fused", str(work / "fa"),
                    "--stat", "mean", "--var", "elec", "--by", "region", "--replicate-weights",
                    "--out", str(out)])
    assert code == 0
    t = pd.read_csv(out)
    assert len(t) == 4 and (t["moe"] > 0).all()
    assert (work / "an" / "elec.csv.manifest.json").exists()


def test_validate(work):
    code = cli.run(["validate", "--bundle", str(work / "bundle"), "--donor", str(work / "data" / "donor.csv"),
                    "--subset-vars", "region,tenure", "--implicates", "3", "--seed", "1",
                    "--out", str(work / "val")])
    assert code == 0
    names = {p.name for p in (work / "val").iterdir()}
    assert {"cells.csv", "value_added.svg", "moe_ratio.csv", "run_manifest.json"} <= names


def test_missing_file_exit_2(work, capsys):
    code = cli.run(["fuse", "--bundle", str(work / "bundle"), "--recipient", str(work / "nope.csv"),
                    "--out", str(work / "fx")])
    assert code == 2
    assert "nope.csv" in capsys.readouterr().err


def test_unknown_flag_exit_1(capsys):
    assert cli.run(["fuse", "--bogus"]) == 1
    assert "usage" in capsys.readouterr().err.lower()
    assert cli.run(["frobnicate"]) == 1


def test_contract_error_exit_1(work, capsys):
    # the donor carries the fusion variables, so it is not a valid recipient
    code = cli.run(["fuse", "--bundle", str(work / "bundle"), "--recipient", str(work / "data" / "donor.csv"),
                    "--out", str(work / "fbad")])
    assert code == 1
    assert "fusion variable present" in capsys.readouterr().err


def test_threads_env_override(monkeypatch):
    monkeypatch.setenv(cli.THREADS_ENV, "1")
    assert cli._threads(8) == 1
    monkeypatch.setenv(cli.THREADS_ENV, "zero")
    with pytest.raises(cli.UsageError):
        cli._threads(None)
    monkeypatch.delenv(cli.THREADS_ENV)
    assert cli._threads(None) == 1
    with pytest.raises(cli.UsageError):
        cli._threads(0)


def test_chunk_rows_for():
    assert cli.chunk_rows_for(1, 1024) == 1024
    assert cli.chunk_rows_for(1e-9, 1024) == 1
    with pytest.raises(cli.UsageError):
        cli.chunk_rows_for(0, 10)


def test_version(capsys):
    assert cli.run(["--version"]) == 0
    assert "statfuse" in capsys.readouterr().out
