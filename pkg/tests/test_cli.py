import subprocess
import sys

import pytest

from fewmatch.cli import main, read_config


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "data"
    assert main(["synth", "--out", str(out), "--num-classes", "8", "--order-pairs", "2", "--seed", "1"]) == 0
    return out


def test_synth_summary(data, capsys, tmp_path):
    assert main(["synth", "--out", str(tmp_path / "d"), "--order-pairs", "4"]) == 0
    out = capsys.readouterr().out
    assert "test: 24 classes, 240 videos" in out
    assert "reversed pairs: 12 (24 classes)" in out
    assert "test_c006 <-> test_c007" in out


def test_synth_deterministic(tmp_path):
    for name in ("a", "b"):
        assert main(["synth", "--out", str(tmp_path / name), "--num-classes", "6"]) == 0
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    assert files
    for f in files:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def _eval(data, out, *extra):
    return main(["eval", "--data", str(data), "--out", str(out), "--episodes", "30", *extra])


def test_eval_outputs_and_shared_episodes(data, tmp_path):
    assert _eval(data, tmp_path, "--method", "chamfer_qs,classifier", "--ways", "3,5") == 0
    summary = (tmp_path / "summary.tsv").read_text().splitlines()
    rows = [l for l in summary if not l.startswith("#")][1:]
    assert [r.split("\t")[:2] for r in rows] == [["chamfer_qs", "3"], ["classifier", "3"],
                                                 ["chamfer_qs", "5"], ["classifier", "5"]]
    a = (tmp_path / "results_chamfer_qs_way5.tsv").read_text()
    b = (tmp_path / "results_classifier_way5.tsv").read_text()
    sha = [l for l in a.splitlines() if l.startswith("# episodes_sha256")]
    assert sha and sha == [l for l in b.splitlines() if l.startswith("# episodes_sha256")]
    assert "# fewmatch 0.1.0" in a and "# config_sha256:" in a


def test_eval_reproducible_across_workers(data, tmp_path):
    args = ("--method", "chamfer_qs,diag", "--ways", "5")
    assert _eval(data, tmp_path / "a", *args) == 0
    assert _eval(data, tmp_path / "b", *args, "--workers", "2") == 0
    for name in ("results_chamfer_qs_way5.tsv", "results_diag_way5.tsv", "summary.tsv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_config_file_and_override(data, tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text(f"# eval run\ndata = {data}\nmethod = mean\nepisodes = 10\nways = 3\n")
    assert main(["eval", "--config", str(cfg), "--out", str(tmp_path / "o"), "--method", "max"]) == 0
    assert (tmp_path / "o" / "results_max_way3.tsv").exists()
    assert read_config(cfg)["episodes"] == "10"


def test_env_seed_override(data, tmp_path, monkeypatch):
    monkeypatch.setenv("FEWMATCH_SEED", "42")
    assert _eval(data, tmp_path, "--ways", "3") == 0
    assert "# seed: 42" in (tmp_path / "summary.tsv").read_text()


def test_train_and_eval_checkpoint(data, tmp_path):
    rc = main(["train", "--data", str(data), "--out", str(tmp_path), "--projection-dim", "8", "--way", "3",
               "--max-epochs", "2", "--episodes-per-epoch", "10", "--val-episodes", "10"])
    assert rc == 0
    log = (tmp_path / "train_log.tsv").read_text().splitlines()
    assert log[0].startswith("# fewmatch") and any(l.startswith("epoch\t") for l in log)
    assert _eval(data, tmp_path / "e", "--ways", "3", "--checkpoint", str(tmp_path / "checkpoint.fpp")) == 0


def test_train_identity_refused(data, tmp_path, capsys):
    assert main(["train", "--data", str(data), "--out", str(tmp_path), "--projection", "identity"]) == 1
    assert "no trainable parameters except temperature" in capsys.readouterr().err
    rc = main(["train", "--data", str(data), "--out", str(tmp_path), "--projection", "identity",
               "--allow-tau-only", "--way", "3", "--max-epochs", "1", "--episodes-per-epoch", "5",
               "--val-episodes", "5"])
    assert rc == 0


def test_train_missing_val(data, tmp_path, capsys):
    root = tmp_path / "noval"
    (root / "features").mkdir(parents=True)
    lines = (data / "manifest.tsv").read_text().splitlines()
    kept = [lines[0]] + [l for l in lines[1:] if l.split("\t")[2] != "val"]
    (root / "manifest.tsv").write_text("\n".join(kept) + "\n")
    for l in kept[1:]:
        path = l.split("\t")[3]
        (root / path).write_bytes((data / path).read_bytes())
    assert main(["train", "--data", str(root), "--out", str(tmp_path / "o")]) == 2
    assert "validation split required" in capsys.readouterr().err


def test_exit_codes(tmp_path, capsys):
    assert main([]) == 1
    assert main(["eval", "--no-such-flag"]) == 1
    assert main(["eval", "--shot", "two"]) == 1
    assert main(["eval", "--data", str(tmp_path / "missing"), "--out", str(tmp_path)]) == 2
    bad = tmp_path / "bad.cfg"
    bad.write_text("nonsense_key = 3\n")
    assert main(["check", "--config", str(bad)]) == 1


def test_check_pass_and_fault(capsys):
    assert main(["check"]) == 0
    out = capsys.readouterr().out
    assert "all checks passed" in out and "16040 paths" in out and "parameters" in out
    assert main(["check", "--inject-fault", "chamfer_sign"]) == 3
    assert "FAIL  chamfer_bruteforce" in capsys.readouterr().out


def test_dump_correspondences(data, tmp_path):
    out = tmp_path / "c.tsv"
    assert main(["dump-correspondences", "--data", str(data), "--way", "3", "--out", str(out)]) == 0
    body = [l for l in out.read_text().splitlines() if not l.startswith("#")]
    assert body[0] == "query_clip\tsupport_video\tsupport_clip\tsimilarity"
    assert len(body) == 1 + 3 * 8


def test_console_entry_point_help():
    r = subprocess.run([sys.executable, "-m", "fewmatch.cli", "eval", "--help"], capture_output=True, text=True)
    assert r.returncode == 0 and "default: 1000" in r.stdout
