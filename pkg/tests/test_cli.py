import logging

import pytest

from tokenseek.cli import main

TRAIN_FLAGS = ["--lr", "1e-2", "--warmup", "1", "--accum", "4"]


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert main(["init", str(d / "m.bin"), "--max-seq", "48"]) == 0
    assert main(["toy-data", str(d / "c.jsonl"), "--count", "8"]) == 0
    assert main(["score", str(d / "m.bin"), str(d / "c.jsonl"), str(d / "s.csv")]) == 0
    return d


def test_usage_errors_exit_1(workspace, capsys):
    assert main(["frobnicate"]) == 1
    assert main(["memreport"]) == 1
    assert main(["memreport", "--config", "1,2,3"]) == 1
    assert main(["train", str(workspace / "m.bin"), str(workspace / "c.jsonl"), "--mode", "seek"]) == 1
    assert "tokenseek score" in capsys.readouterr().err


def test_data_errors_exit_2(workspace, tmp_path):
    assert main(["score", str(tmp_path / "none.bin"), str(workspace / "c.jsonl"), str(tmp_path / "s")]) == 2
    bad = tmp_path / "bad.jsonl"
    bad.write_text("{}\n")
    assert main(["train", str(workspace / "m.bin"), str(bad)]) == 2
    assert main(["inspect", str(workspace / "s.csv"), "no-such-id"]) == 2
    assert main(["score", str(workspace / "m.bin"), str(workspace / "c.jsonl"), str(tmp_path / "s"),
                 "--alpha", "0", "--beta", "0"]) == 2


def test_train_outputs_are_deterministic(workspace, tmp_path):
    args = ["train", str(workspace / "m.bin"), str(workspace / "c.jsonl"), "--mode", "seek", "--ratio", "0.3",
            "--scores", str(workspace / "s.csv"), *TRAIN_FLAGS]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    assert main(args + ["--out", str(tmp_path / "b")]) == 0
    for name in ("checkpoint.bin", "metrics.csv", "memory.csv", "memory.txt"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert main(["memreport", "--run", str(tmp_path / "a")]) == 0


def test_out_env_and_full_warning(workspace, tmp_path, monkeypatch, caplog):
    monkeypatch.setenv("TOKENSEEK_OUT", str(tmp_path))
    with caplog.at_level(logging.WARNING):
        assert main(["train", str(workspace / "m.bin"), str(workspace / "c.jsonl"), "--ratio", "0.5",
                     *TRAIN_FLAGS]) == 0
    assert (tmp_path / "run" / "metrics.csv").is_file()
    assert any("ignores --ratio" in r.message for r in caplog.records)


def test_config_file_precedence(workspace, tmp_path, capsys):
    cfg = tmp_path / "memreport.cfg"
    cfg.write_text("# defaults\nconfig = 1,16,2,32,259,40\nratios=0.5\n")
    assert main(["--config-file", str(cfg), "memreport"]) == 0
    out = capsys.readouterr().out
    assert "s=40" in out and "\n0.5," in out
    assert main(["--config-file", str(cfg), "memreport", "--ratios", "0.25"]) == 0
    assert "\n0.25," in capsys.readouterr().out
    cfg.write_text("bogus=1\n")
    assert main(["--config-file", str(cfg), "memreport"]) == 1


def test_memreport_constants(capsys):
    assert main(["memreport", "--config", "1,7168,128,28672,32000,4096", "--ratios", "0.1"]) == 0
    out = capsys.readouterr().out
    assert "total=2176843776" in out and "weights(H^2)=51380224" in out
    assert "0.1,410,214958080,0.10009766," in out


def test_inspect_full_ratio_marks_everything(workspace, capsys):
    assert main(["inspect", str(workspace / "s.csv"), "reverse-0-0", "--ratio", "1.0",
                 "--corpus", str(workspace / "c.jsonl")]) == 0
    lines = capsys.readouterr().out.splitlines()
    rows = lines[lines.index("token_index,token,selected,i1,i2,fused") + 1:]
    assert rows and all(r.split(",")[-4] == "1" for r in rows)


def test_gradcheck_and_render(workspace, capsys):
    assert main(["gradcheck"]) == 0
    assert "FAIL" not in capsys.readouterr().out
    assert main(["render", str(workspace / "c.jsonl"), "--id", "reverse-0-1"]) == 0
    assert "### Response:\n" in capsys.readouterr().out


def test_ablate_writes_tables(workspace, tmp_path):
    assert main(["ablate", str(workspace / "m.bin"), str(workspace / "c.jsonl"), "--ratios", "0.5",
                 "--seeds", "0,1,2", "--scores", str(workspace / "s.csv"), *TRAIN_FLAGS,
                 "--out", str(tmp_path)]) == 0
    assert (tmp_path / "runs.csv").read_text().count("\n") == 8
    assert main(["ablate", str(workspace / "m.bin"), str(workspace / "c.jsonl"), "--seeds", "0,1"]) == 1
