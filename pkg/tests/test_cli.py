import json

import pytest

from dumpy.cli import main


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


def jsonl(text):
    return [json.loads(line) for line in text.splitlines() if line.strip()]


@pytest.fixture
def workspace(tmp_path, capsys):
    assert run(capsys, "gen", "--out", tmp_path / "db.bin", "--count", 3000, "--n", 64, "--seed", 1)[0] == 0
    assert run(capsys, "gen", "--out", tmp_path / "q.bin", "--count", 5, "--n", 64, "--seed", 2)[0] == 0
    assert run(capsys, "gen", "--out", tmp_path / "nq.bin", "--count", 5, "--noisy-from", tmp_path / "db.bin",
               "--snr", 25)[0] == 0
    return tmp_path


def test_build_query_eval_stats(workspace, capsys):
    d = workspace
    code, out, _ = run(capsys, "build", d / "db.bin", "--index", d / "idx", "--w", 8, "--th", 60,
                       "--format", "jsonl")
    assert code == 0
    rec = jsonl(out)[0]
    assert rec["series"] == 3000 and rec["mode"] == "serial"

    code, out, _ = run(capsys, "query", d / "q.bin", "--index", d / "idx", "--k", 3, "--mode", "exact",
                       "--format", "jsonl")
    rows = jsonl(out)
    assert code == 0 and len(rows) == 5 and all(len(r["ordinals"]) == 3 for r in rows)

    code, out, _ = run(capsys, "eval", d / "db.bin", d / "q.bin", "--index", d / "idx", "--k", 3,
                       "--mode", "exact", "--cache", d / "gt", "--format", "jsonl")
    ev = jsonl(out)[0]
    assert code == 0 and ev["map"] == 1.0 and ev["error_ratio"] == pytest.approx(1.0)

    code, out, _ = run(capsys, "eval", d / "db.bin", d / "nq.bin", "--index", d / "idx", "--k", 1,
                       "--mode", "fuzzy", "--nbr", 3, "--format", "jsonl")
    assert code == 0 and 0.0 <= jsonl(out)[0]["map"] <= 1.0

    code, out, _ = run(capsys, "stats", "--index", d / "idx")
    assert code == 0 and "fill_factor" in out.splitlines()[0]


def test_parallel_build_and_env(workspace, capsys, monkeypatch):
    d = workspace
    monkeypatch.setenv("DUMPY_DIR", str(d / "env"))
    code, out, _ = run(capsys, "build", d / "db.bin", "--parallel", "--workers", 2, "--w", 8, "--th", 60,
                       "--fuzzy", 0.2, "--format", "jsonl")
    assert code == 0 and "overlap_fraction" in jsonl(out)[0]
    assert (d / "env" / "tree.bin").exists()


def test_config_file_precedence(workspace, capsys):
    d = workspace
    (d / "cfg.json").write_text(json.dumps({"th": 45, "w": 8, "binary-split": True}))
    code, out, _ = run(capsys, "build", d / "db.bin", "--index", d / "c1", "--config", d / "cfg.json",
                       "--format", "jsonl")
    assert code == 0
    cfg = json.loads((d / "c1" / "config.json").read_text())
    assert cfg["th"] == 45 and cfg["split"] == "binary"
    code, _, _ = run(capsys, "build", d / "db.bin", "--index", d / "c2", "--config", d / "cfg.json",
                     "--th", 70, "--format", "jsonl")
    assert json.loads((d / "c2" / "config.json").read_text())["th"] == 70


def test_config_file_unknown_key(workspace, capsys):
    (workspace / "bad.json").write_text(json.dumps({"nonsense": 1}))
    with pytest.raises(SystemExit):
        main(["stats", "--index", str(workspace), "--config", str(workspace / "bad.json")])


def test_oracle_and_sax(workspace, capsys):
    d = workspace
    code, out, _ = run(capsys, "oracle", d / "db.bin", d / "q.bin", "--k", 2, "--format", "jsonl")
    assert code == 0 and len(jsonl(out)) == 5
    code, _, _ = run(capsys, "sax", d / "db.bin", "--out", d / "s.bin", "--w", 8)
    assert code == 0 and (d / "s.bin").stat().st_size == 16 + 3000 * 8


def test_errors_exit_code(workspace, capsys, monkeypatch):
    code, _, err = run(capsys, "stats", "--index", workspace / "missing")
    assert code == 2 and "dumpy:" in err
    code, _, err = run(capsys, "build", workspace / "db.bin", "--index", workspace / "x", "--w", 7)
    assert code == 2
    monkeypatch.delenv("DUMPY_DIR", raising=False)
    with pytest.raises(SystemExit):
        main(["stats"])


def test_table_output(workspace, capsys):
    code, out, _ = run(capsys, "gen", "--out", workspace / "t.bin", "--count", 3, "--n", 8)
    lines = out.splitlines()
    assert code == 0 and lines[0].split() == ["path", "count", "n"] and lines[1].split()[1:] == ["3", "8"]
