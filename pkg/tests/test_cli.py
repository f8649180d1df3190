import json
import subprocess
import sys

import numpy as np
import pytest

import golden
from occdms.backends import format_scenario, mock_embedding
from occdms.cli import main
from occdms.dataset import Manifest, SampleRecord, read_manifest, write_manifest
from occdms.identity import IdentityDB
from occdms.imaging import Image, write_pnm


def run_cli(capsys, *argv):
    rc = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return rc, out, err


def domain_error(err):
    line = err.strip().splitlines()[-1]
    return json.loads(line)


@pytest.fixture
def corpus(tmp_path):
    """12 images over 4 persons; two exact duplicates and one near-black frame."""
    rng = np.random.default_rng(0)
    (tmp_path / "img").mkdir()
    samples = []
    distinct = [Image(rng.integers(40, 200, (16, 16), dtype=np.uint8)) for _ in range(10)]
    images = distinct + [distinct[0], distinct[3]]
    images[5] = Image.filled(16, 16, 3)
    for i, img in enumerate(images):
        path = f"img/{i:02d}.pnm"
        write_pnm(tmp_path / path, img)
        samples.append(SampleRecord(f"s{i:02d}", path, f"p{i % 4}", "open" if i % 3 else "shut", "ir"))
    manifest = tmp_path / "manifest.tsv"
    write_manifest(manifest, Manifest(samples, ("open", "shut")))
    return manifest


def test_version_goes_to_stderr(capsys):
    rc, out, err = run_cli(capsys, "--version")
    assert rc == 0 and out == "" and "0.1.0" in err


def test_usage_errors_exit_2(capsys):
    assert run_cli(capsys)[0] == 2
    assert run_cli(capsys, "bogus")[0] == 2
    assert run_cli(capsys, "prep-split", "--manifest", "m", "--mode", "person", "--fractions", "0.6,0.2,0.2")[0] == 2
    assert run_cli(capsys, "prep-split", "--manifest", "m", "--mode", "person",
                   "--fractions", "0.5,0.5,0.5", "--seed", "1")[0] == 2
    assert run_cli(capsys, "run", "--scen", "x")[0] == 2
    assert run_cli(capsys, "run", "--unknown")[0] == 2


def test_domain_errors_exit_1(capsys, tmp_path):
    rc, out, err = run_cli(capsys, "prep-dedup", "--manifest", tmp_path / "missing.tsv")
    assert rc == 1 and out == ""
    rec = domain_error(err)
    assert rec["command"] == "prep-dedup" and rec["error"] == "FileNotFoundError"
    rc, _, err = run_cli(capsys, "run", "--frames", tmp_path)
    assert rc == 1 and "scenario" in domain_error(err)["message"]
    bad = tmp_path / "bad.cfg"
    bad.write_text("occlusion_alert_frames=0\n")
    s = tmp_path / "s.txt"
    s.write_text(format_scenario(golden.dual_occlusion()[0]))
    rc, _, err = run_cli(capsys, "run", "--scenario", s, "--config", bad)
    assert rc == 1 and domain_error(err)["error"] == "ConfigError"


def test_prep_chain(capsys, corpus, tmp_path):
    rc, out, err = run_cli(capsys, "prep-dedup", "--manifest", corpus, "--out", tmp_path / "d.tsv",
                           "--removed", tmp_path / "removed.tsv")
    assert rc == 0 and out == ""
    assert (tmp_path / "removed.tsv").read_text() == "s10\ts00\ns11\ts03\n"
    assert len(read_manifest(tmp_path / "d.tsv").samples) == 10

    rc, _, err = run_cli(capsys, "prep-filter", "--manifest", tmp_path / "d.tsv", "--out", tmp_path / "f.tsv")
    assert rc == 0 and "removed 1" in err
    assert "s05" not in {s.sample_id for s in read_manifest(tmp_path / "f.tsv").samples}

    for mode in ("person", "stratified"):
        args = ("prep-split", "--manifest", tmp_path / "f.tsv", "--mode", mode,
                "--fractions", "0.5,0.25,0.25", "--seed", 3)
        rc, first, _ = run_cli(capsys, *args)
        assert rc == 0
        rc, second, _ = run_cli(capsys, *args)
        assert first == second
        rows = [l.split("\t") for l in first.splitlines()[2:]]
        assert {r[5] for r in rows} == {"train", "val", "test"}
        if mode == "person":
            split_of = {}
            for r in rows:
                assert split_of.setdefault(r[2], r[5]) == r[5]


def test_enroll_identify(capsys, tmp_path):
    db = tmp_path / "ids.db"
    rc, out, _ = run_cli(capsys, "enroll", "--db", db, "--name", "ana", "--mock-seed", 1, "--dim", 16)
    assert rc == 0 and out == "1\tana\trgb=3\tir=0\n"
    rc, _, err = run_cli(capsys, "enroll", "--db", db, "--name", "x", "--mock-seed", 2, "--captures", 2)
    assert rc == 1 and domain_error(err)["error"] == "IdentityError"

    queries = tmp_path / "q.txt"
    lines = []
    for seed in (1, 50):
        e = mock_embedding(seed, 16, 0.05, 99)
        lines.append("rgb " + " ".join(repr(float(v)) for v in e.values))
    queries.write_text("\n".join(lines) + "\n")
    rc, out, _ = run_cli(capsys, "identify", "--db", db, "--embeddings", queries)
    rows = [l.split("\t") for l in out.splitlines()]
    assert rc == 0 and rows[0][:4] == ["0", "rgb", "match", "1"] and rows[1][2:4] == ["unmatched", "-"]
    before = db.read_bytes()
    rc, out, _ = run_cli(capsys, "identify", "--db", db, "--embeddings", queries, "--auto-register")
    assert out.splitlines()[1].split("\t")[2:4] == ["registered", "2"]
    assert len(IdentityDB.load(db)) == 2 and db.read_bytes() != before


def test_run_trace_and_figure(capsys, tmp_path):
    s = tmp_path / "s.txt"
    scenario, config, _ = golden.ir_switchover()
    s.write_text(format_scenario(scenario))
    args = ["run", "--scenario", s, "--set", "rgb_fail_switch_frames=30", "--set", "rgb_recover_frames=15"]
    rc, out, err = run_cli(capsys, *args, "--figure", tmp_path / "t.png")
    assert rc == 0 and out == golden.IR_SWITCHOVER_TRACE
    assert "final mode RGB_PRIMARY" in err
    assert (tmp_path / "t.png").read_bytes()[:4] == b"\x89PNG"
    cfg = tmp_path / "c.cfg"
    cfg.write_text("occlusion_alert_frames=10\n")
    s.write_text(format_scenario(golden.dual_occlusion()[0]))
    rc, out, _ = run_cli(capsys, "run", "--scenario", s, "--config", cfg, "--out", tmp_path / "t.tsv")
    assert rc == 0 and out == "" and (tmp_path / "t.tsv").read_text() == golden.DUAL_OCCLUSION_TRACE


def test_evaluate_id_and_sweep(capsys, tmp_path):
    rc, out, err = run_cli(capsys, "evaluate-id", "--registered", 4, "--unregistered", 3, "--queries", 5)
    assert rc == 0
    assert out.splitlines() == ["threshold,far,frr,misid,accuracy", "0.65,0.0,0.0,0.0,1.0"]
    assert "FA=0 FR=0" in err
    fig = tmp_path / "sweep.svg"
    args = ("sweep", "--registered", 4, "--unregistered", 3, "--queries", 5, "--thresholds", "0:1:11")
    rc, first, _ = run_cli(capsys, *args, "--figure", fig)
    rows = [l.split(",") for l in first.splitlines()[1:]]
    assert rc == 0 and len(rows) == 11
    assert [float(r[1]) for r in rows] == sorted((float(r[1]) for r in rows), reverse=True)
    svg = fig.read_bytes()
    run_cli(capsys, *args, "--figure", fig)
    assert fig.read_bytes() == svg
    assert run_cli(capsys, *args)[1] == first
    assert run_cli(capsys, "sweep", "--thresholds", "1,0.5")[0] == 1


def test_evaluate_gaze(capsys, tmp_path):
    pairs = tmp_path / "p.csv"
    pairs.write_text("truth,predicted\n1,1\n1,2\n2,2\n3,3\n")
    rc, out, err = run_cli(capsys, "evaluate-gaze", "--pairs", pairs, "--classes", 3,
                           "--names", "a,b,c", "--positive", 1, "--figure", tmp_path / "cm.png")
    assert rc == 0
    assert out == "truth\\pred,a,b,c\na,1,1,0\nb,0,1,0\nc,0,0,1\n"
    assert "accuracy 0.7500" in err and "positive-class recall (1): 0.5000" in err
    assert (tmp_path / "cm.png").exists()
    pairs.write_text("1,12\n")
    rc, _, err = run_cli(capsys, "evaluate-gaze", "--pairs", pairs)
    assert rc == 1 and domain_error(err)["error"] == "MetricError"


def test_module_entry_point():
    p = subprocess.run([sys.executable, "-m", "occdms", "--version"], capture_output=True, text=True)
    assert p.returncode == 0 and p.stdout == "" and p.stderr.startswith("occdms ")
