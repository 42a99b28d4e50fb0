import json

import pytest

from musasplat.cli import build_parser, main, output_root


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    return tmp_path_factory.mktemp("cli")


def test_help_lists_every_verb(capsys):
    with pytest.raises(SystemExit):
        main(["--help"])
    text = capsys.readouterr().out
    for verb in ("gen-scene", "train", "eval", "bench-agg", "grad-check", "report"):
        assert verb in text


def test_output_root_env(monkeypatch, tmp_path):
    monkeypatch.setenv("MUSASPLAT_OUT", str(tmp_path))
    assert output_root() == tmp_path


def test_gen_scene_is_deterministic(workdir, capsys):
    for name in ("a", "b"):
        assert main(["gen-scene", "--seed", "3", "--size", "32", "--out", str(workdir / name)]) == 0
    assert (workdir / "a" / "scene.json").read_bytes() == (workdir / "b" / "scene.json").read_bytes()
    assert "overlap" in capsys.readouterr().out


def test_train_eval_report_roundtrip(workdir, capsys):
    scene = str(workdir / "a")
    run = workdir / "run"
    assert main(["train", "--scene", scene, "--iterations", "3", "--stage1-iterations", "5",
                 "--out", str(run)]) == 0
    report = json.loads((run / "report.json").read_text())
    assert report["iterations"] == 3 and report["frozen_backbone_unchanged"]
    assert (run / "checkpoints" / "final.npz").exists() and (run / "renders.png").exists()
    assert len((run / "metrics.jsonl").read_text().splitlines()) == 3

    for k in (1, 2):
        assert main(["eval", "--checkpoint", str(run / "checkpoints" / "final"), "--scene", scene,
                     "--out", str(workdir / f"eval{k}")]) == 0
    m1 = json.loads((workdir / "eval1" / "metrics.json").read_text())["metrics"]
    m2 = json.loads((workdir / "eval2" / "metrics.json").read_text())["metrics"]
    assert m1 == m2
    assert abs(m1["train_psnr_mean"] - report["metrics"]["train_psnr_mean"]) < 0.01

    assert main(["report", str(run), "--out", str(workdir / "summary.md")]) == 0
    assert "| full | 0 | 3 |" in (workdir / "summary.md").read_text()


def test_eval_errors(workdir, capsys):
    scene = str(workdir / "a")
    assert main(["eval", "--checkpoint", str(workdir / "nope"), "--scene", scene]) == 2
    assert main(["eval", "--checkpoint", str(workdir / "run" / "checkpoints" / "final"), "--scene", scene,
                 "--held-out", "held_out_07"]) == 2
    assert "held_out_07" in capsys.readouterr().err


def test_bench_agg(workdir, capsys):
    assert main(["bench-agg", "--views", "2,5", "--repeats", "2", "--out", str(workdir / "bench")]) == 0
    rows = (workdir / "bench" / "bench.csv").read_text().splitlines()
    assert rows[0].startswith("views,strategy") and len(rows) == 5
    assert "| 5 |" in capsys.readouterr().out


def test_unknown_preset_is_rejected():
    with pytest.raises(SystemExit):
        build_parser().parse_args(["train", "--scene", "x", "--preset", "bogus"])
