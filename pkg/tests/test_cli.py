from __future__ import annotations

import pytest

from rtpos import io
from rtpos.cli import build_parser, main

SMALL = ["--scene", "canyon", "--max-ttis", "3", "--tti-step", "20", "--seed", "0"]


def header(path):
    return path.read_text().splitlines()[0].split(",")


@pytest.mark.parametrize("command, files", [
    ("trace", {"paths.csv": io.PATH_HEADER}),
    ("aoa", {"angles.csv": ["seed", *io.ANGLE_HEADER]}),
    ("localize", {"positions.csv": io.POSITION_HEADER, "candidates.csv": io.CANDIDATE_HEADER,
                  "clusters.csv": io.CLUSTER_HEADER, "summary.csv": io.SUMMARY_HEADER}),
    ("track", {"tracks.csv": ["seed", *io.TRACK_HEADER], "positions.csv": io.POSITION_HEADER}),
    ("perturb", {"positions.csv": io.POSITION_HEADER, "scene_perturbed_seed0.yaml": None}),
])
def test_subcommands_write_documented_outputs(tmp_path, command, files):
    assert main([command, *SMALL, "--out-dir", str(tmp_path)]) == 0
    for name, hdr in files.items():
        assert (tmp_path / name).exists(), name
        if hdr is not None:
            assert header(tmp_path / name) == hdr


def test_sweep_with_cdf(tmp_path):
    rc = main(["sweep", *SMALL, "--dimension", "n_bs", "--values", "1", "2", "--emit-cdf", "--out-dir", str(tmp_path)])
    assert rc == 0
    rows = io.read_rows(tmp_path / "summary.csv")
    assert [r["label"] for r in rows] == ["n_bs=1", "n_bs=2"]
    for name in ("cdf_n_bs_1.csv", "cdf_n_bs_2.csv"):
        assert header(tmp_path / name) == io.CDF_HEADER


def test_perturbed_scene_reloads(tmp_path):
    from rtpos.scene import load_scene
    assert main(["perturb", *SMALL, "--wall-sigma", "2", "--out-dir", str(tmp_path)]) == 0
    assert load_scene(tmp_path / "scene_perturbed_seed0.yaml").rrus


def test_threads_give_identical_positions(tmp_path):
    args = ["localize", "--scene", "canyon", "--max-ttis", "3", "--tti-step", "20", "--seed", "0", "--seed", "1"]
    assert main([*args, "--out-dir", str(tmp_path / "a")]) == 0
    assert main([*args, "--threads", "2", "--out-dir", str(tmp_path / "b")]) == 0
    assert (tmp_path / "a" / "positions.csv").read_text() == (tmp_path / "b" / "positions.csv").read_text()


def test_config_file_and_override(tmp_path):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("scene: canyon\nseeds: [5]\nmax_ttis: 2\ntti_step: 30\n")
    assert main(["localize", "--config", str(cfg), "--out-dir", str(tmp_path)]) == 0
    rows = io.read_rows(tmp_path / "positions.csv")
    assert {r["seed"] for r in rows} == {"5"} and len(rows) == 2


@pytest.mark.parametrize("argv", [
    ["trace", "--scene", "atlantis"],
    ["localize", "--scene", "canyon", "--threads", "0"],
    ["localize", "--scene", "canyon", "--n-bs", "0"],
])
def test_errors_exit_2(tmp_path, capsys, argv):
    assert main([*argv, "--out-dir", str(tmp_path)]) == 2
    assert "rtpos: error:" in capsys.readouterr().err


def test_bad_config_key_exit_2(tmp_path):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("colour: blue\n")
    assert main(["trace", "--config", str(cfg), "--out-dir", str(tmp_path)]) == 2


def test_unknown_subcommand_is_usage_error():
    with pytest.raises(SystemExit) as e:
        build_parser().parse_args(["teleport"])
    assert e.value.code == 2
