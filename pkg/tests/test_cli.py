import json
from pathlib import Path

import numpy as np
import pytest
from PIL import Image

from img2mesh import cli

TINY = """
[coarse]
steps = 20
num_points = 200
res_start = 16
res_end = 16

[refine]
steps = 3
batch = 1
grid_resolution = 16
res_start = 32
res_end = 32
texture_levels = 2
texture_log2_table = 10
texture_max_res = 32

[run]
eval_resolution = 32
eval_views = 4
chamfer_samples = 2000
"""

FIXTURE = Path(cli.__file__).parent / "data" / "sphere_rgba.png"


@pytest.fixture
def tiny_config(tmp_path):
    p = tmp_path / "tiny.ini"
    p.write_text(TINY)
    return str(p)


class TestConfig:
    def test_round_trip(self):
        cfg = cli.RunConfig()
        cfg.coarse.steps = 123
        cfg.prior.blur = False
        cfg.refine.lambda_rgb = 7.5
        text = cli.serialize_config(cfg)
        assert cli.serialize_config(cli.parse_config(text)) == text
        back = cli.parse_config(text)
        assert back.coarse.steps == 123 and back.prior.blur is False and back.refine.lambda_rgb == 7.5

    def test_unknown_key(self):
        with pytest.raises(cli.UserError, match="unknown key"):
            cli.parse_config("[coarse]\nstepz = 3\n")

    def test_unknown_section(self):
        with pytest.raises(cli.UserError, match="unknown section"):
            cli.parse_config("[extra]\na = 1\n")

    def test_bad_value(self):
        with pytest.raises(cli.UserError):
            cli.parse_config("[coarse]\nsteps = many\n")

    def test_compose_needs_second_prior(self):
        with pytest.raises(cli.UserError):
            cli.parse_config("[compose]\nmode = editing\n")
        cfg = cli.parse_config("[compose]\nmode = editing\n[prior]\nsecond = constant\n")
        assert cfg.compose_schedule().upper_start == 100.0

    def test_defaults_command(self, capsys):
        assert cli.main(["defaults"]) == cli.EXIT_OK
        assert cli.parse_config(capsys.readouterr().out) == cli.RunConfig()


class TestInputs:
    def test_missing_alpha(self, tmp_path):
        path = tmp_path / "rgb.png"
        Image.fromarray(np.zeros((16, 16, 3), np.uint8)).save(path)
        with pytest.raises(cli.UserError, match="alpha"):
            cli.read_rgba(path)
        assert cli.main(["coarse", "--input", str(path), "--out", str(tmp_path / "o")]) == cli.EXIT_USER

    def test_non_square(self, tmp_path):
        path = tmp_path / "wide.png"
        Image.fromarray(np.zeros((16, 24, 4), np.uint8)).save(path)
        with pytest.raises(cli.UserError):
            cli.read_rgba(path)

    def test_missing_file(self, tmp_path):
        assert cli.main(["coarse", "--input", str(tmp_path / "nope.png"), "--out", str(tmp_path)]) == cli.EXIT_USER

    def test_fixture_matches_bundled(self, tmp_path):
        out = tmp_path / "fx.png"
        assert cli.main(["fixture", "--out", str(out)]) == cli.EXIT_OK
        assert np.array_equal(np.asarray(Image.open(out)), np.asarray(Image.open(FIXTURE)))


class TestRun:
    def test_run_and_eval(self, tmp_path, tiny_config, capsys):
        out = tmp_path / "run"
        assert cli.main(["run", "--config", tiny_config, "--input", str(FIXTURE), "--out", str(out),
                         "--seed", "3", "--threads", "1"]) == cli.EXIT_OK
        for name in ("coarse.gscl", "refine.grid", "mesh.obj", "metrics.jsonl", "run.json", "config.ini"):
            assert (out / name).is_file(), name
        run = json.loads((out / "run.json").read_text())
        assert run["faces"] >= 100 and run["compose_calls"] == 0
        records = [json.loads(line) for line in (out / "metrics.jsonl").read_text().splitlines()]
        assert [r["stage"] for r in records].count("coarse") == 20
        assert [r["stage"] for r in records].count("refine") == 3

        capsys.readouterr()
        assert cli.main(["eval", "--config", tiny_config, "--out", str(out), "--gt", "builtin:sphere"]) == cli.EXIT_OK
        printed = json.loads(capsys.readouterr().out)
        report = json.loads((out / "eval.json").read_text())
        assert set(printed) == {"chamfer", "mean_psnr", "psnr"}
        assert len(report["psnr"]) == 4 and len(report["coarse_psnr"]) == 4
        assert report["chamfer"] > 0 and np.isfinite(report["mean_psnr"])
        assert report["runtime_seconds"] == run["total_seconds"]

    def test_eval_without_gt(self, tmp_path):
        assert cli.main(["eval", "--out", str(tmp_path)]) == cli.EXIT_USER

    def test_eval_without_mesh(self, tmp_path):
        assert cli.main(["eval", "--out", str(tmp_path), "--gt", "builtin:sphere"]) == cli.EXIT_USER

    def test_deterministic(self, tmp_path, tiny_config):
        logs = []
        for k in range(2):
            out = tmp_path / f"r{k}"
            assert cli.main(["run", "--config", tiny_config, "--input", str(FIXTURE), "--out", str(out),
                             "--seed", "7", "--threads", "1"]) == cli.EXIT_OK
            logs.append(((out / "metrics.jsonl").read_bytes(), (out / "mesh.obj").read_bytes()))
        assert logs[0] == logs[1]

    def test_refine_without_coarse(self, tmp_path, tiny_config):
        assert cli.main(["refine", "--config", tiny_config, "--input", str(FIXTURE),
                         "--out", str(tmp_path / "x")]) == cli.EXIT_USER
