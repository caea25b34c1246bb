import pandas as pd
import pytest

from metaxt import cli

SMALL_CONFIG = """\
# a quick granularity run
n_source = 1000
n_target_pool = 200
noise_sigma = 0.5
input_dim = 6
hidden_dims = 8
h_dim = 6
z_dim = 3
k = 10
seeds = 1
step_budget = 2
eval_every = 1
"""


@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / "small.txt"
    path.write_text(SMALL_CONFIG)
    return path


class TestParser:
    def test_version(self, capsys):
        with pytest.raises(SystemExit) as info:
            cli.main(["-V"])
        assert info.value.code == 0
        assert capsys.readouterr().out.startswith("metaxt")

    def test_no_command(self):
        with pytest.raises(SystemExit) as info:
            cli.main([])
        assert info.value.code == 2

    def test_overrides(self):
        assert cli.parse_overrides(["--k=20", "--step-budget=5"]) == {"k": "20", "step_budget": "5"}

    @pytest.mark.parametrize("arg", ["stray", "--k"])
    def test_bad_override(self, arg):
        with pytest.raises(ValueError, match="--key=value"):
            cli.parse_overrides([arg])


class TestRun:
    def test_run(self, config_file, tmp_path, capsys):
        outdir = tmp_path / "out"
        assert cli.main(["run", str(config_file), "-o", str(outdir), "--method=MultiTask"]) == 0
        assert "MultiTask k=10" in capsys.readouterr().out
        df = pd.read_csv(outdir / "results.csv")
        assert list(df["seed"]) == ["1", "aggregate"]
        assert (outdir / "config.txt").read_text().count("method = MultiTask") == 1

    def test_unknown_key(self, config_file, tmp_path, capsys):
        assert cli.main(["run", str(config_file), "-o", str(tmp_path), "--colour=red"]) == 2
        assert "Unknown config key 'colour'" in capsys.readouterr().err

    def test_missing_config_file(self, tmp_path, capsys):
        assert cli.main(["run", str(tmp_path / "missing.txt")]) == 2
        assert "missing.txt" in capsys.readouterr().err

    def test_partial_run(self, config_file, tmp_path):
        assert cli.main(["run", str(config_file), "-o", str(tmp_path / "out"), "--k=150"]) == 1

    def test_sweep(self, config_file, tmp_path, capsys):
        outdir = tmp_path / "sweep"
        args = ["sweep", str(config_file), "-o", str(outdir), "--methods=TargetOnly,MetaXT", "--ks=10"]
        assert cli.main(args) == 0
        out = capsys.readouterr().out
        assert "TargetOnly k=10" in out
        assert "MetaXT k=10" in out
        assert len(pd.read_csv(outdir / "results.csv")) == 4
        assert (outdir / "ltn_map_MetaXT_k10.svg").exists()
        assert (outdir / "curves.svg").exists()


class TestLtnMap:
    def test_report(self, config_file, tmp_path, capsys):
        outdir = tmp_path / "map"
        assert cli.main(["ltn-map", str(config_file), "-o", str(outdir)]) == 0
        assert "negative" in capsys.readouterr().out
        df = pd.read_csv(outdir / "ltn_map_MetaXT_k10.csv", index_col=0)
        assert list(df.index) == ["negative", "positive"]
        assert (outdir / "ltn_map_MetaXT_k10.svg").exists()

    def test_needs_ltn(self, config_file, tmp_path, capsys):
        assert cli.main(["ltn-map", str(config_file), "-o", str(tmp_path), "--method=TargetOnly"]) == 2
        assert "has no LTN" in capsys.readouterr().err


class TestCheckGrads:
    def test_passes(self, capsys):
        assert cli.main(["check-grads", "--instances", "1"]) == 0
        out = capsys.readouterr().out
        assert "meta_gradient_fd_vs_exact" in out
        assert "primitive:matmul" in out

    def test_rejects_overrides(self):
        with pytest.raises(SystemExit):
            cli.main(["check-grads", "--k=3"])
