"""Configuration parsing and command-line behavior."""

import subprocess
import sys

import numpy as np
import pytest

from mvstereo.config import ConfigError, default_config_text, load_config


def run_cli(*args, timeout=240):
    return subprocess.run([sys.executable, "-m", "mvstereo.cli", *args],
                          capture_output=True, text=True, timeout=timeout)


class TestConfig:
    def test_defaults_without_file(self):
        cfg = load_config()
        assert cfg.model.cascade.counts == (16, 8, 4)
        assert cfg.model.n_blocks == 4
        assert cfg.model.n_heads == 8
        assert cfg.loss.gamma == 0.0

    def test_parse_overrides(self):
        cfg = load_config(text="""
[cascade]
counts = 8, 6, 4
decays = 1.0, 0.5, 0.5

[loss]
gamma = 2.0

[model]
use_pathway = false
""")
        assert cfg.model.cascade.counts == (8, 6, 4)
        assert cfg.loss.gamma == 2.0
        assert cfg.model.use_pathway is False

    def test_unknown_key_rejected_with_name(self):
        with pytest.raises(ConfigError, match="garbage_key"):
            load_config(text="[loss]\ngarbage_key = 3\n")

    def test_unknown_section_rejected(self):
        with pytest.raises(ConfigError, match="nonsense"):
            load_config(text="[nonsense]\nx = 1\n")

    def test_bad_value_rejected(self):
        with pytest.raises(ConfigError, match="loss.gamma"):
            load_config(text="[loss]\ngamma = banana\n")

    def test_invalid_combination_rejected(self):
        with pytest.raises(ConfigError, match="invalid configuration"):
            load_config(text="[loss]\ngamma = -1\n")

    def test_default_text_roundtrips(self):
        text = default_config_text()
        cfg = load_config(text=text)
        assert cfg.model.cascade.counts == (16, 8, 4)

    def test_missing_file(self):
        with pytest.raises(ConfigError, match="not found"):
            load_config("/nonexistent/config.cfg")


class TestCliBasics:
    def test_help_exits_zero(self):
        result = run_cli("--help")
        assert result.returncode == 0
        assert "synth" in result.stdout and "bench-attention" in result.stdout

    def test_print_config(self):
        result = run_cli("print-config")
        assert result.returncode == 0
        assert "[cascade]" in result.stdout and "counts = 16, 8, 4" in result.stdout

    def test_bad_config_key_exit_code_2(self, tmp_path):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("[loss]\nbogus_option = 1\n")
        result = run_cli("synth", "--out", str(tmp_path / "o"), "--config", str(cfg))
        assert result.returncode == 2
        assert "bogus_option" in result.stderr

    def test_unknown_subcommand_exit_code_2(self):
        assert run_cli("frobnicate").returncode == 2

    def test_runtime_failure_exit_code_1(self, tmp_path):
        result = run_cli("infer", "--scene", str(tmp_path / "missing"),
                         "--out", str(tmp_path / "o"))
        assert result.returncode == 1


@pytest.fixture(scope="module")
def small_scene_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cliscene")
    cfg = root / "small.cfg"
    cfg.write_text("""
[scene]
height = 16
width = 16
focal = 18.0

[cascade]
counts = 8, 6, 4

[model]
n_blocks = 1
n_heads = 2
""")
    result = run_cli("synth", "--out", str(root / "scenes"), "--scenes", "2",
                     "--seed", "5", "--config", str(cfg))
    assert result.returncode == 0, result.stderr
    return root


class TestCliPipeline:
    def test_synth_writes_expected_layout(self, small_scene_dir):
        scene0 = small_scene_dir / "scenes" / "scene_0000"
        names = sorted(p.name for p in scene0.iterdir())
        assert "manifest.txt" in names
        assert sum(n.startswith("cam_") for n in names) == 3
        assert sum(n.startswith("view_") for n in names) == 3
        assert sum(n.startswith("depth_") for n in names) == 3

    def test_synth_deterministic_bitwise(self, small_scene_dir, tmp_path):
        cfg = small_scene_dir / "small.cfg"
        result = run_cli("synth", "--out", str(tmp_path / "again"), "--scenes", "2",
                         "--seed", "5", "--config", str(cfg))
        assert result.returncode == 0
        base = small_scene_dir / "scenes"
        for sub in ("scene_0000", "scene_0001"):
            for p in sorted((base / sub).iterdir()):
                assert p.read_bytes() == (tmp_path / "again" / sub / p.name).read_bytes()

    def test_untrained_infer_round_trip(self, small_scene_dir, tmp_path):
        """synth -> infer with no checkpoint completes with shape-valid output."""
        from mvstereo.fileio import read_pfm
        cfg = small_scene_dir / "small.cfg"
        result = run_cli("infer", "--scene", str(small_scene_dir / "scenes" / "scene_0000"),
                         "--out", str(tmp_path / "pred"), "--ref", "0",
                         "--config", str(cfg))
        assert result.returncode == 0, result.stderr
        depth = read_pfm(tmp_path / "pred" / "view_0000" / "depth_stage3.pfm")
        conf = read_pfm(tmp_path / "pred" / "view_0000" / "conf_stage3.pfm")
        assert depth.shape == (16, 16) and conf.shape == (16, 16)
        assert (depth > 0).all() and (conf >= 0).all() and (conf <= 1).all()

    def test_fuse_and_cloud_eval_on_gt_depths(self, small_scene_dir, tmp_path):
        """Writing GT depths as predictions, fuse + eval produce a near-zero
        overall cloud distance."""
        import numpy as np
        from mvstereo.fileio import load_scene, write_pfm
        scene_dir = small_scene_dir / "scenes" / "scene_0000"
        views, _ = load_scene(scene_dir)
        depths = tmp_path / "gtdepths"
        for i, view in enumerate(views):
            vdir = depths / f"view_{i:04d}"
            vdir.mkdir(parents=True)
            write_pfm(vdir / "depth_stage3.pfm", view.depth)
            write_pfm(vdir / "conf_stage3.pfm", np.ones_like(view.depth))
        fused = tmp_path / "fused"
        result = run_cli("fuse", "--scene", str(scene_dir), "--depths", str(depths),
                         "--out", str(fused))
        assert result.returncode == 0, result.stderr
        assert (fused / "cloud.ply").exists()
        assert (fused / "mask_0000.ppm").exists()
        result = run_cli("eval", "--mode", "cloud", "--cloud", str(fused / "cloud.ply"),
                         "--scene", str(scene_dir), "--out", str(tmp_path / "m.csv"))
        assert result.returncode == 0, result.stderr
        accuracy = float(result.stdout.split("Accuracy")[1].split()[0])
        overall = float(result.stdout.split("Overall")[1].split()[0])
        # Accuracy is tight (every fused point has an exact counterpart);
        # completeness pays for border pixels seen by only one view.
        assert accuracy < 2e-3
        assert overall < 0.05
        assert (tmp_path / "m.csv").exists()

    def test_gradcheck_command_single_scope(self):
        result = run_cli("gradcheck", "--scope", "matmul", "--instances", "3")
        assert result.returncode == 0
        assert "PASS matmul" in result.stdout

    def test_bench_attention_small(self, tmp_path):
        out = tmp_path / "bench.csv"
        result = run_cli("bench-attention", "--lengths", "64,128,256",
                         "--trials", "1", "--out", str(out))
        assert result.returncode == 0
        assert "slope" in result.stdout
        assert out.exists()
        header = out.read_text().splitlines()[0]
        assert header == "kind,length,seconds"
