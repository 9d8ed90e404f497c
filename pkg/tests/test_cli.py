import numpy as np
import pytest

from defergs.cli import main
from defergs.io import read_pfm, read_png, save_scene, save_views, write_cameras, write_pfm
from defergs.rigs import orbit_cameras, render_views, roundtrip_scene


@pytest.fixture(scope="module")
def assets(tmp_path_factory):
    d = tmp_path_factory.mktemp("assets")
    sc = roundtrip_scene(1)
    save_scene(sc, d / "scene.txt")
    cams = orbit_cameras(2, size=16)
    write_cameras(d / "cam.json", cams[:1])
    write_cameras(d / "cams.json", cams)
    save_views(render_views(sc, cams, spp=8), d / "views")
    env = np.full((8, 16, 3), 0.5, dtype=np.float32)
    env[2, 3] = 40.0
    write_pfm(d / "env.pfm", env)
    return d


def test_no_arguments_is_usage_error(capsys):
    assert main([]) == 1
    assert "usage" in capsys.readouterr().err


def test_unknown_subcommand_and_missing_flag():
    assert main(["paint"]) == 1
    assert main(["render", "--scene", "x"]) == 1


def test_help_exits_zero(capsys):
    assert main(["--help"]) == 0


def test_render_writes_pfm_and_png(assets, tmp_path):
    out = tmp_path / "x"
    code = main(["render", "--scene", str(assets / "scene.txt"), "--camera", str(assets / "cam.json"),
                 "--mode", "deferred", "--spp", "64", "--out", str(out)])
    assert code == 0
    img = read_pfm(out.with_suffix(".pfm"))
    assert img.shape == (16, 16, 3) and np.all(np.isfinite(img)) and img.max() > 0
    assert read_png(out.with_suffix(".png")).shape == (16, 16, 3)


def test_render_is_deterministic_and_forward_works(assets, tmp_path):
    args = ["render", "--scene", str(assets / "scene.txt"), "--camera", str(assets / "cam.json"),
            "--spp", "8", "--seed", "3"]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    assert main(args + ["--out", str(tmp_path / "b")]) == 0
    assert np.array_equal(read_pfm(tmp_path / "a.pfm"), read_pfm(tmp_path / "b.pfm"))
    assert main(args + ["--mode", "forward", "--denoise", "--out", str(tmp_path / "f")]) == 0


def test_runtime_error_names_module(assets, tmp_path, capsys):
    code = main(["render", "--scene", str(assets / "missing.txt"), "--camera", str(assets / "cam.json"),
                 "--out", str(tmp_path / "x")])
    assert code == 2
    assert "error in defergs." in capsys.readouterr().err


def test_baked_render_of_unbaked_scene_fails(assets, tmp_path):
    code = main(["render", "--scene", str(assets / "scene.txt"), "--camera", str(assets / "cam.json"),
                 "--visibility", "baked", "--out", str(tmp_path / "x")])
    assert code == 2


def test_bake_then_relight(assets, tmp_path):
    baked = tmp_path / "baked.txt"
    assert main(["bake", "--scene", str(assets / "scene.txt"), "--out", str(baked), "--dirs", "32"]) == 0
    out = tmp_path / "relit"
    assert main(["relight", "--scene", str(baked), "--envmap", str(assets / "env.pfm"),
                 "--cameras", str(assets / "cams.json"), "--out", str(out), "--spp", "16"]) == 0
    assert sorted(p.name for p in out.iterdir()) == [
        "relit_000.pfm", "relit_000.png", "relit_001.pfm", "relit_001.png"]


def test_stats_opacity_csv(assets, tmp_path):
    out = tmp_path / "stats.csv"
    assert main(["stats-opacity", "--scene", str(assets / "scene.txt"), "--out", str(out), "--bins", "4"]) == 0
    lines = out.read_text().splitlines()
    assert len(lines) >= 2 and "," in lines[0]


def test_eval_identical_directories(assets, tmp_path, capsys):
    d = tmp_path / "imgs"
    assert main(["render", "--scene", str(assets / "scene.txt"), "--camera", str(assets / "cam.json"),
                 "--spp", "8", "--out", str(d / "v")]) == 0
    assert main(["eval", "--pred", str(d), "--gt", str(d), "--rescale-basecolor"]) == 0
    assert "mean,99.0000" in capsys.readouterr().out  # identical images hit the PSNR cap


def test_train_from_config(assets, tmp_path, capsys):
    cfg = tmp_path / "train.cfg"
    cfg.write_text(f"scene = {assets / 'scene.txt'}\nviews = {assets / 'views'}\n"
                   "stage2_steps = 2\npbr_steps = 2\nspp = 4\nbake_dirs = 16\n", encoding="utf-8")
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "run")]) == 0
    assert (tmp_path / "run" / "loss.csv").exists()
    assert "stage2_skipped = false" in capsys.readouterr().out


def test_gradcheck_tiny_subset(capsys):
    assert main(["gradcheck", "--scene", "tiny", "--max-per-group", "2"]) == 0
    out = capsys.readouterr().out
    assert out.splitlines()[0] == "group,max_rel_err"
    assert out.strip().endswith("PASS")


def test_gradcheck_needs_views_for_files(assets):
    assert main(["gradcheck", "--scene", str(assets / "scene.txt")]) == 1


def test_threads_validated(assets, tmp_path):
    assert main(["bake", "--scene", str(assets / "scene.txt"), "--out", str(tmp_path / "b.txt"),
                 "--threads", "0"]) == 1
