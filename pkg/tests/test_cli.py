import shutil
from pathlib import Path

import numpy as np
import pytest

from mvtex import cli, meshio

TINY_CFG = """
seed=3
n_scenes=2
rig_views=5
image_size=16
width=16
heads=2
blocks=2
views=3
train_steps=25
train_lr=0.003
sample_steps=5
schedule_steps=20
guidance_mode=single
fusion_phase1_iters=15
fusion_downsample_factor=0.25
fusion_phase2_iters=8
fusion_patches_per_iter=6
fusion_patch_size=8
triplane_feature_dim=4
triplane_log_base_resolution=4
triplane_num_lods=2
bake_resolution=64
texture_resolution=32
"""


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("pipeline")
    cfg = root / "tiny.cfg"
    cfg.write_text(TINY_CFG)
    base = ["--config", str(cfg)]
    assert cli.main(base + ["gen-data", "--out", str(root / "data")]) == 0
    assert cli.main(base + ["train", "--data", str(root / "data"),
                            "--out", str(root / "run")]) == 0
    return root, base


def test_pipeline_end_to_end(pipeline):
    root, base = pipeline
    assert cli.main(base + ["corr", "--data", str(root / "data"),
                            "--out", str(root / "corr")]) == 0
    assert (root / "corr" / "plucker_0.rt").exists()
    assert cli.main(base + [
        "sample", "--data", str(root / "data"),
        "--checkpoint", str(root / "run" / "checkpoint"),
        "--out", str(root / "samp")]) == 0
    for name in ("appearance.rt", "world_pos.rt", "coverage.rt", "rgb.rt"):
        assert (root / "samp" / name).exists()
    assert cli.main(base + [
        "fuse",
        "--appearance", str(root / "samp" / "appearance.rt"),
        "--worldpos", str(root / "samp" / "world_pos.rt"),
        "--coverage", str(root / "samp" / "coverage.rt"),
        "--out", str(root / "fused")]) == 0
    assert cli.main(base + [
        "bake", "--model", str(root / "fused"),
        "--mesh", str(root / "data" / "scene000" / "mesh.obj"),
        "--out", str(root / "baked")]) == 0
    tex = meshio.read_tensor(root / "baked" / "texture.rt")
    assert tex.shape == (8, 64, 64)
    assert cli.main(base + [
        "render", "--mesh", str(root / "data" / "scene000" / "mesh.obj"),
        "--texture", str(root / "baked" / "texture.rt"),
        "--resolution", "48",
        "--out", str(root / "rendered")]) == 0
    assert (root / "rendered" / "render.png").exists()


def test_run_manifest_records_config_hash(pipeline):
    root, base = pipeline
    from mvtex.config import load_config

    cfg = load_config(root / "tiny.cfg")
    run = dict(line.split("=", 1) for line in
               (root / "run" / "run.txt").read_text().strip().splitlines())
    assert run["config_hash"] == cfg.config_hash()
    assert run["seed"] == "3"
    assert "schedule_steps" in run


def test_sample_missing_checkpoint_is_validation_error(pipeline, capsys):
    root, base = pipeline
    code = cli.main(base + [
        "sample", "--data", str(root / "data"),
        "--checkpoint", str(root / "nowhere"),
        "--out", str(root / "samp2")])
    assert code == 1
    err = capsys.readouterr().err
    assert "nowhere" in err


def test_unknown_config_key_is_validation_error(tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("bogus=1\n")
    assert cli.main(["--config", str(cfg), "selftest"]) == 1


def test_ablate_flag_validation(pipeline):
    root, base = pipeline
    code = cli.main(base + [
        "ablate", "--data", str(root / "data"),
        "--checkpoint", str(root / "run" / "checkpoint"),
        "--flag", "no_everything", "--out", str(root / "abl")])
    assert code == 1


def test_resume_config_hash_mismatch(pipeline, tmp_path):
    root, base = pipeline
    cfg2 = tmp_path / "other.cfg"
    cfg2.write_text(TINY_CFG.replace("seed=3", "seed=4"))
    code = cli.main(["--config", str(cfg2), "train",
                     "--data", str(root / "data"),
                     "--resume", str(root / "run"),
                     "--out", str(tmp_path / "run2")])
    assert code == 1


def test_outputs_confined_to_out_dir(pipeline, tmp_path, monkeypatch):
    root, base = pipeline
    workdir = tmp_path / "cwd"
    workdir.mkdir()
    monkeypatch.chdir(workdir)
    out = tmp_path / "confined"
    assert cli.main(base + ["corr", "--data", str(root / "data"),
                            "--out", str(out)]) == 0
    assert not list(workdir.iterdir())  # nothing leaked into the cwd


def test_strict_mode_sample_bitwise_across_threads(pipeline):
    root, base = pipeline
    outs = []
    for label, threads in (("t1", "1"), ("t2", "2")):
        out = root / f"det_{label}"
        code = cli.main(base + ["--strict", "--threads", threads, "sample",
                                "--data", str(root / "data"),
                                "--checkpoint", str(root / "run" / "checkpoint"),
                                "--out", str(out)])
        assert code == 0
        outs.append(meshio.read_tensor(out / "appearance.rt"))
    assert np.array_equal(outs[0], outs[1])


def test_selftest_passes():
    assert cli.main(["selftest"]) == 0
