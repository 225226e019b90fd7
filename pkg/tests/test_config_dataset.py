import numpy as np
import pytest

from mvtex import dataset
from mvtex.config import ConfigError, RunConfig, load_config


def test_config_round_trip(tmp_path):
    cfg = RunConfig(seed=7, train_steps=123, w_context=2.5, no_dino=True)
    path = tmp_path / "run.cfg"
    cfg.save(path)
    again = load_config(path)
    assert again == cfg
    assert again.config_hash() == cfg.config_hash()


def test_config_unknown_key_rejected(tmp_path):
    path = tmp_path / "bad.cfg"
    path.write_text("seed=1\nnonsense_knob=3\n")
    with pytest.raises(ConfigError, match="unknown"):
        load_config(path)


def test_config_overrides_and_comments(tmp_path):
    path = tmp_path / "c.cfg"
    path.write_text("# comment line\nseed=3   # trailing comment\n\ntrain_steps=10\n")
    cfg = load_config(path, overrides=["train_steps=20", "no_pointwise=true"])
    assert cfg.seed == 3 and cfg.train_steps == 20 and cfg.no_pointwise


def test_config_hash_changes_with_values():
    assert RunConfig(seed=1).config_hash() != RunConfig(seed=2).config_hash()


def test_derived_configs_consistent():
    cfg = RunConfig(no_pointwise=True, freeze_rgb=True, guidance_mode="single")
    dc = cfg.denoiser_config()
    assert not dc.enable_pointwise and dc.enable_ref_state and dc.freeze_rgb
    assert cfg.guidance_spec().mode == "single"
    assert cfg.fusion_config().seed == cfg.seed


def test_scene_round_trip(tmp_path):
    scene = dataset.make_scene("torus", "noise", seed=4, n_views=4, resolution=16)
    dataset.save_scene(scene, tmp_path / "s0")
    again = dataset.load_scene(tmp_path / "s0")
    assert np.allclose(again.pbr_images, scene.pbr_images)
    assert np.allclose(again.rgb_images, scene.rgb_images)
    for ga, gb in zip(again.gbuffers, scene.gbuffers):
        assert np.array_equal(ga.coverage, gb.coverage)
        assert np.allclose(ga.world_pos, gb.world_pos)
    for key, fld in scene.bundle.fields.items():
        assert np.array_equal(again.bundle.fields[key].visible, fld.visible)
        assert np.allclose(again.bundle.fields[key].coords, fld.coords, atol=1e-4)


def test_scene_batch_shapes():
    scene = dataset.make_scene("sphere", "checker", seed=1, n_views=5, resolution=16)
    batch = scene.make_batch([0, 1, 2], patch_size=4)
    t = (16 // 4) ** 2
    assert batch.rgb_latents.shape == (3, 3, 16, 16)
    assert batch.pbr_latents.shape == (3, 8, 16, 16)
    assert batch.plucker_tokens.shape == (3, t, 6)
    assert batch.pw_coords.shape == (3, 2, t, 2)
    assert batch.pw_vis.shape == (3, 2, t)
    assert (batch.timesteps == 0).all()
    # latents encode [0,1] images into [-1,1]
    assert batch.rgb_latents.min() >= -1.0 and batch.rgb_latents.max() <= 1.0


def test_scene_determinism():
    a = dataset.make_scene("sphere", "checker", seed=9, n_views=4, resolution=16)
    b = dataset.make_scene("sphere", "checker", seed=9, n_views=4, resolution=16)
    assert np.array_equal(a.pbr_images, b.pbr_images)
    assert np.array_equal(a.rgb_images, b.rgb_images)


def test_scene_set_draws_requested_views():
    ss = dataset.make_scene_set(2, seed=0, resolution=16, n_views=6,
                                views_per_batch=4)
    rng = np.random.default_rng(0)
    batch = ss.draw_batch(rng)
    assert batch.n_views == 4
