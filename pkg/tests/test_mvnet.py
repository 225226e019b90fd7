import numpy as np
import pytest

from mvtex import dataset, guidance, mvnet
from mvtex import tensor as T
from mvtex.tensor import Tensor


def small_config(**kw):
    defaults = dict(image_size=16, patch_size=4, width=16, heads=2, blocks=2)
    defaults.update(kw)
    return mvnet.DenoiserConfig(**defaults)


@pytest.fixture(scope="module")
def small_scene():
    return dataset.make_scene("sphere", "checker", seed=11, n_views=6, resolution=16)


def _attn(c, rng=None, identity=False):
    if identity:
        eye = np.eye(c, dtype=np.float32)
        return tuple(Tensor(eye.copy(), requires_grad=True) for _ in range(4))
    rng = rng or np.random.default_rng(0)
    return tuple(
        Tensor((rng.standard_normal((c, c)) * 0.3).astype(np.float32), requires_grad=True)
        for _ in range(4)
    )


# -- pointwise attention -------------------------------------------------------

def test_pointwise_all_masked_equals_self_only():
    rng = np.random.default_rng(0)
    c, v, t, k = 8, 3, 5, 2
    params = _attn(c, rng)
    self_feat = Tensor(rng.standard_normal((v, t, c)).astype(np.float32))
    neighbors = Tensor(rng.standard_normal((v, t, k, c)).astype(np.float32))
    masked = mvnet.pointwise_attention(
        self_feat, neighbors, np.zeros((v, t, k), np.float32), *params)
    self_only = mvnet.pointwise_attention(
        self_feat, Tensor(np.zeros((v, t, 0, c), np.float32)),
        np.zeros((v, t, 0), np.float32), *params)
    assert np.array_equal(masked.data, self_only.data)


def test_pointwise_identical_neighbors_swap_invariant():
    rng = np.random.default_rng(1)
    c, v, t = 8, 2, 4
    params = _attn(c, rng)
    self_feat = Tensor(rng.standard_normal((v, t, c)).astype(np.float32))
    nb = rng.standard_normal((v, t, 1, c)).astype(np.float32)
    pair = np.concatenate([nb, nb], axis=2)
    vis = np.ones((v, t, 2), np.float32)
    out_a = mvnet.pointwise_attention(self_feat, Tensor(pair), vis, *params)
    out_b = mvnet.pointwise_attention(self_feat, Tensor(pair[:, :, ::-1].copy()), vis, *params)
    assert np.allclose(out_a.data, out_b.data, atol=1e-6)


def test_pointwise_identity_projections_convex_combination():
    c = 6
    params = _attn(c, identity=True)
    vvec = np.random.default_rng(2).standard_normal((1, 1, c)).astype(np.float32)
    self_feat = Tensor(vvec)
    neighbors = Tensor(vvec[:, :, None, :].copy())
    vis = np.ones((1, 1, 1), np.float32)
    out = mvnet.pointwise_attention(self_feat, neighbors, vis, *params)
    assert np.allclose(out.data, vvec, atol=1e-5)


def test_pointwise_masking_soundness_exact():
    # perturbing a masked-out neighbor pixel changes nothing, bitwise
    rng = np.random.default_rng(3)
    c, v, t, k = 8, 2, 6, 3
    params = _attn(c, rng)
    self_feat = rng.standard_normal((v, t, c)).astype(np.float32)
    nb = rng.standard_normal((v, t, k, c)).astype(np.float32)
    vis = (rng.random((v, t, k)) < 0.5).astype(np.float32)
    base = mvnet.pointwise_attention(Tensor(self_feat), Tensor(nb), vis, *params)

    hidden = np.nonzero(vis == 0)
    nb2 = nb.copy()
    nb2[hidden[0], hidden[1], hidden[2]] += rng.standard_normal(
        (len(hidden[0]), c)).astype(np.float32) * 10
    pert = mvnet.pointwise_attention(Tensor(self_feat), Tensor(nb2), vis, *params)
    assert np.array_equal(base.data, pert.data)

    # and visible perturbations do change the visible pixels' outputs
    nb3 = nb.copy()
    shown = np.nonzero(vis == 1)
    nb3[shown[0][0], shown[0][0] % t if False else shown[1][0], shown[2][0]] += 1.0
    pert2 = mvnet.pointwise_attention(Tensor(self_feat), Tensor(nb3), vis, *params)
    assert not np.array_equal(base.data, pert2.data)


# -- cross attention -----------------------------------------------------------

def test_cross_attention_single_kv_token():
    c = 8
    params = _attn(c, identity=True)
    q = Tensor(np.random.default_rng(4).standard_normal((2, 5, c)).astype(np.float32))
    kv = np.random.default_rng(5).standard_normal((1, 1, c)).astype(np.float32)
    out = mvnet.cross_attention(q, Tensor(kv), *params, heads=2)
    assert np.allclose(out.data, np.broadcast_to(kv, out.data.shape), atol=1e-5)


def test_cross_attention_equal_kv_tokens_logit_independent():
    rng = np.random.default_rng(6)
    c = 8
    params = _attn(c, rng)
    q = Tensor(rng.standard_normal((1, 4, c)).astype(np.float32))
    tok = rng.standard_normal((1, 1, c)).astype(np.float32)
    kv = Tensor(np.repeat(tok, 5, axis=1).copy())
    out = mvnet.cross_attention(q, kv, *params, heads=2)
    expect = mvnet.cross_attention(q, Tensor(tok), *params, heads=2)
    assert np.allclose(out.data, expect.data, atol=1e-6)


def test_cross_attention_duplicate_kv_invariant():
    rng = np.random.default_rng(7)
    c = 8
    params = _attn(c, rng)
    q = Tensor(rng.standard_normal((1, 3, c)).astype(np.float32))
    kv = rng.standard_normal((1, 4, c)).astype(np.float32)
    out_a = mvnet.cross_attention(q, Tensor(kv), *params, heads=1)
    out_b = mvnet.cross_attention(q, Tensor(np.concatenate([kv, kv], axis=1)),
                                  *params, heads=1)
    assert np.allclose(out_a.data, out_b.data, atol=1e-5)


def test_cross_attention_empty_kv_forbidden():
    params = _attn(8)
    q = Tensor(np.zeros((1, 2, 8), np.float32))
    with pytest.raises(ValueError, match="key"):
        mvnet.cross_attention(q, Tensor(np.zeros((1, 0, 8), np.float32)),
                              *params, heads=1)


# -- multiview block -----------------------------------------------------------

def _batch_and_model(scene, cfg, view_ids=(0, 1, 2)):
    model = mvnet.Denoiser(cfg, seed=0)
    batch = scene.make_batch(list(view_ids), cfg.patch_size)
    return model, batch


def test_multiview_block_disabled_identity(small_scene):
    cfg = small_config()
    model, batch = _batch_and_model(small_scene, cfg)
    blk = model.mv["pbr"][0]
    states = Tensor(np.random.default_rng(8).standard_normal(
        (3, cfg.n_tokens, cfg.width)).astype(np.float32))
    out = blk(states, Tensor(batch.plucker_tokens), None, batch, False, False, False)
    assert out is states


def test_multiview_block_zeroed_inputs_self_only_delta(small_scene):
    cfg = small_config()
    model, batch = _batch_and_model(small_scene, cfg)
    blk = model.mv["pbr"][0]
    for ray in (blk.ray_pw, blk.ray_ref, blk.ray_stub):
        ray.data[:] = 0.0
    states_np = np.random.default_rng(9).standard_normal(
        (3, cfg.n_tokens, cfg.width)).astype(np.float32)
    empty = batch.copy()
    empty.pw_vis[:] = 0.0
    stub = Tensor(np.zeros((4, cfg.width), np.float32))
    out = blk(Tensor(states_np), Tensor(empty.plucker_tokens), stub, empty,
              True, False, False)
    self_only = mvnet.pointwise_attention(
        Tensor(states_np), Tensor(np.zeros((3, cfg.n_tokens, 0, cfg.width), np.float32)),
        np.zeros((3, cfg.n_tokens, 0), np.float32), *blk.pw)
    assert np.allclose(out.data, states_np + self_only.data, atol=1e-6)


def test_multiview_block_shape_contract(small_scene):
    cfg = small_config()
    model, batch = _batch_and_model(small_scene, cfg, view_ids=(0, 1, 2, 3, 4))
    blk = model.mv["rgb"][1]
    states = Tensor(np.random.default_rng(10).standard_normal(
        (5, cfg.n_tokens, cfg.width)).astype(np.float32))
    stub = model.ref_stub_tokens(batch)
    out = blk(states, Tensor(batch.plucker_tokens), stub, batch, True, True, True)
    assert out.shape == (5, cfg.n_tokens, cfg.width)


# -- full denoiser -------------------------------------------------------------

def test_denoiser_single_view_equals_multiview_path_disabled(small_scene):
    cfg = small_config(enable_pointwise=False, enable_ref_state=False,
                       enable_dino=False)
    model, _ = _batch_and_model(small_scene, cfg)
    batch1 = small_scene.make_batch([2], cfg.patch_size)
    eps_rgb_1, eps_pbr_1 = model.denoise(batch1)

    batch3 = small_scene.make_batch([2, 0, 4], cfg.patch_size)
    eps_rgb_3, eps_pbr_3 = model.denoise(batch3)
    assert np.array_equal(eps_rgb_1[0], eps_rgb_3[0])
    assert np.array_equal(eps_pbr_1[0], eps_pbr_3[0])


def test_denoiser_deterministic(small_scene):
    cfg = small_config()
    model, batch = _batch_and_model(small_scene, cfg)
    a = model.denoise(batch)
    b = model.denoise(batch)
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])


def test_denoiser_dropped_conditions_ignore_neighbor_latents(small_scene):
    # with neighbors and reference dropped, perturbing one neighbor's
    # latents must leave every other view's prediction bitwise unchanged
    cfg = small_config()
    model, batch = _batch_and_model(small_scene, cfg, view_ids=(0, 1, 2, 3))
    rng = np.random.default_rng(0)
    dropped = guidance.apply_condition_dropout(
        batch, mvnet.UNCOND_CONDITIONS, rng, terminal_t=10)
    base_rgb, base_pbr = model.denoise(dropped)

    pert = dropped.copy()
    pert.rgb_latents[2] += 5.0
    pert.pbr_latents[2] += 5.0
    pert_rgb, pert_pbr = model.denoise(pert)
    for v in (0, 1, 3):
        assert np.array_equal(base_rgb[v], pert_rgb[v])
        assert np.array_equal(base_pbr[v], pert_pbr[v])
    assert not np.array_equal(base_pbr[2], pert_pbr[2])


def test_denoiser_view_permutation_equivariance(small_scene):
    cfg = small_config()
    model = mvnet.Denoiser(cfg, seed=0)
    ids_a = [0, 1, 2, 3]
    ids_b = [0, 2, 1, 3]  # neighbors permuted, reference fixed
    out_a = model.denoise(small_scene.make_batch(ids_a, cfg.patch_size))
    out_b = model.denoise(small_scene.make_batch(ids_b, cfg.patch_size))
    perm = [0, 2, 1, 3]
    assert np.allclose(out_a[0][perm], out_b[0], atol=2e-5)
    assert np.allclose(out_a[1][perm], out_b[1], atol=2e-5)


def test_denoiser_resolution_validation(small_scene):
    cfg = small_config()
    model, batch = _batch_and_model(small_scene, cfg)
    bad = batch.copy()
    bad.rgb_latents = np.zeros((3, 3, 18, 18), np.float32)
    bad.pbr_latents = np.zeros((3, 8, 18, 18), np.float32)
    bad.normal_cond = np.zeros((3, 3, 18, 18), np.float32)
    with pytest.raises(ValueError, match="divisible"):
        model.forward(bad)


def test_freeze_rgb_keeps_base_parameters_bitwise(small_scene):
    cfg = small_config(freeze_rgb=True)
    model, batch = _batch_and_model(small_scene, cfg)
    sched = guidance.DiffusionSchedule(steps=20)
    frozen_before = {n: p.data.copy() for n, p in model.store.params.items()
                     if model.is_rgb_base(n)}
    live_before = {n: p.data.copy() for n, p in model.store.params.items()
                   if not model.is_rgb_base(n)}
    opt = T.Adam(model.trainable_parameters(), lr=1e-3)
    rng = np.random.default_rng(1)
    for _ in range(2):
        guidance.train_step(model, opt, batch, sched, guidance.DropoutSpec(), rng)
    for n, before in frozen_before.items():
        assert np.array_equal(model.store.params[n].data, before), n
    changed = sum(
        not np.array_equal(model.store.params[n].data, before)
        for n, before in live_before.items()
    )
    assert changed > len(live_before) * 0.5


def test_stub_statistics_constant_image():
    stats = mvnet.stub_statistics(np.full((3, 16, 16), 0.7, np.float32), grid=4)
    assert np.allclose(stats[:, 0:3], 0.7, atol=1e-6)   # means
    assert np.allclose(stats[:, 3:], 0.0, atol=1e-6)    # stds and gradients


def test_stub_deterministic_and_droppable(small_scene):
    cfg = small_config()
    model, batch = _batch_and_model(small_scene, cfg)
    a = model.ref_stub_tokens(batch)
    b = model.ref_stub_tokens(batch)
    assert np.array_equal(a.data, b.data)
    dropped = batch.copy()
    dropped.stub_dropped = True
    z = model.ref_stub_tokens(dropped)
    assert not z.data.any()


def test_checkpoint_round_trip(tmp_path, small_scene):
    cfg = small_config()
    model, batch = _batch_and_model(small_scene, cfg)
    before = model.denoise(batch)
    model.save(tmp_path / "ckpt")
    other = mvnet.Denoiser(cfg, seed=99)
    other.load(tmp_path / "ckpt")
    after = other.denoise(batch)
    assert np.array_equal(before[0], after[0])
    assert np.array_equal(before[1], after[1])


def test_multiview_block_gradient_flow(small_scene):
    cfg = mvnet.DenoiserConfig(image_size=8, patch_size=4, width=8, heads=2, blocks=1)
    scene = dataset.make_scene("sphere", "checker", seed=2, n_views=4, resolution=8)
    model = mvnet.Denoiser(cfg, seed=1)
    batch = scene.make_batch([0, 1, 2], cfg.patch_size)
    blk = model.mv["pbr"][0]
    params = [blk.ray_pw, blk.ray_ref, blk.ray_stub, *blk.pw, *blk.ref, *blk.stub]
    rng = np.random.default_rng(3)
    states0 = rng.standard_normal((3, cfg.n_tokens, 8))
    stub0 = rng.standard_normal((4, 8))
    probe = rng.standard_normal((3, cfg.n_tokens, 8))

    def fn(ps):
        blk.ray_pw, blk.ray_ref, blk.ray_stub = ps[0], ps[1], ps[2]
        blk.pw = tuple(ps[3:7])
        blk.ref = tuple(ps[7:11])
        blk.stub = tuple(ps[11:15])
        out = blk(Tensor(states0), Tensor(batch.plucker_tokens.astype(np.float64)),
                  Tensor(stub0), batch, True, True, True)
        return T.sum_(T.mul(out, Tensor(probe)))

    err = T.grad_check(fn, [p.data.astype(np.float64) for p in params], max_entries=25)
    assert err <= 1e-4
