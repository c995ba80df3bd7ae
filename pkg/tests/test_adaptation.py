import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from seuda import adaptation as ad
from seuda.data import generate_phantoms, phantom_params
from seuda.segmenter import (NonFiniteLossError, SegmenterConfig, build_segmenter,
                             toy_segmenter_config)

# ----------------------------------------------------------------- helpers


def mini_state(seed=0, lam=0.5, semantic=True):
    return ad.build_adaptation(ad.GeneratorConfig(1, 1, 2), ad.DiscriminatorConfig(3, 2),
                               ad.AdaptationConfig(lambda_sem=lam), seed=seed, semantic=semantic,
                               dtype=torch.float64, working_size=8)


def mini_segmenter():
    cfg = SegmenterConfig(base_channels=4, stage_blocks=[1], dilated_stage_rates=[],
                          head_rates=[1, 2, 3, 4], working_size=8)
    return build_segmenter(cfg, seed=5, dtype=torch.float64).freeze()


def n_params(*nets):
    return sum(p.numel() for n in nets for p in n.parameters())


def rel_error(analytic, numeric):
    a = torch.cat([g.flatten() for g in analytic])
    n = torch.cat([g.flatten() for g in numeric])
    return ((a - n).norm() / max(a.norm(), n.norm())).item()


@pytest.fixture(scope="module")
def toy():
    src = generate_phantoms(phantom_params("source", 21, working_size=32), 6)
    tgt = generate_phantoms(phantom_params("target", 22, working_size=32), 4)
    seg_cfg = SegmenterConfig(base_channels=4, stage_blocks=[1, 1, 1], dilated_stage_rates=[2],
                              head_rates=[6, 12, 18, 24], working_size=32)
    seg = build_segmenter(seg_cfg, seed=0).freeze()
    return src, tgt, seg


def small_state(seed=0, lam=0.5, semantic=True, pool_size=50):
    return ad.build_adaptation(ad.GeneratorConfig(2, 1, 4), ad.DiscriminatorConfig(4, 4),
                               ad.AdaptationConfig(lambda_sem=lam, pool_size=pool_size),
                               seed=seed, semantic=semantic, working_size=32)


def params_equal(a, b):
    return all(np.array_equal(a[k], b[k]) for k in a)

# ------------------------------------------------------------ architecture


def test_generator_and_discriminator_shapes():
    state = ad.build_adaptation(ad.toy_generator_config(), ad.toy_discriminator_config(),
                                seed=0, working_size=64)
    x = torch.rand(1, 1, 64, 64) * 2 - 1
    assert state.nets["G_ts"](x).shape == (1, 1, 64, 64)
    scores = state.nets["D_s"](x)
    assert scores.shape[0] == 1 and scores.shape[1] == 1 and scores.shape[2] * scores.shape[3] > 1
    assert state.nets["D_m"](torch.rand(1, 3, 64, 64)).shape == scores.shape
    assert ad.receptive_field(5) == 70


def test_build_is_seed_deterministic():
    a, b = mini_state(seed=3), mini_state(seed=3)
    c = mini_state(seed=4)
    for name in ad.NETWORKS:
        assert params_equal(a.parameters(name), b.parameters(name))
    assert not params_equal(a.parameters("G_ts"), c.parameters("G_ts"))


def test_build_rejects_incompatible_size():
    with pytest.raises(ValueError):
        ad.build_adaptation(ad.GeneratorConfig(3, 1, 4), ad.DiscriminatorConfig(5, 4),
                            working_size=20)
    with pytest.raises(ValueError):
        ad.build_adaptation(ad.GeneratorConfig(1, 1, 4), ad.DiscriminatorConfig(5, 4),
                            working_size=16)
    with pytest.raises(ValueError):
        ad.DiscriminatorConfig(layers=1).validate()

# ------------------------------------------------------------------ losses


@pytest.mark.parametrize("real,fake,expected", [
    (1.0, 0.0, (0.0, 1.0)),
    (0.5, 0.5, (0.25, 0.25)),
    (1.0, 1.0, (0.5, 0.0)),
])
def test_lsgan_and_semantic_values(real, fake, expected):
    r, f = np.full((3, 3), real), np.full((3, 3), fake)
    assert ad.lsgan_losses(r, f) == pytest.approx(expected)
    assert ad.semantic_losses(r, f) == pytest.approx(expected)
    d, g = ad.lsgan_losses(torch.tensor(r), torch.tensor(f))
    assert (d.item(), g.item()) == pytest.approx(expected)


def test_cycle_loss_values():
    x = np.random.default_rng(0).normal(size=(4, 4))
    assert ad.cycle_loss(x, x, x, x) == 0
    assert ad.cycle_loss(x, x + 3, x, x) == pytest.approx(3)
    assert ad.cycle_loss(x, x - 2, x, x + 2) == pytest.approx(4)
    with pytest.raises(ValueError):
        ad.cycle_loss(x, x[:2], x, x)


def test_total_objective():
    w = (0.5, 10, 0.5)
    assert ad.total_objective((1.0, 0.8, 0.2, 0.4), w) == pytest.approx(3.6)
    assert ad.total_objective((1.0, 0.8, 0.2, 0.4), (0.5, 10, 0)) == pytest.approx(3.4)
    assert ad.total_objective((0, 0, 0, 0), w) == 0


def test_semantic_channel_mismatch():
    with pytest.raises(ValueError, match="channels"):
        ad.check_mask_channels(torch.zeros(1, 2, 4, 4))


def test_smoothed_one_hot():
    y = torch.tensor([[[0, 1], [2, 1]]])
    hot = ad.smoothed_one_hot(y, 3, 0.1)
    assert torch.allclose(hot.sum(1), torch.ones(1, 2, 2))
    assert hot[0, 1, 0, 1].item() == pytest.approx(0.9)
    assert hot[0, 0, 0, 1].item() == pytest.approx(0.05)

# -------------------------------------------------------- pool / schedule


def test_pool_fill_phase_passthrough():
    pool = ad.ImagePool(50, seed=0)
    out = pool.query(torch.ones(1))
    assert out.item() == 1 and len(pool) == 1
    seq = [torch.tensor([float(i)]) for i in range(50)]
    pool = ad.ImagePool(50, seed=0)
    assert [pool.query(s).item() for s in seq] == list(range(50))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 20), st.integers(1, 150), st.integers(0, 1000))
def test_pool_capacity_and_determinism(capacity, n, seed):
    pools = [ad.ImagePool(capacity, seed) for _ in range(2)]
    outs = [[], []]
    for i in range(n):
        for p, o in zip(pools, outs):
            o.append(p.query(torch.tensor([float(i)])).item())
            assert len(p) <= capacity
    assert outs[0] == outs[1]
    if n >= capacity:
        assert len(pools[0]) == capacity


def test_pool_returns_only_seen_images():
    pool = ad.ImagePool(5, seed=1)
    seen = set()
    for i in range(200):
        seen.add(i)
        assert pool.query(torch.tensor([float(i)])).item() in seen


def test_lr_schedule():
    assert ad.lr_at(0) == 0.002
    assert ad.lr_at(99) == 0.002
    assert ad.lr_at(150) == pytest.approx(0.001)
    assert ad.lr_at(200) == 0.0 and ad.lr_at(500) == 0.0
    lrs = [ad.lr_at(e, 0.002, 7, 13) for e in range(30)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))
    assert lrs[20] == 0.0

# --------------------------------------------------------- gradient checks


def _mini_inputs(seed=0):
    g = torch.Generator().manual_seed(seed)
    x_s = torch.rand(1, 1, 8, 8, generator=g, dtype=torch.float64) * 255
    x_t = torch.rand(1, 1, 8, 8, generator=g, dtype=torch.float64) * 255
    return x_s, x_t


def test_gradient_generator_lsgan():
    state, seg = mini_state(), mini_segmenter()
    assert n_params(state.nets["G_ts"], state.nets["D_s"]) <= 2000
    x_s, x_t = _mini_inputs()
    params = list(state.nets["G_ts"].parameters())

    def f():
        return ad.generator_losses(state, seg, x_s, x_t)["gan_ts"]

    analytic = torch.autograd.grad(f(), params)
    assert rel_error(analytic, oracles.central_differences(f, params)) < 1e-4


def test_gradient_cycle_loss_away_from_kinks():
    state, seg = mini_state(lam=0.0), mini_segmenter()
    x_s, x_t = _mini_inputs(1)
    with torch.no_grad():
        s, t = ad.to_unit(x_s), ad.to_unit(x_t)
        diff_t = state.nets["G_st"](state.nets["G_ts"](t)) - t
        diff_s = state.nets["G_ts"](state.nets["G_st"](s)) - s
    assert min(diff_t.abs().min().item(), diff_s.abs().min().item()) > 1e-3
    params = list(state.nets["G_ts"].parameters()) + list(state.nets["G_st"].parameters())
    assert n_params(state.nets["G_ts"], state.nets["G_st"]) <= 2000

    def f():
        return ad.generator_losses(state, seg, x_s, x_t)["cyc"]

    analytic = torch.autograd.grad(f(), params)
    assert rel_error(analytic, oracles.central_differences(f, params)) < 1e-4


def test_gradient_semantic_loss_through_frozen_segmenter():
    state, seg = mini_state(), mini_segmenter()
    assert n_params(state.nets["G_ts"], state.nets["D_m"], seg.net) <= 2000
    x_s, x_t = _mini_inputs(2)
    params = list(state.nets["G_ts"].parameters())

    def f():
        return ad.generator_losses(state, seg, x_s, x_t)["sem"]

    loss = f()
    analytic = torch.autograd.grad(loss, params)
    assert torch.cat([g.flatten() for g in analytic]).abs().max() > 0
    assert rel_error(analytic, oracles.central_differences(f, params)) < 1e-4
    # the frozen segmenter never accumulates gradients
    ad.generator_losses(state, seg, x_s, x_t)["total"].backward()
    assert all(p.grad is None for p in seg.net.parameters())

# -------------------------------------------------------------- train step


def test_train_step_invariants(toy):
    src, tgt, seg = toy
    state = small_state()
    seg_before = seg.parameters()
    for i in range(6):
        c_s, c_t = src[i % len(src)], tgt[i % len(tgt)]
        state, rep = ad.train_step(state, seg, c_s.image, c_s.label, c_t.image)
        parts = rep.as_dict()
        assert all(math.isfinite(v) for v in parts.values())
        assert abs(rep.total - (rep.gan_st + 0.5 * rep.gan_ts + 10 * rep.cyc + 0.5 * rep.sem)) <= 1e-6
    assert params_equal(seg_before, seg.parameters())


def test_lambda_zero_freezes_mask_discriminator(toy):
    src, tgt, seg = toy
    state = small_state(lam=0.0)
    d_m_before = state.parameters("D_m")
    for i in range(3):
        state, rep = ad.train_step(state, seg, src[i].image, src[i].label, tgt[i].image)
        assert rep.sem == 0 and rep.d_m == 0
    assert params_equal(d_m_before, state.parameters("D_m"))


def test_train_step_requires_frozen_segmenter(toy):
    src, tgt, seg = toy
    with pytest.raises(ValueError, match="frozen"):
        ad.train_step(small_state(), seg.unfrozen_copy(), src[0].image, src[0].label, tgt[0].image)


def test_non_finite_loss_names_component(toy):
    src, tgt, seg = toy
    bad = tgt[0].image.pixels.copy()
    bad[0, 0] = np.nan
    with pytest.raises(NonFiniteLossError, match="non-finite loss component"):
        ad.train_step(small_state(), seg, src[0].image, src[0].label, bad)


def test_cyuda_equivalence_short(toy):
    src, tgt, seg = toy
    a = small_state(seed=7, lam=0.0)
    b = small_state(seed=7, lam=0.0, semantic=False)
    assert "D_m" not in b.nets
    traj_a, traj_b = [], []
    a, _ = ad.train_adaptation(a, seg, src, tgt, 2, lambda s, r: traj_a.append(s.parameters("G_ts")))
    b, _ = ad.train_adaptation(b, None, src, tgt, 2, lambda s, r: traj_b.append(s.parameters("G_ts")))
    assert len(traj_a) == len(traj_b) == 8
    assert all(params_equal(x, y) for x, y in zip(traj_a, traj_b))
    assert params_equal(a.parameters("G_st"), b.parameters("G_st"))

# --------------------------------------------------------- training loop


def test_train_adaptation_zero_epochs(toy):
    src, tgt, seg = toy
    state = small_state()
    before = state.parameters("G_ts")
    state, hist = ad.train_adaptation(state, seg, src, tgt, 0)
    assert hist == [] and state.epoch == 0 and params_equal(before, state.parameters("G_ts"))


def test_train_adaptation_deterministic_and_ignores_target_labels(toy):
    src, tgt, seg = toy
    runs = []
    for strip in (False, True):
        t = tgt
        if strip:
            t = type(tgt)([type(c)(c.image, None, c.case_id) for c in tgt], "target")
        state, hist = ad.train_adaptation(small_state(seed=2), seg, src, t, 2)
        runs.append((hist, state.parameters("G_ts")))
    assert runs[0][0] == runs[1][0]
    assert params_equal(runs[0][1], runs[1][1])
    assert [h["epoch"] for h in runs[0][0]] == [0, 1]
    assert set(runs[0][0][0]) >= {"lr", "gan_st", "gan_ts", "cyc", "sem", "total", "d_s", "d_t", "d_m"}


def test_checkpoint_resume_matches_uninterrupted(toy, tmp_path):
    src, tgt, seg = toy
    full, _ = ad.train_adaptation(small_state(seed=3, pool_size=2), seg, src, tgt, 2)
    half, _ = ad.train_adaptation(small_state(seed=3, pool_size=2), seg, src, tgt, 1)
    ad.save_adaptation(half, tmp_path / "uda.pt")
    resumed = ad.load_adaptation(tmp_path / "uda.pt")
    assert len(resumed.pools["fake_s"]) == 2
    resumed, _ = ad.train_adaptation(resumed, seg, src, tgt, 1)
    for name in ad.NETWORKS:
        assert params_equal(full.parameters(name), resumed.parameters(name))
    assert full.history == resumed.history


def test_transform_contract(toy):
    src, tgt, seg = toy
    state = small_state()
    out = ad.transform(state, tgt[0].image)
    assert out.pixels.shape == (32, 32) and out.domain_tag == "transformed"
    assert np.isfinite(out.pixels).all() and out.pixels.min() >= 0 and out.pixels.max() <= 255
    assert np.array_equal(out.pixels, ad.transform(state, tgt[0].image).pixels)
