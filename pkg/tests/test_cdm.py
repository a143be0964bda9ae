import numpy as np
import pytest

from rectangling.cdm import (
    PipelineConfig,
    cdm_loss,
    from_diffusion,
    rectangle_full,
    rnt_decompose,
    to_diffusion,
    train_cdm,
    weighted_sample,
)
from rectangling.mdm import rectangle_coarse
from rectangling.rng import philox_generator, seeded_gaussian
from rectangling.schedule import SamplerConfig
from rectangling.training import TrainConfig


def test_cdm_loss_examples():
    a = seeded_gaussian((8, 8, 3), 1, 0)
    assert cdm_loss(a, a) == 0.0
    assert abs(cdm_loss(a, a + 0.1) - 0.01) < 1e-12
    b = seeded_gaussian((8, 8, 3), 1, 1)
    acc = 0.0
    for x, y in zip(a.reshape(-1), b.reshape(-1)):
        acc += (x - y) ** 2
    assert abs(cdm_loss(a, b) - acc / a.size) < 1e-12
    with pytest.raises(ValueError):
        cdm_loss(a, b[:4])
    bad = a.copy()
    bad[0, 0, 0] = np.inf
    with pytest.raises(ValueError):
        cdm_loss(bad, a)


def test_diffusion_space_roundtrip():
    img = philox_generator(2, 0).uniform(0, 1, (6, 6, 3))
    assert np.max(np.abs(from_diffusion(to_diffusion(img)) - img)) < 1e-15


def test_rnt_decompose_extremes():
    r = seeded_gaussian((5, 7, 3), 3, 0)
    rng_part, null_part = rnt_decompose(r, np.ones((5, 7)))
    assert np.array_equal(rng_part, r)
    assert np.array_equal(null_part, np.zeros_like(r))
    rng_part, null_part = rnt_decompose(r, np.zeros((5, 7)))
    assert np.array_equal(rng_part, np.zeros_like(r))
    assert np.array_equal(null_part, r)


def test_rnt_decompose_reconstruction_identity():
    r = seeded_gaussian((6, 6, 3), 4, 0)
    for seed in range(5):
        m = philox_generator(seed, 1).uniform(0, 1, (6, 6))
        a, b = rnt_decompose(r, m)
        assert np.allclose(a + b, r, rtol=1e-14, atol=1e-15)
    with pytest.raises(ValueError):
        rnt_decompose(r, np.ones((3, 3)))


def test_train_cdm_zero_steps(tiny_dataset):
    cfg = TrainConfig(steps=0, lr=1e-3, base_channels=4, emb_dim=8, max_disp=2.0)
    model, history = train_cdm(tiny_dataset, cfg)
    from rectangling.training import build_net

    assert np.array_equal(model.params.values, build_net(cfg, 3).init_params().values)
    assert history == []


def test_train_cdm_reduces_loss(tiny_cdm):
    _, history = tiny_cdm
    first = np.mean([h[1] for h in history[:50]])
    last = np.mean([h[1] for h in history[-50:]])
    assert last < first


def _coarse(tiny_dataset, i=0):
    return rectangle_coarse(
        tiny_dataset.I_S[i], tiny_dataset.M_S[i], tiny_dataset.F_gt[i]
    )


def test_weighted_sample_full_mask_returns_coarse_bit_exactly(random_cdm, tiny_dataset):
    img, _ = _coarse(tiny_dataset)
    sampler = SamplerConfig(num_steps=8, cfg_scale=1.0, seed=5)
    out = weighted_sample(
        random_cdm, img, np.ones(img.shape[:2]), tiny_dataset.I_S[0], tiny_dataset.M_S[0], sampler
    )
    assert np.array_equal(out, img)


def test_weighted_sample_zero_mask_is_unconstrained_sampling(random_cdm, tiny_dataset):
    from rectangling.mdm import _cond_planes, ddim_sample

    img, _ = _coarse(tiny_dataset)
    sampler = SamplerConfig(num_steps=8, cfg_scale=1.0, seed=6)
    out = weighted_sample(
        random_cdm, img, np.zeros(img.shape[:2]), tiny_dataset.I_S[0], tiny_dataset.M_S[0], sampler
    )
    cond = _cond_planes(random_cdm, tiny_dataset.I_S[0], tiny_dataset.M_S[0])
    x0 = ddim_sample(random_cdm, (3, 16, 16), cond, sampler)
    reference = np.clip(from_diffusion(x0.transpose(1, 2, 0)), 0.0, 1.0)
    assert np.array_equal(out, reference)


def test_weighted_sample_checkerboard_and_soft_mask_exactness(random_cdm, tiny_dataset):
    img, _ = _coarse(tiny_dataset)
    H, W = img.shape[:2]
    checker = ((np.add.outer(np.arange(H), np.arange(W))) % 2).astype(np.float64)
    sampler = SamplerConfig(num_steps=8, cfg_scale=1.0, seed=7)
    out = weighted_sample(random_cdm, img, checker, tiny_dataset.I_S[0], tiny_dataset.M_S[0], sampler)
    assert np.array_equal(out[checker == 1.0], img[checker == 1.0])
    assert not np.array_equal(out[checker == 0.0], img[checker == 0.0])

    soft = philox_generator(8, 0).uniform(0, 1, (H, W))
    soft[3:6, 3:9] = 1.0
    out2 = weighted_sample(random_cdm, img, soft, tiny_dataset.I_S[0], tiny_dataset.M_S[0], sampler)
    assert np.array_equal(out2[soft == 1.0], img[soft == 1.0])
    assert out2.min() >= 0.0 and out2.max() <= 1.0


def test_weighted_sample_deterministic(random_cdm, tiny_dataset):
    img, _ = _coarse(tiny_dataset)
    m = philox_generator(9, 0).uniform(0, 1, img.shape[:2])
    sampler = SamplerConfig(num_steps=6, cfg_scale=1.0, seed=11)
    a = weighted_sample(random_cdm, img, m, tiny_dataset.I_S[0], tiny_dataset.M_S[0], sampler)
    b = weighted_sample(random_cdm, img, m, tiny_dataset.I_S[0], tiny_dataset.M_S[0], sampler)
    assert np.array_equal(a, b)


def test_weighted_sample_rejects_wrong_task(tiny_mdm, tiny_dataset):
    model, _ = tiny_mdm
    img, _ = _coarse(tiny_dataset)
    with pytest.raises(ValueError, match="content-model"):
        weighted_sample(model, img, np.ones(img.shape[:2]), tiny_dataset.I_S[0],
                        tiny_dataset.M_S[0], SamplerConfig())


def test_pipeline_config_validation():
    with pytest.raises(ValueError):
        PipelineConfig(wsm="bogus")
    with pytest.raises(ValueError):
        PipelineConfig(mask_polarity="sideways")
    cfg = PipelineConfig()
    assert cfg.mdm_sampler.num_steps == 2
    assert cfg.cdm_sampler.num_steps == 200
    assert cfg.cdm_sampler.cfg_scale == 1.0
    assert cfg.mask_polarity == "margin"


def _fast_pipe(seed=0, **kw):
    base = dict(
        mdm_sampler=SamplerConfig(num_steps=2, cfg_scale=1.0, seed=seed),
        cdm_sampler=SamplerConfig(num_steps=6, cfg_scale=1.0, seed=seed),
    )
    base.update(kw)
    return PipelineConfig(**base)


def test_rectangle_full_end_to_end_deterministic(tiny_mdm, tiny_cdm, tiny_dataset):
    mdm_model, _ = tiny_mdm
    cdm_model, _ = tiny_cdm
    pipe = _fast_pipe(seed=3)
    a = rectangle_full(mdm_model, cdm_model, tiny_dataset.I_S[1], tiny_dataset.M_S[1], pipe)
    b = rectangle_full(mdm_model, cdm_model, tiny_dataset.I_S[1], tiny_dataset.M_S[1], pipe)
    assert np.array_equal(a.I_R_prime, b.I_R_prime)
    assert np.array_equal(a.field, b.field)
    assert a.I_R_prime.shape == tiny_dataset.I_R[1].shape
    assert a.M_R_hat.shape == (16, 16)
    assert a.I_R_prime.min() >= 0.0 and a.I_R_prime.max() <= 1.0
    # confidence plane respects the component masks it was built from
    assert np.all(a.M_R_hat[a.M_1 == 1.0] == 0.0)


def test_rectangle_full_field_override(tiny_mdm, tiny_cdm, tiny_dataset):
    mdm_model, _ = tiny_mdm
    cdm_model, _ = tiny_cdm
    res = rectangle_full(
        mdm_model, cdm_model, tiny_dataset.I_S[2], tiny_dataset.M_S[2],
        _fast_pipe(seed=4), field_override=tiny_dataset.F_gt[2],
    )
    assert np.array_equal(res.field, tiny_dataset.F_gt[2])
    coarse, _ = _coarse(tiny_dataset, 2)
    assert np.array_equal(res.I_R_hat, coarse)


def test_rectangle_full_wsm_modes(tiny_mdm, tiny_cdm, tiny_dataset):
    mdm_model, _ = tiny_mdm
    cdm_model, _ = tiny_cdm
    i_s, m_s = tiny_dataset.I_S[0], tiny_dataset.M_S[0]
    fixed = rectangle_full(mdm_model, cdm_model, i_s, m_s, _fast_pipe(wsm="fixed", fixed_mask_value=0.25))
    assert np.all(fixed.M_R_hat == 0.25)
    off = rectangle_full(mdm_model, cdm_model, i_s, m_s, _fast_pipe(wsm="off"))
    assert np.all(off.M_R_hat == 0.0)
    unwarped = rectangle_full(
        mdm_model, cdm_model, i_s, m_s,
        _fast_pipe(use_warped_mask=False, mask_polarity="content"),
    )
    assert np.array_equal(unwarped.M_S_w, m_s)
    margin = rectangle_full(
        mdm_model, cdm_model, i_s, m_s, _fast_pipe(use_warped_mask=False)
    )
    assert np.array_equal(margin.M_S_w, 1.0 - m_s)
