import copy

import numpy as np
import pytest
import torch

from cvton_lab.generator import (EMA, ContextGenerator, ContextNorm, build_image_context, can_modulate,
                                 default_widths, ema_update, masked_person)
from oracles import finite_difference_check


def _inputs(h=64, w=48, b=2, dtype=torch.float32, seed=0):
    g = torch.Generator().manual_seed(seed)
    s = torch.zeros(b, 25, h, w, dtype=dtype)
    s[:, 1, h // 4: h // 2, w // 4: 3 * w // 4] = 1
    s[:, 0] = 1 - s[:, 1]
    i = torch.rand(b, 3, h, w, generator=g, dtype=dtype) * 2 - 1
    m_c = s[:, 1:2].clone()
    c = torch.rand(b, 3, h, w, generator=g, dtype=dtype) * 2 - 1
    c_w = torch.rand(b, 3, h, w, generator=g, dtype=dtype) * 2 - 1
    return s, i, m_c, c, c_w


def _small_gen(use_can=True, res=(64, 48), n_up=3, dtype=torch.float32, seed=0):
    torch.manual_seed(seed)
    return ContextGenerator(res, 34, 6, n_up, (16, 16, 16, 16, 8, 8), hidden=8, use_can=use_can).to(dtype)


# --- context -------------------------------------------------------------------


def test_full_size_context_pyramid_levels():
    s, i, m_c, c, c_w = _inputs(256, 192, b=1)
    ic = build_image_context(s, i, m_c, c, c_w, n_levels=6)
    assert ic.channels == 34
    assert [tuple(t.shape[-2:]) for t in ic.pyramid] == [(8, 6), (16, 12), (32, 24), (64, 48), (128, 96),
                                                           (256, 192)]


def test_context_channel_order_and_nearest_segmentation():
    s, i, m_c, c, c_w = _inputs()
    ic = build_image_context(s, i, m_c, c, c_w, 4)
    assert torch.equal(ic.full[:, :25], s)
    assert torch.equal(ic.full[:, 25:28], i * (1 - m_c))
    assert torch.equal(ic.full[:, 28:31], c)
    assert torch.equal(ic.full[:, 31:34], c_w)
    small = ic.level((8, 6))[:, :25]
    assert set(small.unique().tolist()) <= {0.0, 1.0}
    assert torch.equal(small.sum(1), torch.ones_like(small[:, 0]))


def test_masked_person_polarity():
    i = torch.rand(1, 3, 8, 6)
    assert torch.equal(masked_person(i, torch.zeros(1, 1, 8, 6)), i)
    assert torch.equal(masked_person(i, torch.ones(1, 1, 8, 6)), torch.zeros_like(i))
    m = (torch.rand(1, 1, 8, 6) > 0.5).float()
    assert torch.equal(masked_person(i, m, keep_clothing=True), i * m)


def test_context_rejects_mismatched_resolution():
    s, i, m_c, c, c_w = _inputs()
    with pytest.raises(ValueError, match="warped garment"):
        build_image_context(s, i, m_c, c, c_w[..., :32, :24], 4)


# --- CAN -----------------------------------------------------------------------


def test_fresh_context_norm_is_plain_batch_norm():
    norm = ContextNorm(8, 34, 16)
    x = torch.randn(2, 8, 8, 6)
    ic = torch.randn(2, 34, 8, 6)
    assert torch.allclose(norm(x, ic), norm.bn(x), atol=1e-6)


def test_zero_gamma_returns_beta():
    x = torch.randn(2, 4, 3, 3)
    beta = torch.randn_like(x)
    assert torch.equal(can_modulate(x, torch.zeros_like(x), beta), beta)


def test_modulation_matches_elementwise_loop():
    rng = np.random.default_rng(0)
    x, g, b = (rng.normal(size=(1, 2, 3, 2)) for _ in range(3))
    out = can_modulate(torch.tensor(x), torch.tensor(g), torch.tensor(b)).numpy()
    ref = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        ref[idx] = x[idx] * g[idx] + b[idx]
    assert np.abs(out - ref).max() < 1e-6


def test_modulation_shape_mismatch_raises():
    with pytest.raises(ValueError):
        can_modulate(torch.zeros(1, 2, 3, 3), torch.zeros(1, 2, 3, 2), torch.zeros(1, 2, 3, 3))


def test_modulation_heads_shaped_like_activation():
    norm = ContextNorm(8, 34, 16)
    gamma, beta = norm.modulation(torch.randn(2, 34, 16, 12))
    assert gamma.shape == beta.shape == (2, 8, 16, 12)


# --- generator -----------------------------------------------------------------


def test_full_size_resolution_arithmetic():
    gen = ContextGenerator((256, 192), 34, 6, 5, (8, 8, 8, 8, 8, 8), hidden=4)
    assert gen.root == (8, 6)
    assert gen.block_resolutions() == [(8, 6), (8, 6), (16, 12), (32, 24), (64, 48), (128, 96)]
    s, i, m_c, c, c_w = _inputs(256, 192, b=1)
    out = gen.eval()(build_image_context(s, i, m_c, c, c_w, gen.n_levels))
    assert out.shape == (1, 3, 256, 192)


def test_default_widths_halve_per_upsampling():
    assert default_widths(6, 5) == (512, 512, 256, 128, 64, 32)


def test_output_shape_range_and_determinism():
    gen = _small_gen().eval()
    ic = build_image_context(*_inputs(), gen.n_levels)
    out = gen(ic)
    assert out.shape == (2, 3, 64, 48)
    assert out.min() >= -1 and out.max() <= 1
    assert torch.equal(out, gen(ic))


def test_output_depends_on_garment_channels():
    gen = _small_gen().eval()
    for m in gen.modules():
        if isinstance(m, ContextNorm):
            torch.nn.init.normal_(m.gamma.weight, std=0.1)
            torch.nn.init.normal_(m.beta.weight, std=0.1)
    s, i, m_c, c, c_w = _inputs()
    a = gen(build_image_context(s, i, m_c, c, c_w, gen.n_levels))
    b = gen(build_image_context(s, i, m_c, -c, c_w, gen.n_levels))
    assert not torch.equal(a, b)


def test_generator_rejects_other_resolution():
    gen = _small_gen()
    with pytest.raises(ValueError):
        gen(build_image_context(*_inputs(32, 24), 4))


def test_generator_gradient_wrt_can_head_matches_finite_differences():
    gen = _small_gen(res=(32, 24), n_up=2, dtype=torch.float64)
    gen.train()
    norms = [m for m in gen.modules() if isinstance(m, ContextNorm)]
    for m in norms:
        torch.nn.init.normal_(m.gamma.weight, std=0.05)
        torch.nn.init.normal_(m.beta.weight, std=0.05)
    ic = build_image_context(*_inputs(32, 24, dtype=torch.float64), gen.n_levels)
    params = [m.gamma.weight for m in norms] + [m.beta.weight for m in norms]
    rows = finite_difference_check(lambda: gen(ic).mean(), params, count=20)
    assert max(r[2] for r in rows) < 1e-3


# --- EMA -----------------------------------------------------------------------


def test_ema_update_closed_form():
    shadow = {"w": torch.zeros(3, dtype=torch.float64)}
    live = {"w": torch.ones(3, dtype=torch.float64)}
    for _ in range(100):
        shadow = ema_update(shadow, live, 0.9999)
    assert torch.allclose(shadow["w"], torch.full((3,), 1 - 0.9999 ** 100, dtype=torch.float64), atol=1e-9, rtol=0)


def test_ema_zero_decay_and_fixed_point():
    live = {"w": torch.randn(4, dtype=torch.float64)}
    assert torch.equal(ema_update({"w": torch.zeros(4, dtype=torch.float64)}, live, 0.0)["w"], live["w"])
    same = ema_update(live, live, 0.9)
    assert torch.allclose(same["w"], live["w"], atol=1e-15)


@pytest.mark.parametrize("decay", [-0.1, 1.0])
def test_ema_rejects_invalid_decay(decay):
    with pytest.raises(ValueError):
        ema_update({"w": torch.zeros(1)}, {"w": torch.zeros(1)}, decay)


def test_ema_rejects_shape_mismatch():
    with pytest.raises(ValueError):
        ema_update({"w": torch.zeros(2)}, {"w": torch.zeros(3)}, 0.5)


def test_ema_module_tracks_parameters_and_copies_buffers():
    net = torch.nn.Sequential(torch.nn.Linear(2, 2), torch.nn.BatchNorm1d(2)).double()
    ema = EMA(net, 0.9)
    before = copy.deepcopy(ema.state_dict())
    with torch.no_grad():
        for p in net.parameters():
            p.add_(1.0)
        net[1].running_mean.fill_(3.0)
    ema.update(net)
    for name, p in ema.module.named_parameters():
        assert torch.allclose(p, 0.9 * before[name] + 0.1 * dict(net.named_parameters())[name])
    assert torch.equal(ema.module[1].running_mean, net[1].running_mean)
    assert not any(p.requires_grad for p in ema.module.parameters())
