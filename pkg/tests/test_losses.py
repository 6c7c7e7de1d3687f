import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from etcomm import losses
from etcomm.losses import GaussianMoments, LossConfig
from helpers import check_gradients
from oracles import kl_quadrature_1d, kl_to_standard_mc

T64 = torch.float64


def moments(mu, sigma):
    return GaussianMoments(torch.tensor(mu, dtype=T64), torch.tensor(sigma, dtype=T64))


def test_loss_config_validation():
    with pytest.raises(ValueError):
        LossConfig(eta=-1)
    with pytest.raises(ValueError):
        LossConfig(sigma_floor=0)


def test_ce_loss_is_mean_squared_distance():
    e = torch.tensor([[1.0, 2.0], [0.0, 0.0]], dtype=T64)
    o = torch.tensor([[1.0, 0.0], [3.0, 4.0]], dtype=T64)
    assert losses.ce_loss(e, o).item() == pytest.approx((4 + 25) / 2)
    with pytest.raises(ValueError):
        losses.ce_loss(e, o[:, :1])


def test_etm_loss():
    assert losses.etm_loss(torch.tensor([0.5, -1.0, 0.0], dtype=T64)).item() == pytest.approx(1.25 / 3)


def test_batch_moments_biased():
    x = torch.tensor([[1.0, 5.0], [3.0, 5.0]], dtype=T64)
    m = losses.batch_moments(x, 1e-6)
    np.testing.assert_allclose(m.mu, [2.0, 5.0])
    np.testing.assert_allclose(m.sigma, [1.0, 1e-6])
    with pytest.raises(ValueError):
        losses.batch_moments(x[:1])
    with pytest.raises(ValueError):
        losses.batch_moments(x[0])


@settings(max_examples=40, deadline=None)
@given(
    st.floats(-5, 5), st.floats(0.1, 10), st.floats(-5, 5), st.floats(0.1, 10),
)
def test_kl_matches_quadrature(mu_m, s_m, mu_l, s_l):
    got = losses.gaussian_kl(moments([mu_m], [s_m]), moments([mu_l], [s_l])).item()
    assert got == pytest.approx(kl_quadrature_1d(mu_m, s_m, mu_l, s_l), abs=1e-6)


@settings(max_examples=30)
@given(st.lists(st.tuples(st.floats(-3, 3), st.floats(0.2, 3)), min_size=1, max_size=6))
def test_kl_properties(pairs):
    mu, s = map(list, zip(*pairs))
    m = moments(mu, s)
    assert losses.gaussian_kl(m, m).item() == pytest.approx(0.0, abs=1e-12)
    l = moments([x + 0.5 for x in mu], [x * 1.3 for x in s])
    assert losses.gaussian_kl(m, l).item() > 0
    assert losses.kl_to_standard_normal(m).item() == pytest.approx(
        losses.gaussian_kl(m, GaussianMoments.standard(len(mu))).item()
    )


def test_kl_to_standard_normal_monte_carlo():
    rng = np.random.default_rng(0)
    mu, sigma = rng.uniform(-1, 1, 8), rng.uniform(0.5, 2, 8)
    est = kl_to_standard_mc(mu, sigma, 200_000, rng)
    got = losses.kl_to_standard_normal(moments(mu, sigma)).item()
    assert got == pytest.approx(est, rel=0.05)


def test_gib_zero_at_exact_match_and_standard_h():
    o = torch.randn(64, 4, dtype=T64)
    h = torch.randn(64, 3, dtype=T64)
    h = (h - h.mean(0)) / h.std(0, unbiased=False)
    cfg = LossConfig()
    match, compress = losses.gib_terms(o, o.clone(), h, cfg)
    assert match.item() == pytest.approx(0.0, abs=1e-12)
    assert compress.item() == pytest.approx(0.0, abs=1e-12)
    assert losses.gib_loss(o, o.clone(), h, cfg).item() == pytest.approx(0.0, abs=1e-12)


def test_gib_eta_zero_is_match_only():
    o, e, h = (torch.randn(16, 4, dtype=T64) for _ in range(3))
    cfg = LossConfig(eta=0.0)
    match, _ = losses.gib_terms(o, e, h, cfg)
    assert losses.gib_loss(o, e, h, cfg).item() == match.item()


def test_gib_finite_for_constant_batches():
    o = torch.ones(8, 4, dtype=T64, requires_grad=True)
    e = torch.full((8, 4), 2.0, dtype=T64, requires_grad=True)
    h = torch.zeros(8, 3, dtype=T64, requires_grad=True)
    val = losses.gib_loss(o, e, h, LossConfig())
    val.backward()
    assert torch.isfinite(val)
    assert all(torch.isfinite(x.grad).all() for x in (o, e, h))


def test_alternate_layout_relation_at_eta_one():
    o, e, h = (torch.randn(32, k, dtype=T64) for k in (4, 4, 3))
    cfg = LossConfig(eta=1.0)
    ours = losses.gib_loss(o, e, h, cfg).item()
    m_o, m_e, m_h = (losses.batch_moments(x) for x in (o, e, h))
    flip = 2 * torch.log(m_o.sigma / m_e.sigma).sum().item()
    expected = ours + flip + 0.5 * 4 + 0.5 * 3 + 2 * torch.log(m_h.sigma).sum().item() - 1.0
    assert losses.gib_alternate_layout(o, e, h, cfg) == pytest.approx(expected)


def test_bound_condition_log_is_finite():
    o = torch.randn(32, 4, dtype=T64)
    assert np.isfinite(losses.bound_condition_log(o, o + 0.1))


def test_total_loss_weighting():
    cfg = LossConfig(varrho=0.3, rho=0.7)
    assert losses.total_loss(2.0, 1.0, 10.0, 5.0, cfg) == pytest.approx(-2 + 1 + 3 + 3.5)


@pytest.mark.parametrize("name", ["ce", "etm", "gib"])
def test_loss_gradients_match_finite_differences(name):
    g = torch.Generator().manual_seed(7)
    o = torch.randn(8, 6, dtype=T64, generator=g)
    e = torch.randn(8, 6, dtype=T64, generator=g).requires_grad_()
    h = torch.randn(8, 5, dtype=T64, generator=g).requires_grad_()
    k = torch.rand(8, dtype=T64, generator=g).requires_grad_()
    o.requires_grad_()
    fns = {
        "ce": (lambda: losses.ce_loss(e, o), [e, o]),
        "etm": (lambda: losses.etm_loss(k), [k]),
        "gib": (lambda: losses.gib_loss(o, e, h, LossConfig()), [o, e, h]),
    }
    fn, xs = fns[name]
    assert check_gradients(fn, xs) < 1e-4


def test_gib_gate():
    cfg = LossConfig(rho=0.3, gib_start_epoch=5)
    assert cfg.rho_at(0) == 0.0 and cfg.rho_at(4) == 0.0
    assert cfg.rho_at(5) == 0.3 and cfg.rho_at(None) == 0.3
    with pytest.raises(ValueError):
        LossConfig(gib_start_epoch=-1)
