import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from torch import nn

from onestep_sr import gradcheck as gc
from onestep_sr.losses import (
    LossBreakdown,
    LossWeights,
    inject_gradient,
    latent_mse,
    lora_diffusion_loss,
    noise_from_velocity,
    perceptual_distance,
    reconstruction_loss,
    tsd_gradient,
    tsm_gradient,
    vsd_gradient,
    weight_of_t,
)
from onestep_sr.nets import lora_wrap
from onestep_sr.scheduler import add_noise, make_schedule, velocity_target


def _z_hat(fx):
    with torch.no_grad():
        return fx.z_hat()


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 10_000), lam=st.sampled_from(gc.BLEND_LAMBDAS + (0.3,)))
def test_tsd_is_blend_of_tsm_and_vsd(seed, lam):
    fx = gc.make_fixture(seed)
    z_hat, w = _z_hat(fx), LossWeights(lam=lam)
    tsd = tsd_gradient(z_hat, fx.z, fx.teacher, fx.lora, fx.t, fx.eps, fx.cond, w, fx.sched)
    tsm = tsm_gradient(z_hat, fx.z, fx.teacher, fx.t, fx.eps, fx.cond, w, fx.sched)
    vsd = vsd_gradient(z_hat, fx.teacher, fx.lora, fx.t, fx.eps, fx.cond, w, fx.sched)
    assert gc.rel_error(tsd, (1 - lam) * tsm + lam * vsd) < 1e-6


def test_blend_endpoints():
    fx = gc.make_fixture(0)
    z_hat = _z_hat(fx)
    args = (fx.t, fx.eps, fx.cond)
    tsd0 = tsd_gradient(z_hat, fx.z, fx.teacher, fx.lora, *args, LossWeights(lam=0.0), fx.sched)
    tsd1 = tsd_gradient(z_hat, fx.z, fx.teacher, fx.lora, *args, LossWeights(lam=1.0), fx.sched)
    tsm = tsm_gradient(z_hat, fx.z, fx.teacher, *args, LossWeights(), fx.sched)
    vsd = vsd_gradient(z_hat, fx.teacher, fx.lora, *args, LossWeights(), fx.sched)
    assert torch.equal(tsd0, tsm)
    assert gc.rel_error(tsd1, vsd) < 1e-12


def test_tsm_ignores_lambda():
    fx = gc.make_fixture(1)
    z_hat = _z_hat(fx)
    a = tsm_gradient(z_hat, fx.z, fx.teacher, fx.t, fx.eps, fx.cond, LossWeights(lam=0.1), fx.sched)
    b = tsm_gradient(z_hat, fx.z, fx.teacher, fx.t, fx.eps, fx.cond, LossWeights(lam=0.9), fx.sched)
    assert torch.equal(a, b)


def test_zero_sentinels():
    assert gc.check_zero_sentinels() == 0.0


def test_independent_noise_breaks_tsm_sentinel():
    """The shared-noise contract is observable: with separate draws TSM at z_hat = z is nonzero."""
    fx = gc.make_fixture(2)
    w = LossWeights()
    other = torch.randn_like(fx.eps)
    zh_t, z_t = add_noise(fx.z, fx.eps, fx.t, fx.sched), add_noise(fx.z, other, fx.t, fx.sched)
    from onestep_sr.losses import tsd_terms_at
    assert tsd_terms_at(zh_t, z_t, fx.t, fx.teacher, fx.lora, fx.cond, w, fx.sched)["tsm"].abs().max() > 0
    assert tsm_gradient(fx.z, fx.z, fx.teacher, fx.t, fx.eps, fx.cond, w, fx.sched).abs().max() == 0


@pytest.mark.parametrize("name", ["vsd_fd", "tsm_fd", "tsd_fd", "reconstruction_fd", "lora_diffusion_fd"])
def test_finite_difference_oracles(name):
    fn, _ = gc.CHECKS[name]
    assert fn() < 1e-4


def test_micro_nets_are_small():
    fx = gc.make_fixture(0)
    assert gc.param_count(fx.teacher) <= 1000
    assert gc.param_count(fx.student) <= 1000


def test_shape_mismatch():
    fx = gc.make_fixture(3)
    with pytest.raises(ValueError):
        tsm_gradient(_z_hat(fx), fx.z[:1], fx.teacher, fx.t, fx.eps, fx.cond, LossWeights(), fx.sched)
    with pytest.raises(ValueError):
        inject_gradient(fx.z, fx.z[:1])


def test_inject_gradient_delivers_residual_over_numel():
    z = torch.randn(2, 3, 4, 4, dtype=torch.float64, requires_grad=True)
    g = torch.randn(2, 3, 4, 4, dtype=torch.float64)
    inject_gradient(z, g).backward()
    assert torch.allclose(z.grad, g / z.numel())


@pytest.mark.parametrize("kind", ["constant", "sigma_sq", "snr"])
def test_weighting_kinds(kind):
    sched = make_schedule()
    w = LossWeights(w_of_t=kind)
    vals = [weight_of_t(t, sched, w) for t in (50, 500, 950)]
    assert all(v > 0 for v in vals)
    if kind == "constant":
        assert vals == [1.0, 1.0, 1.0]
    if kind == "sigma_sq":
        assert vals[1] == pytest.approx(0.25)
    assert weight_of_t(500, sched, LossWeights(w_of_t=kind, w_scale=0.0)) == 0.0


@pytest.mark.parametrize("kwargs", [{"lam": -0.1}, {"lam": 1.1}, {"gamma1": -1}, {"w_of_t": "cosine"}])
def test_weights_validation(kwargs):
    with pytest.raises(ValueError):
        LossWeights(**kwargs)


def test_defaults():
    w = LossWeights()
    assert (w.lam, w.gamma1, w.gamma2, w.w_cfg, w.w_of_t) == (0.5, 1.0, 1.0, 7.5, "constant")


def test_latent_mse_shared_noise_identity():
    sched = make_schedule()
    g = torch.Generator().manual_seed(0)
    z, zh, eps = (torch.randn(2, 4, 4, 4, dtype=torch.float64, generator=g) for _ in range(3))
    for t in (50, 400, 950):
        s = sched.sigma(t)
        got = latent_mse(add_noise(z, eps, t, sched), add_noise(zh, eps, t, sched))
        assert float(got) == pytest.approx((1 - s) ** 2 * float(latent_mse(z, zh)), rel=1e-12)


def test_reconstruction_phases(tiny_ae):
    g = torch.Generator().manual_seed(0)
    x = torch.rand(2, 3, 32, 32, generator=g)
    z = torch.randn(2, 4, 8, 8, generator=g)
    w = LossWeights()
    loss, parts = reconstruction_loss(x, x, z, z, w, "early", tiny_ae.encoder)
    assert float(loss) == 0.0
    y = torch.rand(2, 3, 32, 32, generator=g)
    zh = z + 0.1
    early, pe = reconstruction_loss(y, x, zh, z, w, "early", tiny_ae.encoder)
    late, pl = reconstruction_loss(y, x, zh, z, w, "late", tiny_ae.encoder)
    assert pe["recon_latent_mse"] > 0 and pl["recon_latent_mse"] == 0.0
    assert float(early) == pytest.approx(pe["recon_perceptual"] + pe["recon_latent_mse"], rel=1e-6)
    assert float(late) == pytest.approx(pl["recon_perceptual"], rel=1e-6)
    with pytest.raises(ValueError):
        reconstruction_loss(y, x, zh, z, w, "middle", tiny_ae.encoder)


def test_perceptual_properties(tiny_ae):
    g = torch.Generator().manual_seed(1)
    a, b = torch.rand(3, 3, 32, 32, generator=g), torch.rand(3, 3, 32, 32, generator=g)
    assert float(perceptual_distance(a, a, tiny_ae.encoder)) == 0.0
    assert float(perceptual_distance(a, b, tiny_ae.encoder)) == pytest.approx(
        float(perceptual_distance(b, a, tiny_ae.encoder)), rel=1e-6)
    assert perceptual_distance(a, b, tiny_ae.encoder, reduce=False).shape == (3,)


def test_perceptual_monotone_in_noise(tiny_ae):
    from onestep_sr.degradation import synth_hq
    from onestep_sr.nets import images_to_tensor
    x = images_to_tensor(synth_hq(4, 32, 0), torch.float64)
    enc = tiny_ae.encoder.double()
    noise = torch.randn(x.shape, generator=torch.Generator().manual_seed(2), dtype=torch.float64)
    d = [float(perceptual_distance(x + s * noise, x, enc)) for s in (0.01, 0.03, 0.1, 0.3, 1.0)]
    assert all(p < q for p, q in zip(d, d[1:]))


class _Oracle(nn.Module):
    def __init__(self, target):
        super().__init__()
        self.target = target

    def forward(self, z_t, t, cond=None):
        return self.target


def test_lora_diffusion_perfect_predictor_and_guards(tiny_teacher):
    sched = make_schedule()
    g = torch.Generator().manual_seed(0)
    z, eps = torch.randn(2, 4, 8, 8, generator=g), torch.randn(2, 4, 8, 8, generator=g)
    cond = torch.tensor([0, 1])
    assert float(lora_diffusion_loss(_Oracle(velocity_target(z, eps)), z, 300, eps, cond, sched)) == 0.0
    with pytest.raises(ValueError):
        lora_diffusion_loss(tiny_teacher, z.requires_grad_(), 300, eps, cond, sched)


def test_lora_diffusion_uses_conditional_branch_only(tiny_teacher):
    sched = make_schedule()
    lora = lora_wrap(tiny_teacher, 2)
    g = torch.Generator().manual_seed(1)
    z, eps = torch.randn(2, 4, 8, 8, generator=g), torch.randn(2, 4, 8, 8, generator=g)
    cond = torch.tensor([0, 3])
    with torch.no_grad():
        want = (lora(add_noise(z, eps, 300, sched), 300, cond) - velocity_target(z, eps)).pow(2).mean()
        got = lora_diffusion_loss(lora, z, 300, eps, cond, sched)
    assert float(got) == pytest.approx(float(want), rel=1e-6)


def test_breakdown_row_and_finiteness():
    b = LossBreakdown(tsd=1.0, grad_norms={"student": 2.0})
    row = b.row()
    assert tuple(row) == LossBreakdown.COLUMNS
    assert row["grad_norm_student"] == 2.0 and row["grad_norm_lora"] == 0.0
    assert b.is_finite()
    assert not LossBreakdown(tsd=float("nan")).is_finite()


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000), t=st.integers(0, 1000))
def test_noise_from_exact_velocity_recovers_eps(seed, t):
    gen = torch.Generator().manual_seed(seed)
    z0, eps = torch.randn((2, 4, 4, 4), generator=gen, dtype=torch.float64), torch.randn(
        (2, 4, 4, 4), generator=gen, dtype=torch.float64)
    sched = make_schedule(1000)
    z_t = add_noise(z0, eps, t, sched)
    got = noise_from_velocity(z_t, velocity_target(z0, eps), sched.sigma(t))
    assert torch.allclose(got, eps, atol=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_noise_space_vsd_is_scaled_velocity_vsd(seed):
    fx = gc.make_fixture(seed)
    z_hat = _z_hat(fx)
    noise = vsd_gradient(z_hat, fx.teacher, fx.lora, fx.t, fx.eps, fx.cond, LossWeights(), fx.sched)
    vel = vsd_gradient(z_hat, fx.teacher, fx.lora, fx.t, fx.eps, fx.cond, LossWeights(prediction="velocity"), fx.sched)
    assert gc.rel_error(noise, (1 - fx.sched.sigma(fx.t)) * vel) < 1e-12


@pytest.mark.parametrize("seed", range(5))
def test_noise_space_tsm_adds_latent_offset(seed):
    fx = gc.make_fixture(seed)
    z_hat = _z_hat(fx)
    s = fx.sched.sigma(fx.t)
    noise = tsm_gradient(z_hat, fx.z, fx.teacher, fx.t, fx.eps, fx.cond, LossWeights(), fx.sched)
    vel = tsm_gradient(z_hat, fx.z, fx.teacher, fx.t, fx.eps, fx.cond, LossWeights(prediction="velocity"), fx.sched)
    assert gc.rel_error(noise, (1 - s) * (z_hat - fx.z) + (1 - s) * vel) < 1e-12


def test_unknown_prediction_kind_rejected():
    with pytest.raises(ValueError):
        LossWeights(prediction="x0")
