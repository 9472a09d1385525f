import numpy as np
import pytest
import torch

from ulfenc import metrics
from ulfenc.objective import LossBreakdown, LossWeights, hinge_d, hinge_g, r1_penalty, recon_loss, ssim


def rand_pair(shape=(12, 12, 12), seed=0, dtype=torch.float64):
    g = torch.Generator().manual_seed(seed)
    x = torch.rand((1, 1) + shape, generator=g, dtype=dtype)
    y = torch.rand((1, 1) + shape, generator=g, dtype=dtype)
    return x, y


# --------------------------------------------------------------- recon loss


def test_recon_loss_zero_for_identical():
    x, _ = rand_pair(seed=1)
    total, parts = recon_loss(x, x, None, LossWeights())
    assert float(total) == 0.0
    assert float(parts["l1"]) == 0.0
    assert float(parts["ssim_loss"]) == 0.0


def test_recon_loss_constant_volumes_closed_form():
    pred = torch.zeros(1, 1, 12, 12, 12, dtype=torch.float64)
    target = torch.ones_like(pred)
    total, parts = recon_loss(pred, target, None, LossWeights())
    # MAE = 1; SSIM = C1/(1+C1) -> total = 0.2 + 0.8 * (1 - 1e-4/1.0001)
    expected = 0.2 * 1.0 + 0.8 * (1.0 - 1e-4 / (1.0 + 1e-4))
    assert float(total) == pytest.approx(expected, abs=1e-9)
    assert float(total) == pytest.approx(0.99992, abs=1e-5)


def test_recon_loss_components_recombine_exactly():
    x, y = rand_pair(seed=2)
    w = LossWeights()
    total, parts = recon_loss(x, y, None, w)
    bd = LossBreakdown.from_parts(w, l1=float(parts["l1"]), ssim_loss=float(parts["ssim_loss"]))
    assert bd.total_g == w.w_l1 * bd.l1 + w.w_ssim * bd.ssim_loss


def test_recon_loss_rejects_small_volumes():
    x = torch.zeros(1, 1, 8, 12, 12)
    with pytest.raises(ValueError, match="window"):
        recon_loss(x, x, None, LossWeights())


def test_recon_loss_masked_matches_metrics_convention():
    x, y = rand_pair(seed=3)
    mask = (torch.rand(1, 1, 12, 12, 12, generator=torch.Generator().manual_seed(9)) > 0.3).double()
    _, parts = recon_loss(x, y, mask, LossWeights())
    np_ssim = metrics.ssim3d(x[0, 0].numpy(), y[0, 0].numpy(), mask=mask[0, 0].numpy())
    assert float(parts["ssim_loss"]) == pytest.approx(1.0 - np_ssim, abs=1e-9)
    sel = mask[0, 0].numpy() > 0.5
    np_mae = metrics.mae(x[0, 0].numpy(), y[0, 0].numpy(), mask=sel)
    assert float(parts["l1"]) == pytest.approx(np_mae, abs=1e-9)


def test_torch_ssim_matches_numpy_metrics():
    x, y = rand_pair(seed=4)
    torch_val = float(ssim(x, y))
    np_val = metrics.ssim3d(x[0, 0].numpy(), y[0, 0].numpy())
    assert torch_val == pytest.approx(np_val, abs=1e-9)


def test_ssim_component_symmetry():
    x, y = rand_pair(seed=5)
    assert float(ssim(x, y)) == pytest.approx(float(ssim(y, x)), abs=1e-7)


def test_ssim_2d_variant():
    g = torch.Generator().manual_seed(6)
    x = torch.rand(2, 1, 16, 16, generator=g, dtype=torch.float64)
    assert float(ssim(x, x)) == 1.0


def test_recon_loss_gradient_matches_finite_differences():
    torch.manual_seed(7)
    x = torch.rand(1, 1, 12, 12, 12, dtype=torch.float64, requires_grad=True)
    y = torch.rand(1, 1, 12, 12, 12, dtype=torch.float64)
    w = LossWeights()
    total, _ = recon_loss(x, y, None, w)
    total.backward()
    grad = x.grad.clone()

    rng = np.random.default_rng(8)
    eps = 1e-3
    for _ in range(10):
        idx = (0, 0) + tuple(rng.integers(0, 12, size=3))
        with torch.no_grad():
            xp = x.detach().clone()
            xp[idx] += eps
            xm = x.detach().clone()
            xm[idx] -= eps
            fp, _ = recon_loss(xp, y, None, w)
            fm, _ = recon_loss(xm, y, None, w)
        fd = (float(fp) - float(fm)) / (2 * eps)
        ref = float(grad[idx])
        assert abs(fd - ref) <= 1e-2 * max(abs(ref), 1e-8), (idx, fd, ref)


# -------------------------------------------------------------------- hinge


def test_hinge_d_values():
    ones = torch.ones(2, 1, 2, 2, 2)
    assert float(hinge_d(2 * ones, -2 * ones)) == 0.0
    assert float(hinge_d(0 * ones, 0 * ones)) == 2.0
    assert float(hinge_d(0.5 * ones, 0.5 * ones)) == pytest.approx(2.0)


def test_hinge_d_nonnegative_and_zero_iff_margins():
    g = torch.Generator().manual_seed(10)
    for _ in range(20):
        real = torch.randn(1, 1, 3, 3, 3, generator=g)
        fake = torch.randn(1, 1, 3, 3, 3, generator=g)
        val = float(hinge_d(real, fake))
        assert val >= 0.0
        if bool((real >= 1).all() and (fake <= -1).all()):
            assert val == 0.0
        elif val == 0.0:
            assert bool((real >= 1).all() and (fake <= -1).all())


def test_hinge_g_values():
    zeros = torch.zeros(1, 1, 2, 2, 2)
    assert float(hinge_g(zeros)) == 0.0
    assert float(hinge_g(zeros + 0.3)) == pytest.approx(-0.3)
    mixed = torch.tensor([[-1.0], [1.0]])
    assert float(hinge_g(mixed)) == 0.0


# ----------------------------------------------------------------------- r1


def test_r1_constant_discriminator_zero_penalty():
    real = torch.rand(2, 1, 4, 4, 4)

    def const_d(x):
        return torch.ones(x.shape[0], 1) + 0.0 * x.sum()

    assert float(r1_penalty(const_d, real, gamma=10.0)) == 0.0


def test_r1_linear_discriminator_analytic_value():
    torch.manual_seed(11)
    w = torch.randn(1, 1, 4, 4, 4, dtype=torch.float64)
    w = w / w.reshape(-1).norm()  # ||w||^2 = 1

    def linear_d(x):
        return (x * w).sum(dim=(1, 2, 3, 4), keepdim=True)

    real = torch.rand(3, 1, 4, 4, 4, dtype=torch.float64)
    val = float(r1_penalty(linear_d, real, gamma=10.0))
    assert val == pytest.approx(5.0, abs=1e-5)


def test_r1_invariant_to_constant_bias():
    torch.manual_seed(12)
    w = torch.randn(1, 1, 4, 4, 4, dtype=torch.float64)

    def d(x):
        return (x * w).sum(dim=(1, 2, 3, 4))

    def d_biased(x):
        return d(x) + 123.0

    real = torch.rand(2, 1, 4, 4, 4, dtype=torch.float64)
    assert float(r1_penalty(d, real, 10.0)) == pytest.approx(float(r1_penalty(d_biased, real, 10.0)), rel=1e-12)


# ------------------------------------------------------------ loss weights


def test_loss_weights_defaults_and_validation():
    w = LossWeights()
    assert (w.w_l1, w.w_ssim, w.w_adv) == (0.2, 0.8, 0.2)
    assert w.r1_every == 2
    with pytest.raises(ValueError):
        LossWeights(w_adv=-1).validate()


def test_breakdown_total_d():
    bd = LossBreakdown.from_parts(LossWeights(), l1=0.1, ssim_loss=0.2, d_real=0.3, d_fake=0.4, r1=0.5)
    assert bd.total_d == pytest.approx(1.2)
    assert bd.finite()
    bad = LossBreakdown.from_parts(LossWeights(), l1=float("nan"), ssim_loss=0.0)
    assert not bad.finite()
