import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from axialinterp.flownet import GeneratorOutput
from axialinterp.objectives import (
    LossReport,
    LossWeights,
    assemble_generator_total,
    critic_loss,
    distill_loss,
    generator_loss,
    lap_loss,
    laplacian_pyramid,
)


def rand(*shape, seed=0):
    return torch.rand(*shape, generator=torch.Generator().manual_seed(seed), dtype=torch.float64)


def test_default_weights():
    w = LossWeights()
    assert (w.distill, w.adv, w.gp) == (0.01, 0.001, 10.0)
    with pytest.raises(ValueError):
        LossWeights(adv=-1)


# -- Laplacian pyramid ------------------------------------------------------


def test_lap_zero_on_equal():
    a = rand(2, 1, 32, 32)
    assert lap_loss(a, a).item() == 0.0


def test_lap_constant_hand_case():
    # band levels of a constant vanish; only the 2**4-weighted low-pass remains
    a = torch.zeros(1, 1, 32, 32, dtype=torch.float64)
    b = torch.ones_like(a)
    assert lap_loss(a, b).item() == pytest.approx(16.0, abs=1e-12)
    assert lap_loss(a, b).item() == pytest.approx(oracles.lap_loss(a.numpy(), b.numpy()), abs=1e-12)


@pytest.mark.parametrize("shape", [(1, 1, 32, 32), (2, 1, 16, 16), (1, 2, 20, 28), (1, 1, 7, 32)])
def test_lap_matches_oracle(shape):
    a, b = rand(*shape, seed=1), rand(*shape, seed=2)
    assert abs(lap_loss(a, b).item() - oracles.lap_loss(a.numpy(), b.numpy())) < 1e-6


def test_pyramid_reconstructs():
    x = rand(1, 1, 32, 32)
    from axialinterp.objectives import _upsample

    levels = laplacian_pyramid(x)
    cur = levels[-1]
    for band in reversed(levels[:-1]):
        cur = band + _upsample(cur)
    torch.testing.assert_close(cur, x)


@settings(deadline=None, max_examples=20)
@given(st.integers(0, 10_000), st.integers(1, 40), st.integers(1, 40))
def test_lap_symmetric_positive(seed, h, w):
    a, b = rand(1, 1, h, w, seed=seed), rand(1, 1, h, w, seed=seed + 1)
    ab, ba = lap_loss(a, b).item(), lap_loss(b, a).item()
    assert ab == pytest.approx(ba, abs=1e-12)
    assert ab > 0


def test_lap_shape_mismatch():
    with pytest.raises(ValueError):
        lap_loss(torch.zeros(1, 1, 8, 8), torch.zeros(1, 1, 8, 9))


def test_lap_gradient_fd():
    a = rand(1, 1, 16, 16, seed=3).requires_grad_(True)
    b = rand(1, 1, 16, 16, seed=4)
    lap_loss(a, b).backward()
    fd = oracles.central_difference(lambda x: lap_loss(torch.from_numpy(x), b).item(), a.detach().numpy())
    assert oracles.relative_error(fd, a.grad.numpy()) < 1e-3


# -- distillation ------------------------------------------------------------


def test_distill_zero_when_equal():
    t = rand(2, 4, 8, 8)
    assert distill_loss([t.clone(), t.clone(), t.clone()], t).item() == 0.0


def test_distill_hand_case():
    teacher = torch.zeros(1, 4, 2, 2, dtype=torch.float64)
    first = teacher.clone()
    first[:, 0] = 1.0
    got = distill_loss([first, teacher.clone(), teacher.clone()], teacher).item()
    # torch's vectorized float64 sqrt may land one ulp from the correctly rounded value
    assert abs(got - math.sqrt(2)) <= math.ulp(math.sqrt(2))


@settings(deadline=None, max_examples=15)
@given(st.integers(0, 10_000))
def test_distill_homogeneity(seed):
    t = rand(2, 4, 6, 6, seed=seed)
    flows = [rand(2, 4, 6, 6, seed=seed + k + 1) for k in range(3)]
    base = distill_loss(flows, t).item()
    doubled = distill_loss([t + 2 * (f - t) for f in flows], t).item()
    assert doubled == pytest.approx(math.sqrt(2) * base, rel=1e-12)


def test_distill_matches_oracle():
    t = rand(2, 4, 8, 8, seed=9)
    flows = [rand(2, 4, 8, 8, seed=10 + k) for k in range(3)]
    assert abs(distill_loss(flows, t).item() - oracles.distill_loss([f.numpy() for f in flows], t.numpy())) < 1e-6


def test_distill_teacher_detached():
    t = rand(1, 4, 4, 4).requires_grad_(True)
    s = rand(1, 4, 4, 4, seed=1).requires_grad_(True)
    distill_loss([s], t).backward()
    assert t.grad is None and s.grad is not None


def test_distill_gradient_fd():
    t = rand(1, 4, 16, 16, seed=5)
    s = rand(1, 4, 16, 16, seed=6).requires_grad_(True)
    distill_loss([s], t).backward()
    fd = oracles.central_difference(lambda x: distill_loss([torch.from_numpy(x)], t).item(), s.detach().numpy())
    assert oracles.relative_error(fd, s.grad.numpy()) < 1e-3


def test_distill_zero_gradient_finite():
    t = rand(1, 4, 4, 4)
    s = t.clone().requires_grad_(True)
    distill_loss([s], t).backward()
    assert torch.isfinite(s.grad).all()


def test_distill_upsamples_coarse_flows():
    t = torch.zeros(1, 4, 8, 8)
    coarse = torch.zeros(1, 4, 4, 4)
    assert distill_loss([coarse], t).item() == 0.0


# -- assembled objectives ----------------------------------------------------


def test_generator_total_arithmetic():
    w = LossWeights(0.01, 0.001)
    assert assemble_generator_total(0.5, 0.4, 2.0, 10.0, w) == pytest.approx(0.91, abs=1e-12)


def _perfect_output(ig):
    flow = torch.zeros(ig.shape[0], 4, *ig.shape[-2:])
    return GeneratorOutput(flows=[flow] * 3, student=ig.clone(), teacher=ig.clone(), teacher_flow=flow.clone())


def test_generator_loss_perfect_reconstruction():
    ig = torch.rand(2, 1, 32, 32)
    scores = torch.tensor([3.0, 5.0])
    total, rep = generator_loss(_perfect_output(ig), ig, LossWeights(), scores)
    assert total.item() == pytest.approx(-0.001 * 4.0)
    assert rep.rec_student == 0 and rep.rec_teacher == 0 and rep.distill == 0
    assert rep.total_G == pytest.approx(assemble_generator_total(rep.rec_student, rep.rec_teacher, rep.distill, rep.adv_gen, LossWeights()))


def test_generator_loss_needs_scores():
    ig = torch.rand(1, 1, 32, 32)
    with pytest.raises(ValueError, match="critic"):
        generator_loss(_perfect_output(ig), ig, LossWeights(adv=0.001))
    total, _ = generator_loss(_perfect_output(ig), ig, LossWeights(adv=0.0))
    assert total.item() == 0.0


def test_generator_loss_needs_teacher():
    ig = torch.rand(1, 1, 32, 32)
    out = _perfect_output(ig)
    out.teacher = None
    with pytest.raises(ValueError, match="teacher"):
        generator_loss(out, ig, LossWeights(adv=0))


def test_critic_loss_cases():
    w = LossWeights()
    s = torch.tensor([1.0, 2.0])
    assert critic_loss(s, s.clone(), 0.0, w).item() == 0.0
    assert critic_loss(torch.tensor([3.0, 3.0]), torch.tensor([0.5, 1.5]), 0.1, w).item() == pytest.approx(-1.0)
    gp = torch.tensor(0.3, requires_grad=True)
    critic_loss(s, s, gp, w).backward()
    assert gp.grad.item() == pytest.approx(10.0)


def test_critic_loss_matches_oracle():
    real, fake = torch.randn(8, dtype=torch.float64), torch.randn(8, dtype=torch.float64)
    got = critic_loss(real, fake, 0.37, LossWeights()).item()
    assert abs(got - oracles.critic_loss(real.numpy(), fake.numpy(), 0.37, 10.0)) < 1e-6


def test_report_dict():
    assert set(LossReport().as_dict()) == {"rec_student", "rec_teacher", "distill", "adv_gen", "critic_wass", "critic_gp", "total_G", "total_D"}
