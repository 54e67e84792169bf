import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from triadapt.camera import CameraConfig
from triadapt.losses import (LossWeights, PoseConditionedDiscriminator, adversarial_losses, depth_similarity,
                             discriminate, geometric_loss, normal_smoothness, pose_loss, r1_penalty)
from triadapt.renderer import gaussian_kernel


def _disc(**kw):
    torch.manual_seed(0)
    return PoseConditionedDiscriminator(16, (8, 8), **kw).double()


def test_discriminator_determinism_and_shape():
    D = _disc()
    x = torch.rand(4, 3, 16, 16, dtype=torch.float64)
    th = torch.rand(4, 2, dtype=torch.float64)
    a, b = discriminate(D, x, th), discriminate(D, x, th)
    assert a.shape == (4,) and torch.equal(a, b)
    with pytest.raises(ValueError):
        D(torch.rand(1, 3, 8, 8, dtype=torch.float64), th[:1])


def test_pose_changes_logit():
    D = _disc()
    x = torch.rand(1, 3, 16, 16, dtype=torch.float64)
    a = D(x, torch.tensor([[0.3, 0.1]], dtype=torch.float64))
    b = D(x, torch.tensor([[-0.3, -0.1]], dtype=torch.float64))
    assert not torch.allclose(a, b)


def test_freeze_flags():
    D = _disc(freeze_depth=1)
    frozen = {id(p) for p in D.frozen_parameters()}
    assert frozen == {id(p) for p in D.blocks[0].parameters()}
    assert all(not p.requires_grad for p in D.blocks[0].parameters())
    assert {id(p) for p in D.trainable_parameters()}.isdisjoint(frozen)
    D.set_freeze_depth(0)
    assert all(p.requires_grad for p in D.parameters())


def test_freeze_depth_maps_first_two_of_four_blocks():
    D = PoseConditionedDiscriminator()
    assert D.freeze_depth == 2 and len(D.blocks) == 4
    assert D.blocks[0].from_rgb is not None


def test_frozen_blocks_unchanged_by_optimizer():
    D = _disc(freeze_depth=1)
    before = [p.clone() for p in D.blocks[0].parameters()]
    opt = torch.optim.Adam(D.trainable_parameters(), lr=1e-2)
    for _ in range(3):
        loss = D(torch.rand(4, 3, 16, 16, dtype=torch.float64), torch.rand(4, 2, dtype=torch.float64)).square().mean()
        opt.zero_grad()
        loss.backward()
        opt.step()
    for p, q in zip(before, D.blocks[0].parameters()):
        assert torch.equal(p, q)


def test_discriminate_pixel_gradcheck():
    D = _disc()
    x = torch.rand(2, 3, 16, 16, dtype=torch.float64, requires_grad=True)
    th = torch.rand(2, 2, dtype=torch.float64)
    assert torch.autograd.gradcheck(lambda img: D(img, th), (x,), eps=1e-6, atol=1e-6, rtol=1e-3)


def test_adversarial_values():
    zero = torch.zeros(3, dtype=torch.float64)
    d, g = adversarial_losses(zero, zero)
    assert d.item() == pytest.approx(2 * math.log(2)) and g.item() == pytest.approx(math.log(2))
    d, _ = adversarial_losses(torch.full((2,), 50.0), torch.full((2,), -50.0))
    assert d.item() < 1e-20


class _ConstantD(torch.nn.Module):
    def __init__(self):
        super().__init__()
        self.c = torch.nn.Parameter(torch.tensor(0.7))

    def forward(self, images, poses):
        return self.c + 0.0 * images.sum(dim=(1, 2, 3))


def test_r1_zero_for_constant_discriminator():
    assert r1_penalty(_ConstantD(), torch.rand(2, 3, 4, 4), None).item() == 0.0


def test_r1_matches_manual():
    D = _disc()
    x = torch.rand(2, 3, 16, 16, dtype=torch.float64)
    th = torch.rand(2, 2, dtype=torch.float64)
    val = r1_penalty(D, x, th)
    grads = []
    for i in range(2):
        xi = x[i:i + 1].clone().requires_grad_(True)
        # the minibatch-std head couples samples, so differentiate the batch sum
        xb = torch.cat([xi, x[1 - i:2 - i]] if i == 0 else [x[:1], xi])
        (g,) = torch.autograd.grad(D(xb, th).sum(), xi)
        grads.append(g.square().sum())
    assert val.item() == pytest.approx(torch.stack(grads).mean().item(), rel=1e-10)


# geometric priors ----------------------------------------------------------------

def test_depth_similarity_identities():
    d = torch.rand(2, 20, 20, dtype=torch.float64)
    assert depth_similarity(d, d).item() == 0.0
    assert depth_similarity(d + 0.37, d).item() == pytest.approx(0.37**2, abs=1e-6)
    with pytest.raises(ValueError):
        depth_similarity(d, d[:, :10])


def test_depth_similarity_checkerboard_oracle():
    h = 24
    ii, jj = np.meshgrid(np.arange(h), np.arange(h), indexing="ij")
    board = np.where((ii + jj) % 2 == 0, 1.0, -1.0)
    # oracle: direct convolution with reflection padding
    k = gaussian_kernel(15, 5.0).numpy()
    padded = np.pad(board, 7, mode="reflect")
    blurred = np.array([[np.sum(padded[i:i + 15, j:j + 15] * k) for j in range(h)] for i in range(h)])
    expected = np.mean(blurred**2)
    value = depth_similarity(torch.as_tensor(board)[None], torch.zeros(1, h, h, dtype=torch.float64)).item()
    assert value == pytest.approx(expected, rel=1e-9, abs=1e-15)
    assert value < 1e-3


def test_normal_smoothness_values():
    n = torch.zeros(1, 3, 8, 8, dtype=torch.float64)
    n[:, 2] = 1.0
    assert normal_smoothness(n).item() == 0.0
    s = 0.05
    ramp = n.clone()
    ramp[:, 0] = s * torch.arange(8, dtype=torch.float64)[None, None, :]
    assert normal_smoothness(ramp).item() == pytest.approx(s**2, rel=1e-12)


@settings(max_examples=20)
@given(st.integers(0, 10_000))
def test_normal_smoothness_flip_invariant(seed):
    n = torch.randn(2, 3, 7, 9, generator=torch.Generator().manual_seed(seed), dtype=torch.float64)
    base = normal_smoothness(n)
    torch.testing.assert_close(normal_smoothness(n.flip(-1)), base)
    torch.testing.assert_close(normal_smoothness(n.flip(-2)), base)
    assert base >= 0


def test_pose_loss_values():
    assert pose_loss(torch.zeros(3, 2), torch.zeros(3, 2)).item() == 0.0
    assert pose_loss(torch.tensor([[0.1, 0.0]]), torch.zeros(1, 2)).item() == pytest.approx(0.01)
    t = torch.zeros(2, 2, dtype=torch.float64)
    p = torch.tensor([[0.1, 0.0], [math.sqrt(0.03), 0.0]], dtype=torch.float64)
    assert pose_loss(t, p).item() == pytest.approx(0.02)


def _geo_inputs(seed=0):
    g = torch.Generator().manual_seed(seed)
    d1 = 2 + torch.rand(2, 16, 16, generator=g, dtype=torch.float64)
    d2 = 2 + torch.rand(2, 16, 16, generator=g, dtype=torch.float64)
    n = torch.randn(2, 3, 16, 16, generator=g, dtype=torch.float64)
    t1, t2 = torch.rand(2, 2, generator=g, dtype=torch.float64), torch.rand(2, 2, generator=g, dtype=torch.float64)
    return d1, d2, n, t1, t2


def test_geometric_loss_selectors_and_linearity():
    d1, d2, n, t1, t2 = _geo_inputs()
    zero = geometric_loss(d1, d2, n, t1, t2, LossWeights(0, 0, 0))
    assert zero.total.item() == 0.0
    sel = geometric_loss(d1, d2, n, t1, t2, LossWeights(1, 0, 0))
    assert sel.total.item() == depth_similarity(d1, d2).item()
    a, b, c = depth_similarity(d1, d2), normal_smoothness(n), pose_loss(t1, t2)
    mix = geometric_loss(d1, d2, n, t1, t2, LossWeights(1, 2, 3))
    assert mix.total.item() == pytest.approx((a + 2 * b + 3 * c).item(), rel=1e-12)
    assert (mix.depth, mix.normal, mix.pose) == (a, b, c)


@settings(max_examples=20)
@given(st.floats(0, 5), st.floats(0, 5), st.floats(0, 5), st.floats(0, 5))
def test_geometric_loss_linear_in_weights(a1, a2, lam, mu):
    d1, d2, n, t1, t2 = _geo_inputs(1)
    f = lambda w: geometric_loss(d1, d2, n, t1, t2, w).total.item()
    combo = f(LossWeights(lam * a1 + mu * a2, lam + mu, 0.0))
    split = lam * f(LossWeights(a1, 1.0, 0.0)) + mu * f(LossWeights(a2, 1.0, 0.0))
    assert combo == pytest.approx(split, rel=1e-9, abs=1e-12)


def test_geometric_loss_derives_normals():
    d1, d2, _, t1, t2 = _geo_inputs()
    cam = CameraConfig()
    out = geometric_loss(d1, None, None, t1, None, LossWeights(), cam)
    assert out.depth.item() == 0.0 and out.pose.item() == 0.0 and out.normal.item() > 0


def test_loss_weights_validation():
    with pytest.raises(ValueError):
        LossWeights(alpha=-1.0)


def test_depth_similarity_gradcheck():
    d1 = torch.rand(1, 6, 6, dtype=torch.float64, requires_grad=True)
    d2 = torch.rand(1, 6, 6, dtype=torch.float64)
    assert torch.autograd.gradcheck(lambda d: depth_similarity(d, d2, 5, 2.0), (d1,), eps=1e-6, atol=1e-8, rtol=1e-3)


def test_normal_smoothness_gradcheck():
    n = torch.randn(1, 3, 5, 5, dtype=torch.float64, requires_grad=True)
    assert torch.autograd.gradcheck(normal_smoothness, (n,), eps=1e-6, atol=1e-8, rtol=1e-3)


def test_normal_smoothness_through_depth_gradcheck():
    from triadapt.renderer import normals_from_depth
    cam = CameraConfig()
    d = (2 + 0.1 * torch.rand(1, 5, 5, dtype=torch.float64)).requires_grad_(True)
    f = lambda depth: normal_smoothness(normals_from_depth(depth, cam))
    assert torch.autograd.gradcheck(f, (d,), eps=1e-6, atol=1e-8, rtol=1e-3)


def test_pose_loss_gradcheck():
    p = torch.rand(3, 2, dtype=torch.float64, requires_grad=True)
    t = torch.rand(3, 2, dtype=torch.float64)
    assert torch.autograd.gradcheck(lambda x: pose_loss(t, x), (p,), eps=1e-6, atol=1e-8, rtol=1e-3)
