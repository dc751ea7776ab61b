import numpy as np
import pytest
import torch

from ugot.core import ConfigError, ValidationError
from ugot.sampler import DepthSamples
from ugot.transport import (DiscreteDistribution, OTProblem, PatchLayout, SinkhornWarning,
                            entropic_objective, ot_dirac, patch_aggregate, patch_softmax, sinkhorn,
                            sinkhorn_batched, ugot_loss)

from oracles import brute_force_entropic, random_ot_instance


def problem(x, a, y, b, eps=0.05, p=2):
    return OTProblem(DiscreteDistribution(x, a), DiscreteDistribution(y, b), p, eps)


def test_distribution_validation():
    with pytest.raises(ValidationError):
        DiscreteDistribution([0, 1], [0.5, 0.6])
    with pytest.raises(ValidationError):
        DiscreteDistribution([0, 1], [1.5, -0.5])
    with pytest.raises(ValidationError):
        DiscreteDistribution([0, 1], [1.0])


def test_identical_distributions_small_distance():
    x = np.array([0.0, 1.0, 2.0])
    r = sinkhorn(problem(x, [1 / 3] * 3, x, [1 / 3] * 3, eps=1e-3), max_iters=2000)
    assert r.distance < 1e-6


def test_dirac_to_dirac():
    r = sinkhorn(problem([1.0], [1.0], [3.0], [1.0]))
    assert r.distance == pytest.approx(4.0)


def test_epsilon_must_be_positive():
    with pytest.raises(ConfigError):
        sinkhorn(problem([0, 1], [0.5, 0.5], [0], [1.0], eps=0.0))


def test_marginals_and_plan_recorded():
    rng = np.random.default_rng(0)
    x, a, y, b = random_ot_instance(rng, 4, 4)
    p = problem(x, a, y, b, eps=0.1)
    r = sinkhorn(p)
    np.testing.assert_allclose(r.plan.sum(1), a, atol=1e-6)
    np.testing.assert_allclose(r.plan.sum(0), b, atol=1e-6)
    assert p.plan is r.plan and r.converged


def test_non_convergence_warns():
    p = problem([0.0, 0.4, 0.9, 1.0], [0.1, 0.2, 0.3, 0.4], [0.1, 0.5, 0.8], [0.5, 0.3, 0.2],
                eps=0.01)
    with pytest.warns(SinkhornWarning):
        r = sinkhorn(p, max_iters=2)
    assert not r.converged


@pytest.mark.parametrize("seed", range(10))
@pytest.mark.parametrize("eps", [0.5, 0.05])
def test_sinkhorn_matches_brute_force(seed, eps):
    x, a, y, b = random_ot_instance(np.random.default_rng(seed))
    r = sinkhorn(problem(x, a, y, b, eps))
    C = np.abs(x[:, None] - y[None]) ** 2
    assert r.objective == pytest.approx(brute_force_entropic(a, b, C, eps), abs=1e-6)


def test_entropic_objective_handles_zero_entries():
    T = np.array([[0.5, 0.0], [0.0, 0.5]])
    assert entropic_objective(T, np.ones((2, 2)), 0.1) == pytest.approx(1 + 0.1 * np.log(0.5))


def test_ot_dirac_closed_form():
    assert ot_dirac([1.0, 2.0, 4.0], [0.5, 0.25, 0.25], 2.0) == pytest.approx(0.5 + 0 + 1.0)
    assert ot_dirac([1.0, 3.0], [0.5, 0.5], 2.0, cost_exponent=1) == pytest.approx(1.0)
    t = ot_dirac(torch.tensor([[1.0, 2.0]]), torch.tensor([[0.5, 0.5]]), torch.tensor([0.0]))
    assert t.shape == (1,) and float(t) == pytest.approx(2.5)


@pytest.mark.parametrize("seed", range(5))
def test_ot_dirac_equals_small_epsilon_sinkhorn(seed):
    rng = np.random.default_rng(100 + seed)
    n = int(rng.integers(1, 9))
    x, w, t = rng.uniform(0, 2, n), rng.dirichlet(np.ones(n)), float(rng.uniform(0, 2))
    r = sinkhorn(problem(x, w, [t], [1.0], eps=1e-6))
    assert r.distance == pytest.approx(float(ot_dirac(x, w, t)), abs=1e-9)


def test_sinkhorn_batched_matches_sinkhorn():
    rng = np.random.default_rng(3)
    x, a, y, b = random_ot_instance(rng, 4, 4)
    C = np.abs(x[:, None] - y[None]) ** 2
    plan = sinkhorn_batched(torch.tensor(a)[None], torch.tensor(b)[None], torch.tensor(C)[None],
                            0.1, iters=500)[0].numpy()
    np.testing.assert_allclose(plan, sinkhorn(problem(x, a, y, b, 0.1), tol=1e-12,
                                              max_iters=2000).plan, atol=1e-9)


def test_patch_layout_bounds_and_labels():
    rng = np.random.default_rng(0)
    for _ in range(50):
        lay = PatchLayout.draw(rng, 4, 16)
        assert 4 <= lay.side <= 16 and all(0 <= o < lay.side for o in lay.offset)
        lab, n = lay.labels(20, 30)
        assert lab.min() == 0 and lab.max() == n - 1
    lab, n = PatchLayout(4, (1, 2)).labels(8, 8)
    # first row block covers rows 0..0, then 1..4, then 5..7
    assert len(np.unique(lab[:, 0])) == 3
    with pytest.raises(ConfigError):
        PatchLayout.draw(rng, 5, 4)


def test_pixelwise_layout_one_patch_per_pixel():
    lab, n = PatchLayout.pixelwise().labels(5, 7)
    assert n == 35 and np.array_equal(lab.reshape(-1), np.arange(35))


def test_patch_softmax_uniform_and_masked():
    lab, n = PatchLayout(2).labels(4, 4)
    w = patch_softmax(np.zeros((4, 4)), np.ones((4, 4), bool), lab, n)
    np.testing.assert_allclose(w, 0.25)
    valid = np.ones((4, 4), bool)
    valid[0, 0] = False
    u = np.zeros((4, 4))
    u[0, 1] = np.log(2.0)
    w = patch_softmax(u, valid, lab, n)
    # patch (0,0): valid pixels (0,1),(1,0),(1,1) with exp(-U) = 0.5, 1, 1
    np.testing.assert_allclose([w[0, 0], w[0, 1], w[1, 0], w[1, 1]], [0, 0.2, 0.4, 0.4])


def _samples(values, weights=None, valid=None):
    v = torch.as_tensor(values, dtype=torch.float64)
    H, W, n = v.shape
    w = torch.full_like(v, 1.0 / n) if weights is None else torch.as_tensor(weights, dtype=torch.float64)
    ok = torch.ones(H, W, dtype=torch.bool) if valid is None else torch.as_tensor(valid)
    return DepthSamples(v, torch.zeros(H, W, n, 1, dtype=torch.float64), w, ok)


def test_ugot_loss_zero_when_samples_match_prior():
    prior = np.random.default_rng(0).uniform(1, 3, (8, 8))
    s = _samples(np.repeat(prior[..., None], 3, -1))
    assert float(ugot_loss(s, prior, layout=PatchLayout(4))) == pytest.approx(0, abs=1e-24)


def test_ugot_loss_pixelwise_hand_value():
    # 1x2 image, pixelwise patches: mean over pixels of sum_i w_i (d_i - g)^2
    s = _samples([[[1.0, 3.0], [2.0, 2.0]]], [[[0.25, 0.75], [0.5, 0.5]]])
    loss = ugot_loss(s, [[2.0, 0.0]], layout=PatchLayout.pixelwise())
    assert float(loss) == pytest.approx((1.0 + 4.0) / 2)


def test_uncertainty_downweights_pixels_inside_patch():
    prior = np.array([[1.0, 5.0]])
    s = _samples([[[1.0], [1.0]]])
    uniform = float(ugot_loss(s, prior, layout=PatchLayout(2)))
    u = np.array([[0.0, 10.0]])
    guided = float(ugot_loss(s, prior, uncertainty=u, layout=PatchLayout(2)))
    assert uniform == pytest.approx(4.0)
    assert guided < 1e-6


def test_ugot_loss_validates_inputs():
    s = _samples(np.ones((4, 4, 2)))
    with pytest.raises(ConfigError):
        ugot_loss(s, np.ones((3, 4)), layout=PatchLayout(2))
    with pytest.raises(ConfigError):
        ugot_loss(s, np.ones((4, 4)))
    with pytest.raises(ConfigError):
        ugot_loss(s, np.ones((4, 4)), layout=PatchLayout(2), solver="emd")


def test_sinkhorn_solver_equals_dirac_value_and_gradient():
    rng = np.random.default_rng(4)
    v = torch.tensor(rng.uniform(1, 3, (12, 12, 4)), requires_grad=True)
    w = torch.tensor(rng.dirichlet(np.ones(4), (12, 12)), requires_grad=True)
    prior = rng.uniform(1, 3, (12, 12))
    U = rng.uniform(0, 1, (12, 12))
    lay = PatchLayout(5, (2, 3))
    out = []
    for solver in ("dirac", "sinkhorn"):
        s = DepthSamples(v, None, w, torch.ones(12, 12, dtype=torch.bool))
        loss = ugot_loss(s, prior, U, layout=lay, solver=solver)
        out.append((loss.item(), *torch.autograd.grad(loss, (v, w))))
    assert out[0][0] == pytest.approx(out[1][0], rel=1e-12)
    torch.testing.assert_close(out[0][1], out[1][1], rtol=1e-9, atol=1e-12)
    torch.testing.assert_close(out[0][2], out[1][2], rtol=1e-9, atol=1e-12)


def test_patch_aggregate_ignores_invalid_pixels():
    v = torch.tensor([[[1.0], [3.0]], [[5.0], [100.0]]], dtype=torch.float64)
    w = torch.ones_like(v)
    valid = torch.tensor([[True, True], [True, False]])
    st = patch_aggregate(v, w, valid, PatchLayout(2))
    assert float(st.values[0, 0]) == pytest.approx(3.0)
    assert float(st.weights[0, 0]) == pytest.approx(1.0)


def test_zero_cost_matching_example():
    p = OTProblem(DiscreteDistribution([0, 1], [0.5, 0.5]), DiscreteDistribution([0, 1], [0.5, 0.5]),
                  epsilon=1e-3, cost=np.array([[0.0, 1.0], [1.0, 0.0]]))
    r = sinkhorn(p)
    assert r.distance < 1e-6
    np.testing.assert_allclose(r.plan, np.diag([0.5, 0.5]), atol=1e-6)


def test_ot_dirac_scale_equivariance_p1():
    rng = np.random.default_rng(8)
    x, w = rng.uniform(0, 3, 6), rng.dirichlet(np.ones(6))
    assert ot_dirac(2.5 * x, w, 2.5 * 1.3, 1) == pytest.approx(2.5 * ot_dirac(x, w, 1.3, 1),
                                                                 rel=1e-14)
    assert ot_dirac(x, w, x[0], 2) > 0
    assert ot_dirac(np.full(3, 1.5), [0.2, 0.3, 0.5], 1.5) == 0


def test_uncertainty_weighted_mean_example():
    # two-pixel patch with U = {0, ln 3}: weights 0.75 / 0.25
    s = _samples([[[1.0, 2.0], [5.0, 6.0]]])
    loss = ugot_loss(s, [[0.0, 0.0]], uncertainty=[[0.0, np.log(3.0)]], layout=PatchLayout(2))
    d1, d2 = 0.75 * 1 + 0.25 * 5, 0.75 * 2 + 0.25 * 6
    assert float(loss) == pytest.approx(0.5 * d1 ** 2 + 0.5 * d2 ** 2)


def test_uniform_uncertainty_matches_unweighted_and_pixelwise_average():
    rng = np.random.default_rng(9)
    vals, prior = rng.uniform(0, 2, (6, 6, 3)), rng.uniform(0, 2, (6, 6))
    w = rng.dirichlet(np.ones(3), (6, 6))
    s = _samples(vals, w)
    lay = PatchLayout(3, (1, 2))
    assert float(ugot_loss(s, prior, np.full((6, 6), 0.7), layout=lay)) == pytest.approx(
        float(ugot_loss(s, prior, None, layout=lay)), rel=1e-13)
    pix = float(ugot_loss(s, prior, None, layout=PatchLayout.pixelwise()))
    assert pix == pytest.approx(np.mean((w * (vals - prior[..., None]) ** 2).sum(-1)), rel=1e-13)


def test_monotone_uncertainty_suppression():
    lab, n = PatchLayout(2).labels(1, 2)
    prev = 1.0
    for u in (0.0, 0.5, 1.0, 3.0):
        w = patch_softmax(np.array([[u, 0.0]]), np.ones((1, 2), bool), lab, n)
        assert w[0, 0] < prev or u == 0.0
        prev = w[0, 0]


def test_patch_aggregate_examples():
    v = torch.tensor([[1.0, 2.0], [3.0, 4.0]], dtype=torch.float64)[..., None]
    st = patch_aggregate(v, torch.ones_like(v), torch.ones(2, 2, dtype=torch.bool), PatchLayout(2))
    assert float(st.values[0, 0]) == 2.5
    st = patch_aggregate(v, torch.ones_like(v), torch.ones(2, 2, dtype=torch.bool),
                         PatchLayout.pixelwise())
    assert st.values[:, 0].tolist() == [1.0, 2.0, 3.0, 4.0]
