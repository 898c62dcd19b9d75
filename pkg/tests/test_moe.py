"""MoE routing and expert forward: selection rules, exact identities,
gradients, parameter accounting."""

import numpy as np
import pytest

from styleroute.autograd import ShapeError, Tensor
from styleroute.gradcheck import grad_check
from styleroute.moe import (
    LoraExpert,
    MoEConfig,
    MoESite,
    Router,
    RouterDecision,
    expert_param_count,
    moe_forward,
    route,
    route_weights,
    top_k_indices,
)


def _identity_router(logits: np.ndarray) -> Router:
    """Router returning the given logits for e_s = one-hot basis sums."""
    n = len(logits)
    return Router(weight=Tensor(np.zeros((1, n))), bias=Tensor(np.asarray(logits, dtype=np.float64)))


def _experts(rng, n, d_in, d_out, r, zero_b=False):
    out = []
    for _ in range(n):
        e = LoraExpert.init(rng, d_in, d_out, r)
        if not zero_b:
            e.b.data = rng.standard_normal(e.b.data.shape) * 0.3
        out.append(e)
    return out


def test_route_example_top2():
    decision = route(np.zeros(1), _identity_router([2.0, 1.0, 0.0, -1.0]), k=2)
    assert decision.indices == (0, 1)
    assert np.allclose(decision.weights, [0.7311, 0.2689], atol=1e-4)


def test_route_all_equal_ties_to_lowest_indices():
    decision = route(np.zeros(1), _identity_router([5.0, 5.0, 5.0, 5.0]), k=3)
    assert decision.indices == (0, 1, 2)
    assert np.allclose(decision.weights, np.ones(3) / 3, atol=1e-12)


def test_route_k_equals_n_is_plain_softmax():
    logits = np.array([0.5, -1.0, 2.0])
    decision = route(np.zeros(1), _identity_router(logits), k=3)
    e = np.exp(logits - logits.max())
    assert decision.indices == (0, 1, 2)
    assert np.allclose(decision.weights, e / e.sum(), atol=1e-12)


def test_route_rejects_k_above_n():
    with pytest.raises(ValueError):
        route(np.zeros(1), _identity_router([1.0, 2.0]), k=3)


def test_route_rejects_non_finite_embedding():
    with pytest.raises(ValueError):
        route(np.array([np.nan]), _identity_router([1.0, 2.0]), k=1)


def test_top_k_tie_stability():
    assert top_k_indices(np.array([1.0, 3.0, 3.0, 3.0]), 2) == (1, 2)
    assert top_k_indices(np.array([2.0, 2.0]), 1) == (0,)


def test_route_properties_randomized():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        n = int(rng.integers(2, 17))
        k = int(rng.integers(1, n + 1))
        router = Router.init(rng, 6, n)
        e_s = rng.standard_normal(6)
        decision = route(e_s, router, k)
        assert len(set(decision.indices)) == k
        assert (decision.weights > 0).all()
        assert abs(decision.weights.sum() - 1.0) < 1e-9
        logits = e_s @ router.weight.data + router.bias.data
        order = sorted(range(n), key=lambda i: (-logits[i], i))[:k]
        assert set(decision.indices) == set(order)
        # shift invariance
        shifted = Router(weight=router.weight, bias=Tensor(router.bias.data + 37.5))
        d2 = route(e_s, shifted, k)
        assert d2.indices == decision.indices
        assert np.allclose(d2.weights, decision.weights, atol=1e-12)


def test_moe_forward_zero_lora_identity_bit_exact():
    rng = np.random.default_rng(1)
    experts = _experts(rng, 4, 6, 5, 2, zero_b=True)
    shared = LoraExpert.init(rng, 6, 5, 2)
    h = rng.standard_normal(6)
    base = rng.standard_normal(5)
    decision = RouterDecision(indices=(0, 2), weights=np.array([0.6, 0.4]))
    out = moe_forward(h, base, decision, experts, shared, alpha=4.0, r=2)
    assert (out.data == base).all()


def test_moe_forward_scalar_example():
    # base 4, alpha=r=1, shared update 0.5, one expert w=1 with update 0.25, h=2
    shared = LoraExpert(a=Tensor(np.array([[1.0]])), b=Tensor(np.array([[0.5]])))
    expert = LoraExpert(a=Tensor(np.array([[0.5]])), b=Tensor(np.array([[0.5]])))
    decision = RouterDecision(indices=(0,), weights=np.array([1.0]))
    out = moe_forward(np.array([2.0]), np.array([4.0]), decision, [expert], shared, alpha=1.0, r=1)
    assert abs(out.item() - 5.5) < 1e-12


def test_moe_forward_alpha_linearity():
    rng = np.random.default_rng(2)
    experts = _experts(rng, 3, 5, 5, 2)
    shared = _experts(rng, 1, 5, 5, 2)[0]
    h = rng.standard_normal(5)
    base = rng.standard_normal(5)
    decision = RouterDecision(indices=(1, 2), weights=np.array([0.3, 0.7]))
    d1 = moe_forward(h, base, decision, experts, shared, alpha=2.0, r=2).data - base
    d2 = moe_forward(h, base, decision, experts, shared, alpha=4.0, r=2).data - base
    assert np.allclose(d2, 2.0 * d1, atol=1e-12)


def test_moe_forward_linear_in_h():
    rng = np.random.default_rng(3)
    experts = _experts(rng, 3, 5, 4, 2)
    shared = _experts(rng, 1, 5, 4, 2)[0]
    decision = RouterDecision(indices=(0, 1), weights=np.array([0.5, 0.5]))
    zero = np.zeros(4)
    corr = lambda h: moe_forward(h, zero, decision, experts, shared, alpha=2.0, r=2).data
    h1, h2 = rng.standard_normal(5), rng.standard_normal(5)
    assert np.allclose(corr(h1 + h2), corr(h1) + corr(h2), atol=1e-12)
    assert np.allclose(corr(2.5 * h1), 2.5 * corr(h1), atol=1e-12)


def test_moe_forward_shape_mismatch_rejected():
    rng = np.random.default_rng(4)
    experts = _experts(rng, 2, 5, 4, 2)
    shared = _experts(rng, 1, 6, 4, 2)[0]  # wrong d_in
    decision = RouterDecision(indices=(0,), weights=np.array([1.0]))
    with pytest.raises(ShapeError):
        moe_forward(np.zeros(5), np.zeros(4), decision, experts, shared, alpha=1.0, r=2)


def test_expert_permutation_equivariance():
    rng = np.random.default_rng(5)
    n, d, r = 6, 5, 2
    router = Router.init(rng, 4, n)
    experts = _experts(rng, n, d, d, r)
    shared = _experts(rng, 1, d, d, r)[0]
    e_s = rng.standard_normal(4)
    h = rng.standard_normal(d)
    base = rng.standard_normal(d)
    decision = route(e_s, router, 2)
    out = moe_forward(h, base, decision, experts, shared, alpha=2.0, r=r)

    perm = rng.permutation(n)
    router_p = Router(weight=Tensor(router.weight.data[:, perm]), bias=Tensor(router.bias.data[perm]))
    experts_p = [experts[i] for i in perm]
    decision_p = route(e_s, router_p, 2)
    # slot j of the permuted layer is original expert perm[j]
    assert set(perm[list(decision_p.indices)]) == set(decision.indices)
    out_p = moe_forward(h, base, decision_p, experts_p, shared, alpha=2.0, r=r)
    assert np.allclose(out.data, out_p.data, atol=1e-12)


def test_grad_check_moe_forward_all_parameters():
    rng = np.random.default_rng(6)
    n, d_in, d_out, r, k = 4, 6, 5, 2, 2
    router = Router.init(rng, 4, n)
    experts = _experts(rng, n, d_in, d_out, r)
    shared = _experts(rng, 1, d_in, d_out, r)[0]
    e_s = Tensor(rng.standard_normal(4))
    h = rng.standard_normal(d_in)
    base = rng.standard_normal(d_out)

    def f():
        decision = route_weights(router.logits(e_s), k)
        return moe_forward(h, base, decision, experts, shared, alpha=2.0, r=r).mean()

    params = [router.weight, router.bias, shared.a, shared.b]
    for ex in experts:
        params += [ex.a, ex.b]
    assert grad_check(f, params, eps=1e-6) < 1e-5


def test_unselected_experts_receive_zero_gradient():
    rng = np.random.default_rng(7)
    router = Router.init(rng, 4, 4)
    experts = _experts(rng, 4, 5, 5, 2)
    shared = _experts(rng, 1, 5, 5, 2)[0]
    e_s = Tensor(rng.standard_normal(4))
    decision = route_weights(router.logits(e_s), 2)
    out = moe_forward(rng.standard_normal(5), rng.standard_normal(5), decision, experts, shared, 2.0, 2).mean()
    out.backward()
    selected = set(decision[0])
    for i, ex in enumerate(experts):
        if i in selected:
            assert ex.a.grad is not None
        else:
            assert ex.a.grad is None and ex.b.grad is None


def test_routing_determinism():
    rng = np.random.default_rng(8)
    router = Router.init(rng, 6, 8)
    e_s = rng.standard_normal(6)
    first = route(e_s, router, 3)
    for _ in range(10):
        again = route(e_s, router, 3)
        assert again.indices == first.indices
        assert (again.weights == first.weights).all()


def test_expert_param_count_example():
    cfg = MoEConfig(num_experts=2, top_k=1, rank=2, alpha=1.0, sites=("attn.q",))
    emb = 3
    total = expert_param_count(cfg, [(8, 8)], emb)
    assert total == 64 + 32 + (3 * 2 + 2)


def test_expert_param_count_no_sites():
    cfg = MoEConfig(num_experts=4, top_k=2, rank=2, alpha=1.0, sites=())
    assert expert_param_count(cfg, [], 8) == 0


def test_expert_param_count_matches_site_enumeration():
    rng = np.random.default_rng(9)
    for _ in range(20):
        n = int(rng.integers(1, 9))
        r = int(rng.integers(1, 5))
        emb = int(rng.integers(2, 17))
        d_in = int(rng.integers(2, 12))
        d_out = int(rng.integers(2, 12))
        cfg = MoEConfig(num_experts=n, top_k=1, rank=r, alpha=1.0, sites=("attn.q",))
        site = MoESite.init("s", rng, d_in, d_out, emb, cfg)
        assert expert_param_count(cfg, [(d_in, d_out)], emb) == site.param_count()


def test_moe_exceeds_single_lora_when_experts_ge_2():
    emb = 16
    dims = [(64, 64), (64, 256)]
    for n in (2, 4, 16):
        moe = expert_param_count(MoEConfig(num_experts=n, top_k=1, rank=8), dims, emb)
        single = sum(8 * d_in + d_out * 8 for d_in, d_out in dims)
        assert moe > single


def test_config_validation():
    with pytest.raises(ValueError):
        MoEConfig(num_experts=4, top_k=5)
    with pytest.raises(ValueError):
        MoEConfig(rank=0)
    with pytest.raises(ValueError):
        MoEConfig(alpha=0.0)
    cfg = MoEConfig()
    assert (cfg.num_experts, cfg.top_k, cfg.rank) == (16, 2, 8)
