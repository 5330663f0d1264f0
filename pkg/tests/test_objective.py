import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from alcot.config import AdaptiveLossConfig, ConfigError
from alcot.objective import adaptive_loss, ce_loss, objective, total_loss
from conftest import make_model


def router_params(model):
    return {n for n, _ in model.named_parameters() if n.startswith("router.")}


def test_ce_examples():
    v = 259
    assert float(ce_loss(torch.zeros(4, v), torch.tensor([0, 5, 7, 9]))) == pytest.approx(math.log(v))
    logits = torch.full((2, 10), -50.0)
    logits[0, 3] = logits[1, 1] = 50.0
    assert float(ce_loss(logits, torch.tensor([3, 1]))) < 1e-30
    with pytest.raises(ValueError):
        ce_loss(torch.zeros(2, 3, 5), torch.zeros(2, 4, dtype=torch.long))


def test_ce_mask_and_sum():
    logits = torch.randn(2, 3, 6)
    y = torch.randint(0, 6, (2, 3))
    mask = torch.tensor([[1, 1, 0], [1, 0, 0]], dtype=torch.bool)
    full = torch.nn.functional.cross_entropy(logits.view(-1, 6), y.view(-1), reduction="none").view(2, 3)
    assert torch.allclose(ce_loss(logits, y, mask), full[mask].mean())
    assert torch.allclose(ce_loss(logits, y, reduction="sum"), full.sum())


def test_adaptive_examples():
    cfg = AdaptiveLossConfig(lam=0.4, beta=10)
    one = adaptive_loss(torch.tensor([[0.5]]), torch.tensor([[1.0]]), torch.tensor([1]), cfg)
    assert float(one) == pytest.approx(0.2)
    half = adaptive_loss(torch.tensor([[1.0]]), torch.tensor([[0.5]]), torch.tensor([1]),
                         AdaptiveLossConfig(lam=1.0, beta=10))
    assert float(half) == pytest.approx(0.5 ** 10) == pytest.approx(9.765625e-4)


def test_adaptive_counts_only_executed_steps():
    cfg = AdaptiveLossConfig(lam=1.0, beta=1)
    g = torch.tensor([[0.5, 0.5, 0.0]])
    p = torch.tensor([[1.0, 1.0, 1.0]])
    assert float(adaptive_loss(g, p, torch.tensor([1]), cfg)) == pytest.approx(0.5)
    assert float(adaptive_loss(g, p, torch.tensor([3]), cfg)) == pytest.approx(1.0)


def test_adaptive_zero_strength():
    g = torch.rand(3, 4, requires_grad=True)
    loss = adaptive_loss(g, torch.rand(3, 4), torch.full((3,), 4), AdaptiveLossConfig(lam=0.0))
    loss.backward()
    assert float(loss.detach()) == 0.0 and bool((g.grad == 0).all())


def test_underflowed_target_probability_is_free():
    g = torch.tensor([[0.9]], requires_grad=True)
    loss = adaptive_loss(g, torch.tensor([[0.0]]), torch.tensor([1]), AdaptiveLossConfig())
    loss.backward()
    assert float(loss.detach()) == 0.0 and float(g.grad) == 0.0


def test_config_errors():
    for bad in (dict(lam=-0.1), dict(beta=0.5)):
        with pytest.raises(ConfigError):
            AdaptiveLossConfig(**bad)


def test_total_loss():
    assert float(total_loss(torch.tensor(2.0), torch.tensor(0.0))) == 2.0


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 4), st.integers(0, 10_000), st.floats(0.0, 0.5))
def test_penalty_monotone_in_gates(k, seed, bump):
    gen = torch.Generator().manual_seed(seed)
    g = torch.rand(3, k, generator=gen, dtype=torch.float64)
    p = torch.rand(3, k, generator=gen, dtype=torch.float64)
    k_star = torch.full((3,), k)
    cfg = AdaptiveLossConfig(lam=0.4, beta=2)
    g2 = g.clone()
    g2[1, k - 1] += bump
    a, b = adaptive_loss(g, p, k_star, cfg), adaptive_loss(g2, p, k_star, cfg)
    assert float(b) >= float(a)
    if bump > 1e-6 and float(p[1, k - 1]) > 0.01:
        assert float(b) > float(a)


def test_lambda_zero_total_is_ce():
    model = make_model(seed=1, max_latent=2)
    x = torch.randint(0, 256, (2, 9))
    out = model.unroll(x[:, :-1], x[:, 1:])
    total, ce, adaptive = objective(out, x[:, 1:], AdaptiveLossConfig(lam=0.0))
    assert float(adaptive.detach()) == 0.0 and torch.equal(total, ce)


def test_objective_needs_targets():
    model = make_model()
    out = model.unroll(torch.randint(0, 256, (1, 4)))
    with pytest.raises(ValueError):
        objective(out, torch.zeros(1, 4, dtype=torch.long), AdaptiveLossConfig())


# -- gradient structure ------------------------------------------------------------

def test_adaptive_term_has_no_gradient_outside_router():
    model = make_model(seed=2, router_std=0.5, max_latent=3, tau=0.05, precision="float64")
    x = torch.randint(0, 256, (2, 9))
    out = model.unroll(x[:, :-1], x[:, 1:])
    # a sharp LM head gives large p_target so the penalty is not vanishingly small
    _, _, adaptive = objective(out, x[:, 1:], AdaptiveLossConfig(lam=0.4, beta=1))
    names = [n for n, _ in model.named_parameters()]
    grads = torch.autograd.grad(adaptive, list(model.parameters()), allow_unused=True)
    routers = router_params(model)
    for n, g in zip(names, grads):
        if n not in routers:
            assert g is None or bool((g == 0).all()), n
    assert any(g is not None and bool((g != 0).any()) for n, g in zip(names, grads) if n in routers)

    # the penalty value itself does move with the LM head, so the zero is the cut, not flatness
    w = model.lm_head.weight
    with torch.no_grad():
        w[int(x[0, 1]), 0] += 1e-2
        bumped = objective(model.unroll(x[:, :-1], x[:, 1:]), x[:, 1:], AdaptiveLossConfig(lam=0.4, beta=1))[2]
    assert float(bumped.detach()) != float(adaptive.detach())


def test_router_learns_from_ce_alone():
    model = make_model(seed=3, max_latent=2)
    x = torch.randint(0, 256, (2, 9))
    out = model.unroll(x[:, :-1], x[:, 1:])
    _, ce, _ = objective(out, x[:, 1:], AdaptiveLossConfig(lam=0.0))
    ce.backward()
    assert float(model.router.heads[0].weight.grad.abs().sum()) > 0
    assert float(model.router.heads[0].bias.grad.abs()) > 0


def test_objective_finite_differences():
    model = make_model(seed=4, router_std=0.3, max_latent=2, tau=0.05, precision="float64", d_model=16,
                       d_ff=32, n_heads=2)
    cfg = AdaptiveLossConfig(lam=0.4, beta=2)
    x = torch.randint(0, 256, (2, 7))
    inp, y = x[:, :-1], x[:, 1:]
    base = model.unroll(inp, y)
    total, _, _ = objective(base, y, cfg)
    params = dict(model.named_parameters())
    grads = dict(zip(params, torch.autograd.grad(total, list(params.values()))))

    # the stop-gradient factors are constants of the surrogate, so freeze them at the base point
    z0, p0, k0 = base.z.detach(), base.p_target.detach(), base.k_star.clone()

    def surrogate():
        out = model.unroll(inp, y)
        assert torch.equal(out.k_star, k0), "probe step changed a halting decision"
        ce = torch.nn.functional.cross_entropy(out.logits.reshape(-1, out.logits.shape[-1]), y.reshape(-1))
        pen = torch.stack([model.step_gates(z0[:, :, k], k + 1)[0] for k in range(z0.shape[2])], dim=-1)
        return float(ce + adaptive_loss(pen * base.executed, p0, k0, cfg))

    rng = np.random.default_rng(0)
    names = list(params)
    probe = [names.index(n) for n in router_params(model)]
    probe += list(rng.integers(0, len(names), 32 - len(probe)))
    h = 1e-3
    with torch.no_grad():
        for i in probe:
            name = names[i]
            p = params[name]
            j = int(rng.integers(0, p.numel()))
            flat = p.view(-1)
            orig = float(flat[j])
            flat[j] = orig + h
            up = surrogate()
            flat[j] = orig - h
            down = surrogate()
            flat[j] = orig
            fd = (up - down) / (2 * h)
            an = float(grads[name].view(-1)[j])
            scale = max(abs(fd), abs(an), 1e-8)
            assert abs(fd - an) / scale <= 1e-4, (name, j, fd, an)
