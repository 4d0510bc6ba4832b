import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from mbj.losses import (
    LossConfig,
    circle_memory_loss,
    circle_memory_loss_batch,
    cosface_loss,
    cosine_logits,
    cross_entropy,
    fuse_losses,
    memory_loss_cls,
)

D = torch.float64


def central_difference(f, x, h=1e-6):
    """Numerical gradient of scalar ``f`` at ``x`` (float64 numpy), no autograd involved."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2 * h)
    return g


def check_gradient(loss_of, x0):
    x = torch.tensor(x0, dtype=D, requires_grad=True)
    loss_of(x).backward()
    numeric = central_difference(lambda a: float(loss_of(torch.tensor(a, dtype=D))), x0)
    analytic = x.grad.numpy()
    rel = np.linalg.norm(analytic - numeric) / max(np.linalg.norm(numeric), 1e-12)
    assert rel < 1e-4, rel


def unit2(c):
    return [c, math.sqrt(1 - c * c)]


# -- cross-entropy -------------------------------------------------------------

def test_uniform_logits_give_log_c():
    loss = cross_entropy(torch.zeros(4, 5, dtype=D), torch.tensor([0, 3, 9, 1]), torch.randn(10, 5, dtype=D))
    assert float(loss) == pytest.approx(math.log(10), abs=1e-12)


def test_two_logit_hand_value():
    # embedding [2, 0] against identity head gives logits [2, 0]
    loss = cross_entropy(torch.tensor([[2.0, 0.0]], dtype=D), torch.tensor([0]), torch.eye(2, dtype=D))
    assert float(loss) == pytest.approx(math.log1p(math.exp(-2)), abs=1e-6)
    assert float(loss) == pytest.approx(0.126928, abs=1e-6)


def test_cross_entropy_rejects_bad_labels():
    with pytest.raises(ValueError):
        cross_entropy(torch.zeros(1, 2), torch.tensor([2]), torch.eye(2))
    with pytest.raises(ValueError):
        cross_entropy(torch.zeros(0, 2), torch.tensor([], dtype=torch.long), torch.eye(2))


def test_cross_entropy_gradients_against_finite_differences():
    rng = np.random.default_rng(0)
    emb, w = rng.standard_normal((5, 4)), rng.standard_normal((6, 4))
    y = torch.tensor([0, 5, 2, 2, 1])
    check_gradient(lambda e: cross_entropy(e, y, torch.tensor(w)), emb)
    check_gradient(lambda ww: cross_entropy(torch.tensor(emb), y, ww), w)


# -- memory loss (classification) -------------------------------------------------

def test_empty_memory_is_graph_free_zero():
    w = torch.randn(3, 4, requires_grad=True)
    loss = memory_loss_cls(None, None, w)
    assert float(loss) == 0.0 and not loss.requires_grad
    assert float(memory_loss_cls(torch.zeros(0, 4), torch.zeros(0, dtype=torch.long), w)) == 0.0


def test_single_entry_equals_batch_cross_entropy():
    w, x, y = torch.randn(3, 4, dtype=D), torch.randn(1, 4, dtype=D), torch.tensor([2])
    assert float(memory_loss_cls(x, y, w)) == float(cross_entropy(x, y, w))


def test_memorized_features_get_no_gradient():
    w = torch.randn(3, 4, dtype=D, requires_grad=True)
    mem = torch.randn(5, 4, dtype=D, requires_grad=True)
    memory_loss_cls(mem, torch.tensor([0, 1, 2, 2, 1]), w).backward()
    assert mem.grad is None
    assert w.grad is not None and torch.count_nonzero(w.grad) > 0


@pytest.mark.parametrize("mem,batch,eta,expected", [(1, 2, 15, 17), (0, 4.5, 15, 4.5), (3, 1, 1 / 15, 1.2)])
def test_fusion_arithmetic(mem, batch, eta, expected):
    assert fuse_losses(mem, batch, eta) == pytest.approx(expected, abs=1e-12)


def test_loss_config_rejects_nonsense():
    for kw in ({"alpha": 0}, {"delta": -0.1}, {"eta": float("nan")}, {"eta": -1}):
        with pytest.raises(ValueError):
            LossConfig(**kw)


# -- CosFace -----------------------------------------------------------------------

def test_cosface_hand_value():
    x = torch.tensor([[1.0, 0.0]], dtype=D)
    w = torch.tensor([unit2(0.9), unit2(0.3)], dtype=D)
    loss = cosface_loss(x, torch.tensor([0]), w, alpha=30, delta=0.35)
    assert float(loss) == pytest.approx(math.log1p(math.exp(-7.5)), abs=1e-9)
    # the commonly quoted 5.5308e-4 is e^-7.5 itself; it agrees to 1.5e-7
    assert float(loss) == pytest.approx(5.5308e-4, abs=1e-6)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.5, 64))
def test_cosface_without_margin_is_scaled_cross_entropy(seed, alpha):
    g = torch.Generator().manual_seed(seed)
    x, w = torch.randn(6, 5, generator=g, dtype=D), torch.randn(4, 5, generator=g, dtype=D)
    y = torch.randint(0, 4, (6,), generator=g)
    expected = torch.nn.functional.cross_entropy(alpha * cosine_logits(x, w), y)
    assert float(cosface_loss(x, y, w, alpha, 0.0)) == pytest.approx(float(expected), rel=1e-12, abs=1e-12)


def test_cosface_rejects_nonpositive_scale():
    with pytest.raises(ValueError):
        cosface_loss(torch.ones(1, 2), torch.tensor([0]), torch.eye(2), alpha=0)


def test_cosface_gradients_against_finite_differences():
    rng = np.random.default_rng(1)
    x, w = rng.standard_normal((4, 3)), rng.standard_normal((5, 3))
    y = torch.tensor([4, 0, 0, 2])
    check_gradient(lambda a: cosface_loss(a, y, torch.tensor(w), 30, 0.35), x)
    check_gradient(lambda a: cosface_loss(torch.tensor(x), y, a, 30, 0.35), w)


def test_cosface_stable_at_large_scale():
    x = torch.tensor([[1.0, 0.0]], dtype=torch.float32, requires_grad=True)
    w = torch.tensor([[0.0, 1.0], [1.0, 0.0]])
    loss = cosface_loss(x, torch.tensor([0]), w, alpha=1000.0, delta=0.35)  # logits ~ 1e3
    loss.backward()
    assert float(loss.detach()) == pytest.approx(1350.0, rel=1e-5)
    assert torch.isfinite(x.grad).all()


# -- circle-style memory loss --------------------------------------------------------

def test_circle_hand_value():
    x = torch.tensor([1.0, 0.0], dtype=D)
    u = torch.tensor([unit2(0.8)], dtype=D)
    v = torch.tensor([unit2(0.2)], dtype=D)
    loss = circle_memory_loss(x, u, v, alpha=1.0, delta=0.0)
    assert float(loss) == pytest.approx(0.437488, abs=1e-6)


def test_circle_empty_sides_are_zero():
    x, p = torch.randn(4, dtype=D), torch.randn(3, 4, dtype=D)
    assert float(circle_memory_loss(x, p[:0], p)) == 0.0
    assert float(circle_memory_loss(x, p, p[:0])) == 0.0


def circle_brute_force(x, u, v, alpha, delta):
    xn = x / np.linalg.norm(x)
    un = u / np.linalg.norm(u, axis=1, keepdims=True)
    vn = v / np.linalg.norm(v, axis=1, keepdims=True)
    total = sum(math.exp(alpha * (vj @ xn - ui @ xn + delta)) for vj in vn for ui in un)
    return math.log1p(total)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 4), st.integers(1, 5), st.floats(0.5, 8), st.floats(0, 0.5))
def test_circle_matches_double_sum(seed, K, L, alpha, delta):
    rng = np.random.default_rng(seed)
    x, u, v = rng.standard_normal(3), rng.standard_normal((K, 3)), rng.standard_normal((L, 3))
    got = float(circle_memory_loss(torch.tensor(x), torch.tensor(u), torch.tensor(v), alpha, delta))
    assert got == pytest.approx(circle_brute_force(x, u, v, alpha, delta), rel=1e-9, abs=1e-12)


def test_circle_is_permutation_invariant():
    g = torch.Generator().manual_seed(5)
    x, u, v = (torch.randn(*s, generator=g, dtype=D) for s in [(4,), (3, 4), (6, 4)])
    a = circle_memory_loss(x, u, v)
    b = circle_memory_loss(x, u.flip(0), v[torch.randperm(6, generator=g)])
    assert float(a) == pytest.approx(float(b), rel=1e-12)


def test_circle_is_monotone_in_similarities():
    x = torch.tensor([1.0, 0.0], dtype=D)
    base = circle_memory_loss(x, torch.tensor([unit2(0.5)], dtype=D), torch.tensor([unit2(0.1)], dtype=D))
    closer_pos = circle_memory_loss(x, torch.tensor([unit2(0.7)], dtype=D), torch.tensor([unit2(0.1)], dtype=D))
    closer_neg = circle_memory_loss(x, torch.tensor([unit2(0.5)], dtype=D), torch.tensor([unit2(0.3)], dtype=D))
    assert closer_pos < base < closer_neg


def test_circle_gradients_against_finite_differences():
    rng = np.random.default_rng(2)
    u, v = torch.tensor(rng.standard_normal((2, 3))), torch.tensor(rng.standard_normal((3, 3)))
    check_gradient(lambda a: circle_memory_loss(a, u, v, alpha=4.0, delta=0.35), rng.standard_normal(3))


def test_circle_prototypes_get_no_gradient():
    x = torch.randn(4, dtype=D, requires_grad=True)
    u = torch.randn(2, 4, dtype=D, requires_grad=True)
    v = torch.randn(3, 4, dtype=D, requires_grad=True)
    circle_memory_loss(x, u, v).backward()
    assert u.grad is None and v.grad is None
    assert torch.count_nonzero(x.grad) > 0


def test_circle_stable_at_large_scale():
    x = torch.tensor([1.0, 0.0], requires_grad=True)
    loss = circle_memory_loss(x, torch.tensor([[0.0, 1.0]]), torch.tensor([[1.0, 0.0]]), alpha=1000.0, delta=0.35)
    loss.backward()
    assert float(loss.detach()) == pytest.approx(1350.0, rel=1e-5)
    assert torch.isfinite(x.grad).all()


def test_batched_circle_matches_per_sample_loop():
    g = torch.Generator().manual_seed(9)
    emb = torch.randn(6, 4, generator=g, dtype=D)
    labels = torch.tensor([0, 1, 2, 0, 3, 1])
    bank = torch.randn(7, 4, generator=g, dtype=D)
    bank_labels = torch.tensor([0, 0, 1, 2, 2, 1, 0])  # class 3 has no positive
    got = circle_memory_loss_batch(emb, labels, bank, bank_labels, 30.0, 0.35)
    per = [
        circle_memory_loss(emb[i], bank[bank_labels == labels[i]], bank[bank_labels != labels[i]], 30.0, 0.35)
        for i in range(6)
    ]
    assert float(got) == pytest.approx(float(sum(per) / 6), rel=1e-10)


def test_batched_circle_gradients_against_finite_differences():
    rng = np.random.default_rng(3)
    bank = torch.tensor(rng.standard_normal((5, 3)))
    bank_labels = torch.tensor([0, 1, 1, 2, 0])
    labels = torch.tensor([1, 0, 2])
    check_gradient(
        lambda e: circle_memory_loss_batch(e, labels, bank, bank_labels, alpha=5.0, delta=0.2),
        rng.standard_normal((3, 3)),
    )
