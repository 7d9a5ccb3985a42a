import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

import oracles
from fewshot_adapt.latent import AnchorSet, create_anchor_set
from fewshot_adapt.losses import (NumericDegenerateError, adversarial_d_loss, adversarial_g_loss,
                                  distance_consistency_loss, reduce_patch_logits, relaxed_adversarial_losses,
                                  similarity_distribution, total_generator_loss)


def _stack(rng, layers=("a", "b"), n=4, dim=8):
    return {l: torch.from_numpy(rng.standard_normal((n, dim))) for l in layers}


# --- similarity distribution ------------------------------------------------

def test_similarity_identical_activations_uniform():
    acts = {"l": torch.ones(5, 3, dtype=torch.float64)}
    probs = similarity_distribution(acts, "l", 2).probs
    assert probs.shape == (4,)
    assert torch.allclose(probs, torch.full((4,), 0.25, dtype=torch.float64), atol=1e-12)


def test_similarity_two_samples_single_entry():
    acts = {"l": torch.tensor([[1.0, 2.0], [3.0, -1.0]], dtype=torch.float64)}
    assert similarity_distribution(acts, "l", 0).probs.tolist() == [1.0]


def test_similarity_hand_example():
    acts = {"l": torch.tensor([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]], dtype=torch.float64)}
    p = similarity_distribution(acts, "l", 0).probs.numpy()
    e = math.e
    assert p == pytest.approx([e / (e + 1), 1 / (e + 1)], abs=1e-12)
    assert p == pytest.approx([0.7311, 0.2689], abs=1e-4)


@pytest.mark.parametrize("n", [2, 3, 4, 5, 6])
def test_similarity_matches_bruteforce(n, rng):
    a = rng.standard_normal((n, 7))
    acts = {"l": torch.from_numpy(a)}
    for i in range(n):
        got = similarity_distribution(acts, "l", i).probs.numpy()
        assert np.max(np.abs(got - oracles.similarity_probs(a, i))) < 1e-9
        assert abs(got.sum() - 1) < 1e-6


def test_similarity_zero_norm_raises():
    acts = {"l": torch.tensor([[0.0, 0.0], [1.0, 1.0], [2.0, 0.0]])}
    with pytest.raises(NumericDegenerateError):
        similarity_distribution(acts, "l", 1)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), scale=st.floats(1e-3, 1e3), idx=st.integers(0, 4))
def test_similarity_scale_invariant(seed, scale, idx):
    a = np.random.default_rng(seed).standard_normal((5, 6))
    b = a.copy()
    b[idx] *= scale
    for i in range(5):
        p = similarity_distribution({"l": torch.from_numpy(a)}, "l", i).probs
        q = similarity_distribution({"l": torch.from_numpy(b)}, "l", i).probs
        assert torch.allclose(p, q, atol=1e-12)


# --- distance consistency -----------------------------------------------------

def test_dist_loss_zero_for_identical_stacks(rng):
    s = _stack(rng)
    assert float(distance_consistency_loss(s, {k: v.clone() for k, v in s.items()})) == 0.0


def test_dist_loss_matches_bruteforce(rng):
    for _ in range(5):
        src, ada = _stack(rng, n=3), _stack(rng, n=3)
        got = float(distance_consistency_loss(src, ada))
        want = oracles.distance_consistency({k: v.numpy() for k, v in src.items()},
                                            {k: v.numpy() for k, v in ada.items()})
        assert abs(got - want) < 1e-6


def test_dist_loss_gradient_finite_differences(rng):
    src, ada = _stack(rng), _stack(rng)
    ada = {k: v.clone().requires_grad_(True) for k, v in ada.items()}
    distance_consistency_loss(src, ada).backward()
    h = 1e-4
    for layer, t in ada.items():
        base = t.detach().numpy()
        fd = np.zeros_like(base)
        for idx in np.ndindex(base.shape):
            vals = []
            for sign in (1, -1):
                pert = base.copy()
                pert[idx] += sign * h
                stack = {k: (torch.from_numpy(pert) if k == layer else v.detach()) for k, v in ada.items()}
                vals.append(oracles.distance_consistency({k: v.numpy() for k, v in src.items()},
                                                         {k: v.numpy() for k, v in stack.items()}))
            fd[idx] = (vals[0] - vals[1]) / (2 * h)
        an = t.grad.numpy()
        rel = np.linalg.norm(an - fd) / max(np.linalg.norm(fd), 1e-12)
        assert rel < 1e-3


def test_dist_loss_source_side_is_constant(rng):
    src = {k: v.clone().requires_grad_(True) for k, v in _stack(rng).items()}
    ada = {k: v.clone().requires_grad_(True) for k, v in _stack(rng).items()}
    distance_consistency_loss(src, ada).backward()
    assert all(v.grad is None for v in src.values())
    assert all(v.grad is not None for v in ada.values())


def test_dist_loss_mismatch_errors(rng):
    with pytest.raises(ValueError):
        distance_consistency_loss(_stack(rng, layers=("a",)), _stack(rng, layers=("b",)))
    with pytest.raises(ValueError):
        distance_consistency_loss(_stack(rng, n=3), _stack(rng, n=4))


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_dist_loss_nonnegative_and_permutation_invariant(seed):
    r = np.random.default_rng(seed)
    src, ada = _stack(r, n=5), _stack(r, n=5)
    val = float(distance_consistency_loss(src, ada))
    assert val >= 0
    perm = torch.from_numpy(r.permutation(5))
    pval = float(distance_consistency_loss({k: v[perm] for k, v in src.items()},
                                           {k: v[perm] for k, v in ada.items()}))
    assert abs(val - pval) < 1e-10


# --- adversarial terms --------------------------------------------------------

def test_d_loss_values():
    assert float(adversarial_d_loss([0.0], [0.0])) == pytest.approx(2 * math.log(2), abs=1e-12)
    assert float(adversarial_d_loss([math.inf], [-math.inf])) == 0.0
    assert float(adversarial_d_loss([1e4], [-1e4])) == pytest.approx(0.0, abs=1e-12)
    want = oracles.softplus(-1) + oracles.softplus(-1)
    assert float(adversarial_d_loss([1.0], [-1.0])) == pytest.approx(want, abs=1e-12)
    assert want == pytest.approx(0.6265, abs=1e-4)


def test_g_loss_values():
    assert float(adversarial_g_loss([0.0])) == pytest.approx(math.log(2), abs=1e-12)
    assert float(adversarial_g_loss([1e4])) == pytest.approx(0.0, abs=1e-12)
    want = (oracles.softplus(-2) + oracles.softplus(2)) / 2
    assert float(adversarial_g_loss([2.0, -2.0])) == pytest.approx(want, abs=1e-12)
    assert want == pytest.approx(1.1269, abs=1e-4)


def test_adversarial_empty_inputs():
    with pytest.raises(ValueError):
        adversarial_d_loss([], [0.0])
    with pytest.raises(ValueError):
        adversarial_g_loss([])


def test_literal_linear_form():
    assert float(adversarial_d_loss([2.0, 4.0], [1.0], literal=True)) == pytest.approx(1.0 - 3.0)
    assert float(adversarial_g_loss([1.0, 3.0], literal=True)) == pytest.approx(-2.0)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-30, 30), min_size=1, max_size=6), st.lists(st.floats(-30, 30), min_size=1, max_size=6))
def test_d_loss_matches_closed_form(real, fake):
    want = sum(oracles.softplus(-r) for r in real) / len(real) + sum(oracles.softplus(f) for f in fake) / len(fake)
    assert float(adversarial_d_loss(real, fake)) == pytest.approx(want, rel=1e-9, abs=1e-12)


def test_adversarial_gradients_finite_differences():
    x = torch.tensor([0.3, -1.2, 2.0], dtype=torch.float64, requires_grad=True)
    adversarial_g_loss(x).backward()
    h = 1e-6
    for i in range(3):
        xp = x.detach().clone(); xp[i] += h
        xm = x.detach().clone(); xm[i] -= h
        fd = (float(adversarial_g_loss(xp)) - float(adversarial_g_loss(xm))) / (2 * h)
        assert abs(fd - float(x.grad[i])) <= 1e-3 * abs(fd) + 1e-9


def test_patch_reduction_means_cells_then_layers():
    maps = [torch.tensor([[[1.0, 3.0], [5.0, 7.0]]]), torch.tensor([[[2.0]]])]
    assert reduce_patch_logits(maps).tolist() == [(4.0 + 2.0) / 2]


# --- total objective -----------------------------------------------------------

def test_total_generator_loss():
    r = total_generator_loss((1.0, 0.2), 0.5, 1e3)
    assert r.total == pytest.approx(501.2, abs=1e-9)
    assert abs(r.total - (r.adv_image + r.adv_patch + r.lam * r.dist)) < 1e-6
    assert total_generator_loss((1.0, 0.2), 0.5, 0.0).total == pytest.approx(1.2)
    with pytest.raises(ValueError):
        total_generator_loss((1.0, 0.2), 0.5, -1.0)


# --- relaxed adversarial objective -------------------------------------------

def test_relaxed_losses_degenerate_anchor(tiny_models, tiny_target, monkeypatch):
    gen, disc = tiny_models
    anchors = AnchorSet(np.ones((1, gen.latent_spec.dim)), sigma=0.0)
    seen = []
    import fewshot_adapt.losses as L
    orig = L.generate

    def spy(g, noise, with_taps=False):
        seen.append(noise)
        return orig(g, noise, with_taps)

    monkeypatch.setattr(L, "generate", spy)
    for seed in range(3):
        relaxed_adversarial_losses(gen, disc, anchors, tiny_target.images[:4], np.random.default_rng(seed))
    anchor_batches = [z for z in seen if getattr(z, "origin", None) == "anchor"]
    assert anchor_batches and all(np.array_equal(z.vectors, np.ones_like(z.vectors)) for z in anchor_batches)
    assert any(getattr(z, "origin", None) == "prior" for z in seen)


def test_relaxed_losses_share_one_trunk_pass_on_real(tiny_models, tiny_target, monkeypatch):
    gen, disc = tiny_models
    anchors = create_anchor_set(gen.latent_spec, 5, seed=0)
    inputs = []
    orig = type(disc).forward

    def counting(self, x, image=True, patch=True):
        inputs.append((x, image, patch))
        return orig(self, x, image, patch)

    monkeypatch.setattr(type(disc), "forward", counting)
    real = torch.from_numpy(tiny_target.images[:4])
    relaxed_adversarial_losses(gen, disc, anchors, real, np.random.default_rng(0))
    real_calls = [(img, pat) for x, img, pat in inputs if torch.equal(x, real)]
    assert real_calls == [(True, True)]


def test_relaxed_losses_finite(tiny_models, tiny_target):
    gen, disc = tiny_models
    anchors = create_anchor_set(gen.latent_spec, 5, seed=0)
    g_parts, d_parts = relaxed_adversarial_losses(gen, disc, anchors, tiny_target.images[:4], np.random.default_rng(0))
    assert all(math.isfinite(float(x.detach())) for x in (*g_parts, *d_parts))
