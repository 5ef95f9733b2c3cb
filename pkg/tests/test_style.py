import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from styletune.errors import DimensionError
from styletune.style import (
    StyleBank,
    StyleStats,
    apply_style,
    extract_style,
    init_style_bank,
    map_style,
    similarity_weights,
    style_shift_batch,
    style_shift_layer,
    wasserstein_distance,
)
from styletune.tensor import Tensor


def random_stats(rng, dim):
    return StyleStats(
        mu=Tensor(rng.normal(size=dim)),
        sigma=Tensor(rng.uniform(0.2, 2.0, size=dim)),
    )


def random_bank(rng, n, dim):
    return StyleBank(
        mu_raw=Tensor(rng.normal(size=(n, dim)), requires_grad=True),
        sigma_raw=Tensor(rng.normal(size=(n, dim)), requires_grad=True),
    )


# extract_style -----------------------------------------------------------------


def test_extract_style_constant_map():
    f = Tensor(np.full((6, 4), 2.5))
    s = extract_style(f, epsilon=1e-5)
    np.testing.assert_allclose(s.mu.data, 2.5)
    np.testing.assert_allclose(s.sigma.data, math.sqrt(1e-5))


def test_extract_style_two_patch_hand_case():
    s = extract_style(Tensor([[0.0, 4.0], [2.0, 0.0]]), epsilon=0.0)
    np.testing.assert_allclose(s.mu.data, [1.0, 2.0])
    np.testing.assert_allclose(s.sigma.data, [1.0, 2.0])


def test_extract_style_matches_two_pass_oracle():
    rng = np.random.default_rng(0)
    f = rng.normal(size=(16, 8))
    s = extract_style(Tensor(f), epsilon=1e-5)
    mu = f.sum(axis=0) / 16
    var = ((f - mu) ** 2).sum(axis=0) / 16
    np.testing.assert_allclose(s.mu.data, mu, atol=1e-12)
    np.testing.assert_allclose(s.sigma.data, np.sqrt(var + 1e-5), atol=1e-12)


def test_extract_style_needs_two_patches():
    with pytest.raises(DimensionError):
        extract_style(Tensor(np.ones((1, 4))))


# wasserstein --------------------------------------------------------------------


def test_wasserstein_zero_on_identical():
    s = random_stats(np.random.default_rng(1), 6)
    assert wasserstein_distance(s, s).item() == 0.0


def test_wasserstein_unit_mean_offset():
    a = StyleStats(mu=Tensor([1.0, 0.0]), sigma=Tensor([1.0, 1.0]))
    b = StyleStats(mu=Tensor([0.0, 0.0]), sigma=Tensor([1.0, 1.0]))
    assert wasserstein_distance(a, b).item() == pytest.approx(1.0, abs=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 8), st.integers(0, 2**31 - 1))
def test_wasserstein_equals_squared_difference_oracle(dim, seed):
    rng = np.random.default_rng(seed)
    a, b = random_stats(rng, dim), random_stats(rng, dim)
    got = wasserstein_distance(a, b).item()
    want = float(((a.mu.data - b.mu.data) ** 2).sum() + ((a.sigma.data - b.sigma.data) ** 2).sum())
    assert got == pytest.approx(want, abs=1e-12)
    # symmetry
    assert wasserstein_distance(b, a).item() == pytest.approx(got, abs=1e-12)


def test_wasserstein_dimension_mismatch():
    rng = np.random.default_rng(2)
    with pytest.raises(DimensionError):
        wasserstein_distance(random_stats(rng, 3), random_stats(rng, 4))


# similarity weights -------------------------------------------------------------


def test_weights_uniform_when_distances_equal():
    bank = StyleBank(
        mu_raw=Tensor([[1.0, 0.0], [0.0, 1.0]], requires_grad=True),
        sigma_raw=Tensor(np.zeros((2, 2)), requires_grad=True),
    )
    # current style equidistant from both bases by symmetry
    cur = StyleStats(mu=Tensor([0.5, 0.5]), sigma=bank.basis(0).sigma)
    w = similarity_weights(cur, bank).data
    np.testing.assert_allclose(w, [0.5, 0.5], atol=1e-12)


def test_weights_hand_case_two_bases():
    # distances 0 and 1 give scores [1, 0.5] and softmax [0.6225, 0.3775]
    cur = StyleStats(mu=Tensor([0.0]), sigma=Tensor([1.0]))
    bank = StyleBank(
        mu_raw=Tensor([[0.0], [1.0]], requires_grad=True),
        sigma_raw=Tensor(np.full((2, 1), float(np.log(np.expm1(1.0)))), requires_grad=True),
    )
    w = similarity_weights(cur, bank).data
    np.testing.assert_allclose(w, [0.6225, 0.3775], atol=1e-4)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 6), st.integers(2, 8), st.integers(0, 2**31 - 1))
def test_weights_sum_to_one_and_favor_nearest(dim, n, seed):
    rng = np.random.default_rng(seed)
    cur = random_stats(rng, dim)
    bank = random_bank(rng, n, dim)
    w = similarity_weights(cur, bank).data
    assert abs(w.sum() - 1.0) <= 1e-12
    assert (w > 0).all()
    dists = [wasserstein_distance(cur, bank.basis(i)).item() for i in range(n)]
    assert np.argmax(w) == np.argmin(dists)


def test_weights_permutation_equivariant():
    rng = np.random.default_rng(3)
    cur = random_stats(rng, 5)
    bank = random_bank(rng, 4, 5)
    w = similarity_weights(cur, bank).data
    perm = np.array([2, 0, 3, 1])
    permuted = StyleBank(
        mu_raw=Tensor(bank.mu_raw.data[perm]), sigma_raw=Tensor(bank.sigma_raw.data[perm])
    )
    w2 = similarity_weights(cur, permuted).data
    np.testing.assert_allclose(w2, w[perm], atol=1e-14)


# map_style ----------------------------------------------------------------------


def test_map_style_single_basis_degenerate():
    bank = random_bank(np.random.default_rng(4), 1, 3)
    mapped = map_style(Tensor([1.0]), bank)
    np.testing.assert_allclose(mapped.mu.data, bank.mu().data[0], atol=1e-15)
    np.testing.assert_allclose(mapped.sigma.data, bank.sigma().data[0], atol=1e-15)


def test_map_style_uniform_weights_arithmetic_mean():
    bank = random_bank(np.random.default_rng(5), 4, 3)
    mapped = map_style(Tensor(np.full(4, 0.25)), bank)
    np.testing.assert_allclose(mapped.mu.data, bank.mu().data.mean(axis=0), atol=1e-14)


def test_map_style_matches_accumulation_oracle():
    rng = np.random.default_rng(6)
    bank = random_bank(rng, 5, 4)
    w = rng.dirichlet(np.ones(5))
    mapped = map_style(Tensor(w), bank)
    mu = np.zeros(4)
    sig = np.zeros(4)
    for n in range(5):
        mu += w[n] * bank.mu().data[n]
        sig += w[n] * bank.sigma().data[n]
    np.testing.assert_allclose(mapped.mu.data, mu, atol=1e-12)
    np.testing.assert_allclose(mapped.sigma.data, sig, atol=1e-12)
    assert (mapped.sigma.data > 0).all()


def test_map_style_length_mismatch():
    bank = random_bank(np.random.default_rng(7), 3, 2)
    with pytest.raises(DimensionError):
        map_style(Tensor([0.5, 0.5]), bank)


# apply_style --------------------------------------------------------------------


def test_apply_style_identity_target_standardizes():
    rng = np.random.default_rng(8)
    f = Tensor(rng.normal(2.0, 3.0, size=(16, 4)))
    out = apply_style(f, StyleStats(mu=Tensor(np.zeros(4)), sigma=Tensor(np.ones(4))), 0.0)
    np.testing.assert_allclose(out.data.mean(axis=0), 0.0, atol=1e-12)
    np.testing.assert_allclose(out.data.std(axis=0), 1.0, atol=1e-12)


def test_apply_own_style_recovers_input():
    rng = np.random.default_rng(9)
    f = Tensor(rng.normal(size=(16, 6)))
    eps = 1e-5
    out = apply_style(f, extract_style(f, eps), eps)
    bound = 10 * math.sqrt(eps) * np.abs(f.data).max()
    assert np.abs(out.data - f.data).max() <= bound


def test_round_trip_recovers_target_style():
    rng = np.random.default_rng(10)
    f = Tensor(rng.normal(size=(16, 5)))
    target = random_stats(rng, 5)
    # analytic with epsilon = 0
    out = apply_style(f, target, epsilon=0.0)
    s = extract_style(out, epsilon=0.0)
    np.testing.assert_allclose(s.mu.data, target.mu.data, atol=1e-10)
    np.testing.assert_allclose(s.sigma.data, target.sigma.data, atol=1e-10)
    # epsilon = 1e-5 keeps the error under 1e-3
    out = apply_style(f, target, epsilon=1e-5)
    s = extract_style(out, epsilon=1e-5)
    assert np.abs(s.mu.data - target.mu.data).max() <= 1e-3
    assert np.abs(s.sigma.data - target.sigma.data).max() <= 1e-3


def test_apply_style_preserves_standardized_content():
    rng = np.random.default_rng(11)
    f = Tensor(rng.normal(size=(16, 4)))
    target = random_stats(rng, 4)
    out = apply_style(f, target, epsilon=1e-5)

    def standardize(a):
        return (a - a.mean(axis=0)) / a.std(axis=0)

    np.testing.assert_allclose(standardize(out.data), standardize(f.data), atol=1e-3)


# full shift ---------------------------------------------------------------------


def test_shift_with_own_style_bank_is_identity():
    rng = np.random.default_rng(12)
    f = Tensor(rng.normal(size=(16, 4)))
    s = extract_style(f, epsilon=1e-5)
    sigma_raw = np.log(np.expm1(s.sigma.data))
    bank = StyleBank(
        mu_raw=Tensor(s.mu.data.reshape(1, -1), requires_grad=True),
        sigma_raw=Tensor(sigma_raw.reshape(1, -1), requires_grad=True),
    )
    out = style_shift_layer(f, bank, epsilon=1e-5)
    assert np.abs(out.data - f.data).max() <= 1e-6


def test_shift_output_style_matches_mapped_style():
    rng = np.random.default_rng(13)
    f = Tensor(rng.normal(size=(16, 4)))
    bank = random_bank(rng, 3, 4)
    cur = extract_style(f, epsilon=1e-5)
    mapped = map_style(similarity_weights(cur, bank), bank)
    out_style = extract_style(style_shift_layer(f, bank, epsilon=1e-5), epsilon=1e-5)
    np.testing.assert_allclose(out_style.mu.data, mapped.mu.data, atol=1e-3)
    np.testing.assert_allclose(out_style.sigma.data, mapped.sigma.data, atol=1e-3)


def test_shift_gradients_reach_bank():
    rng = np.random.default_rng(14)
    f = Tensor(rng.normal(size=(8, 4)))
    bank = random_bank(rng, 3, 4)
    style_shift_layer(f, bank).sum().backward()
    assert bank.mu_raw.grad is not None and np.abs(bank.mu_raw.grad).max() > 0
    assert bank.sigma_raw.grad is not None and np.abs(bank.sigma_raw.grad).max() > 0


def test_batched_shift_matches_per_sample():
    rng = np.random.default_rng(15)
    f = rng.normal(size=(3, 9, 4))
    bank = random_bank(rng, 4, 4)
    batched = style_shift_batch(Tensor(f), bank).data
    for i in range(3):
        single = style_shift_layer(Tensor(f[i]), bank).data
        np.testing.assert_allclose(batched[i], single, atol=1e-12)


def test_bank_init_properties():
    bank = init_style_bank(12, 32, seed=7)
    assert bank.n_bases == 12 and bank.dim == 32
    np.testing.assert_allclose(bank.sigma().data, 1.0, atol=1e-12)
    bank2 = init_style_bank(12, 32, seed=7)
    np.testing.assert_array_equal(bank.mu_raw.data, bank2.mu_raw.data)
    # sigma stays positive even after large raw excursions
    bank.sigma_raw.data[:] = -40.0
    assert (bank.sigma().data > 0).all()
