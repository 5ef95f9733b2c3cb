import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from styletune.encoders import EncoderConfig, make_state, zero_prompts
from styletune.errors import ContractError, DimensionError, NumericDomainError
from styletune.losses import (
    FrozenOutputs,
    LossWeights,
    TrainingBatch,
    ce_only_weights,
    compute_frozen_outputs,
    content_loss,
    cross_entropy_loss,
    cross_modal_loss,
    diversity_loss,
    feature_alignment_loss,
    total_loss,
)
from styletune.style import StyleBank
from styletune.tensor import Tensor

TINY = EncoderConfig(
    patch_grid=2,
    image_size=8,
    channels=3,
    token_dim=8,
    layers=2,
    heads=2,
    mlp_ratio=2.0,
    temperature=0.5,
    prompt_depth=2,
    embed_dim=8,
)


class RawBank:
    """Duck-typed bank with directly set bases, for fixed-point tests."""

    def __init__(self, mu, sigma):
        self._mu = Tensor(np.asarray(mu, dtype=float))
        self._sigma = Tensor(np.asarray(sigma, dtype=float))

    @property
    def n_bases(self):
        return self._mu.shape[0]

    def mu(self):
        return self._mu

    def sigma(self):
        return self._sigma

    def parameters(self):
        return {}


def tiny_batch(seed=0, b=2, n_classes=3):
    rng = np.random.default_rng(seed)
    images = rng.normal(size=(b, 3, TINY.image_size, TINY.image_size))
    labels = rng.integers(0, n_classes, size=b)
    return TrainingBatch(images=images, labels=labels, class_ids=np.arange(n_classes))


def tuning_state(seed=0, n_bases=3):
    st_ = make_state(TINY, seed=seed, n_style_bases=n_bases, style_layer=1)
    st_.set_backbone_trainable(False)
    return st_


# cross entropy -------------------------------------------------------------------


def test_ce_uniform_logits_is_log_c():
    embs = Tensor(np.zeros((2, 4)) + [[0.5, 0.5, 0.5, 0.5], [0.5, 0.5, 0.5, 0.5]])
    classes = Tensor(np.eye(4)[:3])
    loss = cross_entropy_loss(embs, classes, np.array([0, 2]), tau=1.0)
    assert loss.item() == pytest.approx(math.log(3), abs=1e-12)


def test_ce_limit_case_goes_to_zero():
    img = Tensor(np.array([[1.0, 0.0]]))
    classes = Tensor(np.array([[1.0, 0.0], [0.0, 1.0]]))
    loss = cross_entropy_loss(img, classes, np.array([0]), tau=0.01)
    assert loss.item() < 1e-10


def test_ce_matches_hand_log_softmax():
    rng = np.random.default_rng(0)
    img = rng.normal(size=(4, 6))
    cls = rng.normal(size=(3, 6))
    tau = 0.7
    got = cross_entropy_loss(Tensor(img), Tensor(cls), np.array([2, 0, 1, 1]), tau).item()
    logits = img @ cls.T / tau
    probs = np.exp(logits - logits.max(axis=1, keepdims=True))
    probs /= probs.sum(axis=1, keepdims=True)
    want = -np.mean(np.log(probs[np.arange(4), [2, 0, 1, 1]]))
    assert got == pytest.approx(want, abs=1e-10)


def test_ce_label_out_of_range():
    with pytest.raises(ContractError):
        cross_entropy_loss(Tensor(np.ones((1, 2))), Tensor(np.ones((2, 2))), np.array([2]), 1.0)


# diversity -----------------------------------------------------------------------


def test_diversity_zero_for_orthogonal_bases():
    bank = RawBank(mu=np.eye(3), sigma=np.eye(3))
    assert diversity_loss(bank).item() == 0.0


def test_diversity_duplicate_pair_is_four():
    bank = RawBank(mu=[[1.0, 2.0], [1.0, 2.0]], sigma=[[0.5, 0.25], [0.5, 0.25]])
    assert diversity_loss(bank).item() == pytest.approx(4.0, abs=1e-12)


def test_diversity_single_basis_is_zero():
    bank = RawBank(mu=[[1.0, 2.0]], sigma=[[1.0, 1.0]])
    assert diversity_loss(bank).item() == 0.0


def test_diversity_matches_double_loop_oracle():
    rng = np.random.default_rng(1)
    mu_raw = rng.normal(size=(5, 6))
    sig_raw = rng.normal(size=(5, 6))
    bank = StyleBank(mu_raw=Tensor(mu_raw, requires_grad=True), sigma_raw=Tensor(sig_raw, requires_grad=True))
    got = diversity_loss(bank).item()

    mu = mu_raw
    sigma = np.logaddexp(0.0, sig_raw)
    want = 0.0
    for n in range(5):
        for k in range(5):
            if k == n:
                continue
            want += abs(
                np.dot(mu[n] / np.linalg.norm(mu[n]), mu[k] / np.linalg.norm(mu[k]))
            )
            want += abs(
                np.dot(sigma[n] / np.linalg.norm(sigma[n]), sigma[k] / np.linalg.norm(sigma[k]))
            )
    assert got == pytest.approx(want, abs=1e-10)


def test_diversity_scale_invariance():
    rng = np.random.default_rng(2)
    mu = rng.normal(size=(4, 5))
    sigma = rng.uniform(0.5, 2.0, size=(4, 5))
    a = diversity_loss(RawBank(mu, sigma)).item()
    b = diversity_loss(RawBank(mu * 3.7, sigma * 0.2)).item()
    assert a == pytest.approx(b, abs=1e-12)


def test_diversity_zero_norm_basis_rejected():
    with pytest.raises(NumericDomainError):
        diversity_loss(RawBank(mu=[[0.0, 0.0], [1.0, 0.0]], sigma=[[1.0, 1.0], [1.0, 1.0]]))


# content -------------------------------------------------------------------------


def test_content_identical_maps_is_zero():
    f = np.random.default_rng(3).normal(size=(9, 5))
    assert content_loss(Tensor(f), Tensor(f)).item() <= 1e-9


def test_content_anticorrelated_maps():
    f = np.random.default_rng(4).normal(size=(9, 5))
    got = content_loss(Tensor(-f), Tensor(f)).item()
    assert got == pytest.approx(2.0 * math.sqrt(5), abs=1e-9)


def test_content_matches_pearson_oracle():
    rng = np.random.default_rng(5)
    a = rng.normal(size=(16, 6))
    b = rng.normal(size=(16, 6))
    got = content_loss(Tensor(a), Tensor(b)).item()
    corr = np.zeros(6)
    for d in range(6):
        x, y = a[:, d], b[:, d]
        corr[d] = ((x - x.mean()) * (y - y.mean())).mean() / (x.std() * y.std())
    want = float(np.linalg.norm(corr - 1.0))
    assert got == pytest.approx(want, abs=1e-10)


def test_content_affine_rescale_invariance():
    rng = np.random.default_rng(6)
    a = rng.normal(size=(12, 4))
    b = rng.normal(size=(12, 4))
    scale = rng.uniform(0.5, 3.0, size=4)
    shift = rng.normal(size=4)
    base = content_loss(Tensor(a), Tensor(b)).item()
    scaled = content_loss(Tensor(a * scale + shift), Tensor(b)).item()
    assert scaled == pytest.approx(base, abs=1e-10)


def test_content_shape_mismatch():
    with pytest.raises(DimensionError):
        content_loss(Tensor(np.ones((4, 3))), Tensor(np.ones((4, 2))))


def test_content_zero_variance_rejected():
    f = np.random.default_rng(7).normal(size=(8, 3))
    flat = f.copy()
    flat[:, 1] = 5.0
    with pytest.raises(NumericDomainError):
        content_loss(Tensor(flat), Tensor(f))


# feature alignment ---------------------------------------------------------------


def test_feat_zero_at_identity():
    v = Tensor(np.random.default_rng(8).normal(size=6))
    assert feature_alignment_loss(v, v, v, v, 15.0, 25.0).item() == 0.0


def test_feat_hand_value():
    f = Tensor([1.0, 0.0])
    fp = Tensor([0.0, 0.0])
    g = Tensor([0.3, 0.4])
    got = feature_alignment_loss(f, fp, g, g, 15.0, 25.0).item()
    assert got == pytest.approx(7.5, abs=1e-12)


def test_feat_batched_matches_elementwise_oracle():
    rng = np.random.default_rng(9)
    f, fp, g, gp = (rng.normal(size=(5, 7)) for _ in range(4))
    got = feature_alignment_loss(Tensor(f), Tensor(fp), Tensor(g), Tensor(gp), 15.0, 25.0).item()
    per = (15.0 * ((f - fp) ** 2).sum(axis=1) + 25.0 * ((g - gp) ** 2).sum(axis=1)) / 7
    assert got == pytest.approx(per.mean(), abs=1e-10)


def test_feat_gradient_only_into_prompted():
    f = Tensor(np.ones(3), requires_grad=True)
    fp = Tensor(np.zeros(3), requires_grad=True)
    g = Tensor(np.ones(3), requires_grad=True)
    gp = Tensor(np.zeros(3), requires_grad=True)
    feature_alignment_loss(f, fp, g, gp, 1.0, 1.0).backward()
    assert f.grad is None and g.grad is None
    assert np.abs(fp.grad).max() > 0 and np.abs(gp.grad).max() > 0


def test_feat_dimension_mismatch():
    with pytest.raises(DimensionError):
        feature_alignment_loss(Tensor(np.ones(3)), Tensor(np.ones(4)), Tensor(np.ones(3)), Tensor(np.ones(3)), 1, 1)


# cross modal ---------------------------------------------------------------------


def test_kl_zero_at_identity():
    p = Tensor([0.2, 0.3, 0.5])
    assert cross_modal_loss(p, p).item() == 0.0


def test_kl_hand_value():
    got = cross_modal_loss(Tensor([1.0, 0.0]), Tensor([0.5, 0.5])).item()
    assert got == pytest.approx(math.log(2), abs=1e-6)


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 8), st.integers(0, 2**31 - 1))
def test_kl_nonnegative_and_matches_summation(n, seed):
    rng = np.random.default_rng(seed)
    p = rng.dirichlet(np.ones(n))
    q = rng.dirichlet(np.ones(n))
    got = cross_modal_loss(Tensor(p), Tensor(q)).item()
    want = float(np.sum(p * np.log(np.maximum(p, 1e-12) / np.maximum(q, 1e-12))))
    assert got == pytest.approx(want, abs=1e-10)
    assert got >= -1e-12


def test_kl_gradient_only_into_prompted():
    p = Tensor([0.4, 0.6], requires_grad=True)
    q = Tensor([0.5, 0.5], requires_grad=True)
    cross_modal_loss(p, q).backward()
    assert p.grad is None
    assert np.abs(q.grad).max() > 0


# total ----------------------------------------------------------------------------


def test_total_with_only_ce_weight():
    state = tuning_state(seed=1)
    batch = tiny_batch(seed=1)
    bd = total_loss(state, batch, ce_only_weights(), style_mode="off", with_grads=False)
    assert bd.cm == 0.0 and bd.feat == 0.0
    assert bd.total == pytest.approx(bd.ce, abs=1e-15)


def test_total_alignment_fixed_point():
    state = tuning_state(seed=2)
    state.prompts = zero_prompts(TINY)
    state.style_bank = RawBank(mu=np.eye(3), sigma=np.eye(3))
    batch = tiny_batch(seed=2)
    bd = total_loss(
        state, batch, LossWeights(tau=0.5), style_mode="off", with_grads=False, mask_prompts=True
    )
    assert bd.cm == 0.0
    assert bd.feat == 0.0
    assert bd.diversity == 0.0
    assert bd.content <= 1e-9
    assert bd.total == pytest.approx(bd.ce, abs=1e-9)


def test_total_matches_term_by_term_recomputation():
    state = tuning_state(seed=3)
    batch = tiny_batch(seed=3)
    w = LossWeights(tau=0.5)
    bd = total_loss(state, batch, w, style_mode="shift", with_grads=False)
    recomputed = bd.ce + bd.cm + bd.feat + w.lambda_div * bd.diversity + w.lambda_content * bd.content
    assert bd.total == pytest.approx(recomputed, abs=1e-10)
    assert min(bd.ce, bd.cm, bd.feat, bd.diversity, bd.content) >= 0.0


def test_total_backward_populates_only_learnables():
    state = tuning_state(seed=4)
    batch = tiny_batch(seed=4)
    total_loss(state, batch, LossWeights(tau=0.5), style_mode="shift", with_grads=True)
    for name, t in state.learnable_parameters().items():
        assert t.grad is not None, name
    for name, t in state.backbone.items():
        assert t.grad is None, name
    # style bank receives gradient through the shift and the diversity term
    assert np.abs(state.style_bank.mu_raw.grad).max() > 0


def test_total_uses_frozen_cache_identically():
    state = tuning_state(seed=5)
    batch = tiny_batch(seed=5)
    frozen = compute_frozen_outputs(state, batch.images, batch.class_ids)
    w = LossWeights(tau=0.5)
    a = total_loss(state, batch, w, style_mode="shift", with_grads=False)
    b = total_loss(state, batch, w, style_mode="shift", with_grads=False, frozen=frozen)
    assert a.to_dict() == b.to_dict()
    assert isinstance(frozen, FrozenOutputs)
