"""Learnable style bases and the map-then-apply style transformation.

The style of a patch-token feature map is its per-dimension mean and
standard deviation. A bank of learnable (mu, sigma) bases spans a style
space; an input's style is measured against every basis with a
diagonal-Gaussian Wasserstein distance, softmax-weighted into a mapped
style, and re-imposed on the standardized features (adaptive instance
normalization). All steps are differentiable into the bank parameters.

sigma bases are realized through softplus of raw parameters, so they
stay strictly positive no matter how far gradient descent pushes the
raw values.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, NumericDomainError
from .seeding import rng_for
from .tensor import Tensor, concat, moments, softmax

DEFAULT_EPSILON = 1e-5

# raw value whose softplus is 1, used to start sigma bases near the
# standardized-feature regime
_SIGMA_RAW_FOR_UNIT = float(np.log(np.expm1(1.0)))


@dataclass
class StyleStats:
    """Per-dimension style summary of a feature map: mu, sigma in R^D."""

    mu: Tensor
    sigma: Tensor

    @property
    def dim(self) -> int:
        return self.mu.shape[-1]


@dataclass
class StyleBank:
    """N learnable style bases, sigma kept positive by parameterization."""

    mu_raw: Tensor
    sigma_raw: Tensor

    def __post_init__(self):
        if self.mu_raw.shape != self.sigma_raw.shape or self.mu_raw.ndim != 2:
            raise DimensionError(
                f"bank parameter shapes disagree: {self.mu_raw.shape} vs {self.sigma_raw.shape}"
            )

    @property
    def n_bases(self) -> int:
        return self.mu_raw.shape[0]

    @property
    def dim(self) -> int:
        return self.mu_raw.shape[1]

    def mu(self) -> Tensor:
        return self.mu_raw

    def sigma(self) -> Tensor:
        return self.sigma_raw.softplus()

    def basis(self, n: int) -> StyleStats:
        return StyleStats(mu=self.mu()[n, :], sigma=self.sigma()[n, :])

    def parameters(self) -> dict[str, Tensor]:
        return {"bank.mu_raw": self.mu_raw, "bank.sigma_raw": self.sigma_raw}


def init_style_bank(n_bases: int, dim: int, seed: int = 0) -> StyleBank:
    """Fresh bank: mu ~ N(0, 0.5^2), sigma starting at 1."""
    if n_bases < 1:
        raise DimensionError("a style bank needs at least one basis")
    rng = rng_for(seed, "style-bank")
    mu_raw = Tensor(rng.normal(0.0, 0.5, size=(n_bases, dim)), requires_grad=True)
    sigma_raw = Tensor(np.full((n_bases, dim), _SIGMA_RAW_FOR_UNIT), requires_grad=True)
    return StyleBank(mu_raw=mu_raw, sigma_raw=sigma_raw)


def extract_style(patch_features: Tensor, epsilon: float = DEFAULT_EPSILON) -> StyleStats:
    """Style of a P^2 x D feature map (CLS/prompt rows already excluded)."""
    if patch_features.ndim != 2:
        raise DimensionError(f"expected a 2-d patch map, got shape {patch_features.shape}")
    if patch_features.shape[0] < 2:
        raise DimensionError(
            f"style extraction needs >= 2 patch rows, got {patch_features.shape[0]}"
        )
    mu, sigma = moments(patch_features, axis=0, epsilon=epsilon)
    return StyleStats(mu=mu, sigma=sigma)


def wasserstein_distance(a: StyleStats, b: StyleStats) -> Tensor:
    """Diagonal-Gaussian 2-Wasserstein style discrepancy, summed over dimensions."""
    if a.mu.shape != b.mu.shape:
        raise DimensionError(f"style dimensions disagree: {a.mu.shape} vs {b.mu.shape}")
    dmu = a.mu - b.mu
    mean_term = (dmu * dmu).sum()
    var_term = (a.sigma * a.sigma + b.sigma * b.sigma - a.sigma * b.sigma * 2.0).sum()
    return mean_term + var_term


def similarity_weights(cur: StyleStats, bank: StyleBank) -> Tensor:
    """Softmax over per-basis scores 1/(1 + distance); sums to one.

    The nearest basis always receives the largest weight.
    """
    if cur.dim != bank.dim:
        raise DimensionError(f"style dim {cur.dim} does not match bank dim {bank.dim}")
    scores = []
    for n in range(bank.n_bases):
        d = wasserstein_distance(cur, bank.basis(n))
        if not np.isfinite(d.data).all():
            raise NumericDomainError(f"non-finite style distance for basis {n}")
        scores.append((1.0 / (d + 1.0)).reshape(1))
    return softmax(concat(scores, axis=0), axis=0)


def map_style(weights: Tensor, bank: StyleBank) -> StyleStats:
    """Convex combination of the bank under ``weights``; sigma stays positive."""
    if weights.shape != (bank.n_bases,):
        raise DimensionError(
            f"weight vector shape {weights.shape} does not match bank size {bank.n_bases}"
        )
    w = weights.reshape(1, bank.n_bases)
    mu = (w @ bank.mu()).reshape(bank.dim)
    sigma = (w @ bank.sigma()).reshape(bank.dim)
    return StyleStats(mu=mu, sigma=sigma)


def apply_style(
    patch_features: Tensor, target: StyleStats, epsilon: float = DEFAULT_EPSILON
) -> Tensor:
    """Re-stylize: standardize per dimension, then scale/shift to the target."""
    if patch_features.ndim != 2 or patch_features.shape[1] != target.dim:
        raise DimensionError(
            f"feature map {patch_features.shape} does not match style dim {target.dim}"
        )
    mu, sigma = moments(patch_features, axis=0, epsilon=epsilon)
    standardized = (patch_features - mu.reshape(1, -1)) / sigma.reshape(1, -1)
    return standardized * target.sigma.reshape(1, -1) + target.mu.reshape(1, -1)


def style_shift_layer(
    patch_features: Tensor, bank: StyleBank, epsilon: float = DEFAULT_EPSILON
) -> Tensor:
    """extract -> weights -> map -> apply, end to end differentiable."""
    cur = extract_style(patch_features, epsilon)
    weights = similarity_weights(cur, bank)
    mapped = map_style(weights, bank)
    return apply_style(patch_features, mapped, epsilon)


def style_shift_batch(
    patch_features: Tensor, bank: StyleBank, epsilon: float = DEFAULT_EPSILON
) -> Tensor:
    """Vectorized style shift over a (B, P^2, D) batch.

    Numerically identical to mapping each sample through
    ``style_shift_layer``; kept separate so the per-map public ops stay
    exactly the shapes their contracts describe.
    """
    if patch_features.ndim != 3:
        raise DimensionError(f"expected (B, P^2, D), got shape {patch_features.shape}")
    b, p2, d = patch_features.shape
    if p2 < 2:
        raise DimensionError(f"style extraction needs >= 2 patch rows, got {p2}")
    if d != bank.dim:
        raise DimensionError(f"feature dim {d} does not match bank dim {bank.dim}")

    mu = patch_features.mean(axis=1, keepdims=True)  # (B, 1, D)
    var = ((patch_features - mu) * (patch_features - mu)).mean(axis=1, keepdims=True)
    sigma = (var + epsilon).sqrt()

    bank_mu = bank.mu().reshape(1, bank.n_bases, d)  # (1, N, D)
    bank_sigma = bank.sigma().reshape(1, bank.n_bases, d)
    dmu = mu.reshape(b, 1, d) - bank_mu
    dsig = sigma.reshape(b, 1, d) - bank_sigma
    dist = (dmu * dmu).sum(axis=2) + (dsig * dsig).sum(axis=2)  # (B, N)
    if not np.isfinite(dist.data).all():
        raise NumericDomainError("non-finite style distance in batched shift")
    weights = softmax(1.0 / (dist + 1.0), axis=1)  # (B, N)

    mapped_mu = weights @ bank.mu()  # (B, D)
    mapped_sigma = weights @ bank.sigma()
    standardized = (patch_features - mu) / sigma
    return standardized * mapped_sigma.reshape(b, 1, d) + mapped_mu.reshape(b, 1, d)
