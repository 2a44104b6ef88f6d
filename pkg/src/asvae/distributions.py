"""Differentiable densities used by the encoder, decoder, and prior.

Everything here operates on [batch, dim] tensors and reduces over the
trailing axis, returning one value per batch row. Log-variances are
clamped to [-10, 10] at construction so that downstream ``exp`` calls
can neither overflow nor underflow to zero; the clamp is part of the
model, not a silent fixup, and its zero-gradient behavior outside the
window is intentional.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DomainError, ShapeError

LOG_VAR_MIN = -10.0
LOG_VAR_MAX = 10.0
LOG_TWO_PI = float(np.log(2.0 * np.pi))


def _require_batch_matrix(name: str, t: Tensor) -> None:
    if t.ndim != 2:
        raise ShapeError(f"{name} must be [batch, dim], got shape {t.shape}")


@dataclass
class DiagonalGaussian:
    """Factorized Gaussian with per-dimension mean and log-variance."""

    mean: Tensor
    log_var: Tensor

    def __post_init__(self) -> None:
        _require_batch_matrix("mean", self.mean)
        _require_batch_matrix("log_var", self.log_var)
        if self.mean.shape != self.log_var.shape:
            raise ShapeError(
                f"mean shape {self.mean.shape} != log_var shape {self.log_var.shape}"
            )
        self.log_var = ad.clamp(self.log_var, LOG_VAR_MIN, LOG_VAR_MAX)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.mean.shape

    def std(self) -> Tensor:
        return ad.exp(self.log_var * 0.5)


@dataclass
class BernoulliVec:
    """Factorized Bernoulli over [batch, dim] parameterized by logits."""

    logits: Tensor

    def __post_init__(self) -> None:
        _require_batch_matrix("logits", self.logits)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.logits.shape

    def mean(self) -> Tensor:
        return ad.sigmoid(self.logits)


def gaussian_log_prob(g: DiagonalGaussian, x: Tensor) -> Tensor:
    """log N(x; mean, diag(exp(log_var))) summed over dims, one per row.

    Per element: -0.5 * (log 2pi + log_var + (x - mean)^2 * exp(-log_var)).
    """
    if x.shape != g.shape:
        raise ShapeError(f"x shape {x.shape} != distribution shape {g.shape}")
    quad = ad.square(x - g.mean) * ad.exp(-g.log_var)
    per_elem = (g.log_var + LOG_TWO_PI + quad) * -0.5
    return per_elem.sum(axis=-1)


def reparam_sample(g: DiagonalGaussian, noise: Tensor) -> Tensor:
    """mean + std * noise; gradients flow to the parameters, not the noise."""
    if noise.shape != g.shape:
        raise ShapeError(f"noise shape {noise.shape} != distribution shape {g.shape}")
    return g.mean + g.std() * noise.detach()


def kl_to_standard_normal(g: DiagonalGaussian) -> Tensor:
    """KL(g || N(0, I)) per row: 0.5 * sum(mean^2 + var - 1 - log_var)."""
    per_elem = (ad.square(g.mean) + ad.exp(g.log_var) - g.log_var - 1.0) * 0.5
    return per_elem.sum(axis=-1)


def bernoulli_log_prob(b: BernoulliVec, x: Tensor) -> Tensor:
    """log Bernoulli(x; sigmoid(logits)) summed over dims, one per row.

    Uses the softplus form -[x * softplus(-L) + (1 - x) * softplus(L)],
    which is exact for x in [0, 1] and never evaluates log(0).
    """
    if x.shape != b.shape:
        raise ShapeError(f"x shape {x.shape} != distribution shape {b.shape}")
    if np.any(x.data < 0.0) or np.any(x.data > 1.0):
        raise DomainError("bernoulli_log_prob requires x entries in [0, 1]")
    nll = x * ad.softplus(-b.logits) + (1.0 - x) * ad.softplus(b.logits)
    return -nll.sum(axis=-1)


def gaussian_bin_prob(g: DiagonalGaussian, i) -> np.ndarray:
    """Probability mass the Gaussian puts on pixel bin i of 256.

    Bin i covers [i/256, (i+1)/256) on the unit scale, except that the
    first bin extends to -inf and the last to +inf so the 256 bins
    partition the real line. ``i`` is an int or an int array matching
    the distribution shape. Evaluation-path only: returns plain numpy
    probabilities, no gradients.
    """
    mean = g.mean.data
    std = np.exp(0.5 * g.log_var.data)
    idx = np.asarray(i)
    if not np.issubdtype(idx.dtype, np.integer):
        raise DomainError("bin index must be an integer or integer array")
    if np.any(idx < 0) or np.any(idx > 255):
        raise DomainError("bin index out of range [0, 255]")
    idx = np.broadcast_to(idx, mean.shape)
    lo = idx / 256.0
    hi = (idx + 1) / 256.0
    cdf_lo = np.where(idx == 0, 0.0, ndtr((lo - mean) / std))
    cdf_hi = np.where(idx == 255, 1.0, ndtr((hi - mean) / std))
    return cdf_hi - cdf_lo
