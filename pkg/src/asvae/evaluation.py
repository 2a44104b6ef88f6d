"""Model quality metrics: likelihood bounds, reconstructions, sample scores.

Everything here runs on detached parameters (pure forward passes); no
gradients are recorded. Randomness comes in through explicit streams so
every reported number is replayable.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import distributions as dist
from . import networks as net
from . import objectives as obj
from .autodiff import Tensor
from .errors import ContractError, DomainError, ShapeError
from .networks import ModelBundle
from .rng import RngStream

_LOG_TWO_PI = float(np.log(2.0 * np.pi))


def _prior_log_prob(z: np.ndarray) -> np.ndarray:
    return -0.5 * (z.shape[1] * _LOG_TWO_PI + np.sum(z * z, axis=1))


@dataclass(frozen=True)
class NllBoundReport:
    """Variational NLL bound: mean, its standard error, per-row values."""

    nll: float
    stderr: float
    per_example: np.ndarray

    @property
    def elbo(self) -> float:
        return -self.nll


def nll_bound(bundle: ModelBundle, x: np.ndarray, k_samples: int, stream: RngStream) -> NllBoundReport:
    """Monte Carlo bound on -E[log p(x)]: K posterior draws per row.

    Per row, -1/K sum_j [log p(x|z_j) + log p(z_j) - log q(z_j|x)] with
    z_j ~ q(z|x). Its expectation is at least the true NLL for any K
    (equality when the encoder is the exact posterior); the standard
    error is across rows.
    """
    if k_samples < 1:
        raise ContractError(f"k_samples must be positive, got {k_samples}")
    if x.ndim != 2 or x.shape[0] < 2:
        raise ShapeError(f"need at least two [n, d] rows, got {x.shape}")
    sampler = net.detach_bundle(bundle)
    xt = Tensor(x)
    with ad.unchecked():
        q = net.encoder_forward(sampler, xt)
        total = np.zeros(x.shape[0])
        for _ in range(k_samples):
            eps = ad.sample_standard_normal(stream, q.shape)
            z = dist.reparam_sample(q, eps)
            d = net.decoder_forward(sampler, z)
            log_lik = obj.decoder_log_prob(d, xt).data
            log_q = dist.gaussian_log_prob(q, z).data
            total += log_lik + _prior_log_prob(z.data) - log_q
    elbo_rows = total / k_samples
    nll_rows = -elbo_rows
    return NllBoundReport(
        nll=float(nll_rows.mean()),
        stderr=float(nll_rows.std(ddof=1) / np.sqrt(len(nll_rows))),
        per_example=nll_rows,
    )


def dequantize(pixels: np.ndarray, stream: RngStream) -> np.ndarray:
    """(pixel + u) / 256 with u ~ U[0, 1): ints to the unit interval."""
    p = np.asarray(pixels)
    if not np.issubdtype(p.dtype, np.integer):
        raise DomainError("dequantize expects integer pixel values")
    if np.any(p < 0) or np.any(p > 255):
        raise DomainError("pixel values must lie in [0, 255]")
    return (p.astype(np.float64) + stream.uniform(p.shape)) / 256.0


def bits_per_dim(elbo_nats: float, data_dim: int) -> float:
    """Continuous ELBO on unit-scaled pixels, as bits per dimension.

    Undoing the 1/256 scaling costs log 256 nats per dimension, so the
    conversion is (-elbo/dim)/ln 2 + 8; the uniform model (elbo 0)
    scores exactly 8 bits.
    """
    if data_dim < 1:
        raise ContractError(f"data_dim must be positive, got {data_dim}")
    return (-elbo_nats / data_dim) / float(np.log(2.0)) + 8.0


def discretized_loglik(bundle: ModelBundle, pixels: np.ndarray, z: np.ndarray) -> np.ndarray:
    """Exact log-mass of the pixel rows under the gaussian head at z.

    Sums log of the per-pixel bin probabilities; a pixel far outside
    the head's reach can yield -inf, which is the true value.
    """
    if bundle.likelihood != "gaussian":
        raise ContractError("discretized likelihoods need the gaussian head")
    with ad.unchecked():
        d = net.decoder_forward(net.detach_bundle(bundle), Tensor(z))
    probs = dist.gaussian_bin_prob(d, np.asarray(pixels))
    with np.errstate(divide="ignore"):
        return np.log(probs).sum(axis=1)


def rmse_reconstruction(bundle: ModelBundle, x: np.ndarray, pixel_scale: bool = False) -> float:
    """Deterministic round trip: decoder mean of the encoder mean.

    No noise on either side. pixel_scale reports the error on the 0-255
    range for image data; otherwise it is in raw feature units.
    """
    sampler = net.detach_bundle(bundle)
    with ad.unchecked():
        q = net.encoder_forward(sampler, Tensor(x))
        d = net.decoder_forward(sampler, q.mean)
        recon = d.mean().data if isinstance(d, dist.BernoulliVec) else d.mean.data
    rmse = float(np.sqrt(np.mean((recon - x) ** 2)))
    return rmse * 255.0 if pixel_scale else rmse


def sample_generated(bundle: ModelBundle, n: int, stream: RngStream) -> np.ndarray:
    """n draws x ~ p(x|z), z ~ p(z): gaussian noise or bernoulli flips included."""
    if n < 1:
        raise ContractError(f"n must be positive, got {n}")
    sampler = net.detach_bundle(bundle)
    with ad.unchecked():
        z = ad.sample_standard_normal(stream, (n, bundle.latent_dim))
        d = net.decoder_forward(sampler, z)
        if isinstance(d, dist.BernoulliVec):
            return (stream.uniform(d.shape) < d.mean().data).astype(np.float64)
        xi = ad.sample_standard_normal(stream, d.shape)
        return dist.reparam_sample(d, xi).data.copy()


def label_entropy_score(probs: np.ndarray) -> float:
    """exp(mean KL(row || mean row)) for class probability rows.

    1.0 when every row equals the marginal (no label information), K
    when rows are one-hot and the marginal is uniform over K classes.
    """
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 2 or p.shape[0] < 1 or p.shape[1] < 1:
        raise ShapeError(f"probs must be [n, classes], got {p.shape}")
    if np.any(p < 0.0) or np.any(np.abs(p.sum(axis=1) - 1.0) > 1e-6):
        raise DomainError("each probs row must be a distribution")
    marginal = p.mean(axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0.0, p * (np.log(p) - np.log(marginal)), 0.0)
    return float(np.exp(terms.sum(axis=1).mean()))


def classifier_score(bundle: ModelBundle, classifier, n: int, stream: RngStream) -> float:
    """Label-entropy score of n generated samples under a probe classifier."""
    samples = sample_generated(bundle, n, stream)
    return label_entropy_score(classifier.predict_proba(samples))


def grid_symmetric_kl(
    a: np.ndarray,
    b: np.ndarray,
    bins: int = 32,
    alpha: float = 1e-3,
    bounds: tuple[tuple[float, float], tuple[float, float]] | None = None,
) -> float:
    """Symmetric KL between two 2-D samples on a shared smoothed grid.

    Both samples are histogrammed on the same bins x bins grid (bounds
    default to the joint extent), smoothed additively by alpha per cell,
    normalized, and scored KL(A||B) + KL(B||A). Zero only when the
    histograms agree exactly.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or a.shape[1] != 2 or b.ndim != 2 or b.shape[1] != 2:
        raise ShapeError("grid KL needs [n, 2] samples on both sides")
    if bins < 2 or alpha <= 0:
        raise ContractError("need bins >= 2 and alpha > 0")
    if bounds is None:
        both = np.concatenate([a, b], axis=0)
        lo = both.min(axis=0) - 1e-9
        hi = both.max(axis=0) + 1e-9
        bounds = ((float(lo[0]), float(hi[0])), (float(lo[1]), float(hi[1])))
    h_a, _, _ = np.histogram2d(a[:, 0], a[:, 1], bins=bins, range=bounds)
    h_b, _, _ = np.histogram2d(b[:, 0], b[:, 1], bins=bins, range=bounds)
    p = (h_a + alpha) / (h_a.sum() + alpha * bins * bins)
    q = (h_b + alpha) / (h_b.sum() + alpha * bins * bins)
    return float(np.sum(p * (np.log(p) - np.log(q))) + np.sum(q * (np.log(q) - np.log(p))))


@dataclass
class EvalReport:
    """One evaluation run, printable as a CSV row.

    Optional fields hold None when they do not apply to the dataset
    (bits/dim needs pixel data, the classifier score needs a labeled
    probe, the grid KL needs 2-D features) and serialize to empty cells.
    """

    nll: float
    nll_stderr: float
    rmse: float
    k_samples: int
    n_eval: int
    seed: int
    bits_per_dim: float | None = None
    classifier_score: float | None = None
    grid_symmetric_kl: float | None = None

    CSV_HEADER = (
        "nll,nll_stderr,rmse,bits_per_dim,classifier_score,grid_symmetric_kl,"
        "k_samples,n_eval,seed"
    )

    def to_csv_row(self) -> str:
        def cell(v) -> str:
            if v is None:
                return ""
            if isinstance(v, float):
                return "%.17g" % v
            return str(v)

        return ",".join(
            cell(v)
            for v in (
                self.nll,
                self.nll_stderr,
                self.rmse,
                self.bits_per_dim,
                self.classifier_score,
                self.grid_symmetric_kl,
                self.k_samples,
                self.n_eval,
                self.seed,
            )
        )


def evaluate_model(
    bundle: ModelBundle,
    x: np.ndarray,
    scale: str,
    k_samples: int,
    seed: int,
    classifier=None,
) -> EvalReport:
    """Assemble the metrics that apply to this data: always the NLL bound
    and RMSE; the grid KL for 2-D features; the classifier score when a
    probe is supplied."""
    stream = RngStream(seed)
    bound = nll_bound(bundle, x, k_samples, stream)
    report = EvalReport(
        nll=bound.nll,
        nll_stderr=bound.stderr,
        rmse=rmse_reconstruction(bundle, x, pixel_scale=(scale == "unit")),
        k_samples=k_samples,
        n_eval=x.shape[0],
        seed=seed,
    )
    if scale == "unit":
        report.bits_per_dim = bits_per_dim(bound.elbo, x.shape[1])
    if x.shape[1] == 2:
        samples = sample_generated(bundle, x.shape[0], stream)
        report.grid_symmetric_kl = grid_symmetric_kl(samples, x)
    if classifier is not None:
        report.classifier_score = classifier_score(bundle, classifier, x.shape[0], stream)
    return report
