"""Scikit-learn style front door.

ASVAE wraps the training loop behind the familiar fit / transform /
inverse_transform surface: transform maps data to encoder means,
inverse_transform maps latents back through the decoder mean, sample
draws fresh data, and score reports the variational log-likelihood
bound. All scikit-learn imports live in this module; the rest of the
package does not depend on it.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from . import autodiff as ad
from . import distributions as dist
from . import evaluation as ev
from . import networks as net
from . import trainer
from .autodiff import Tensor
from .rng import RngStream


class ASVAE(TransformerMixin, BaseEstimator):
    """Adversarial symmetric VAE with a transformer interface.

    Parameters mirror TrainConfig. mode selects the objective: "vae" is
    the analytic-KL baseline, "asvae" matches both joint distributions
    through two discriminators, "asvae-r" and "asvae-g" keep one side
    each, "ali" trains a single joint discriminator.

    Fitting runs in memory only; use the command line interface for
    checkpointed runs.
    """

    def __init__(
        self,
        mode: str = "asvae",
        latent_dim: int = 2,
        hidden: tuple[int, ...] = (256, 256),
        activation: str = "tanh",
        likelihood: str = "gaussian",
        learning_rate: float = 1e-4,
        batch_size: int = 64,
        max_epochs: int = 30,
        patience: int = 10,
        disc_steps: int = 1,
        disc_dropout: float = 0.1,
        val_fraction: float = 0.1,
        seed: int = 0,
    ):
        self.mode = mode
        self.latent_dim = latent_dim
        self.hidden = hidden
        self.activation = activation
        self.likelihood = likelihood
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.patience = patience
        self.disc_steps = disc_steps
        self.disc_dropout = disc_dropout
        self.val_fraction = val_fraction
        self.seed = seed

    def _config(self) -> trainer.TrainConfig:
        return trainer.TrainConfig(
            mode=self.mode,
            dataset="memory",
            latent_dim=self.latent_dim,
            hidden=tuple(self.hidden),
            activation=self.activation,
            likelihood=self.likelihood,
            learning_rate=self.learning_rate,
            batch_size=self.batch_size,
            max_epochs=self.max_epochs,
            patience=self.patience,
            disc_steps=self.disc_steps,
            disc_dropout=self.disc_dropout,
            val_fraction=self.val_fraction,
            seed=self.seed,
        )

    def fit(self, X, y=None):
        """Train on X; y is accepted and ignored for pipeline compatibility."""
        X = check_array(X, dtype=np.float64, ensure_min_samples=4)
        result = trainer.train_on_arrays(self._config(), X)
        self.n_features_in_ = X.shape[1]
        self.bundle_ = result.state.bundle
        self.history_ = result.metrics
        self.best_val_ = result.state.best_val
        self.n_epochs_ = result.state.epoch
        return self

    def _check_input(self, X, dim: int, what: str) -> np.ndarray:
        check_is_fitted(self, "bundle_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != dim:
            raise ValueError(f"{what} expects {dim} columns, got {X.shape[1]}")
        return X

    def transform(self, X) -> np.ndarray:
        """Encoder posterior means, one latent row per input row."""
        check_is_fitted(self, "bundle_")
        X = self._check_input(X, self.n_features_in_, "transform")
        sampler = net.detach_bundle(self.bundle_)
        with ad.unchecked():
            q = net.encoder_forward(sampler, Tensor(X))
        return q.mean.data.copy()

    def inverse_transform(self, Z) -> np.ndarray:
        """Decoder means for latent rows (bernoulli heads return probabilities)."""
        check_is_fitted(self, "bundle_")
        Z = self._check_input(Z, self.bundle_.latent_dim, "inverse_transform")
        sampler = net.detach_bundle(self.bundle_)
        with ad.unchecked():
            d = net.decoder_forward(sampler, Tensor(Z))
            out = d.mean().data if isinstance(d, dist.BernoulliVec) else d.mean.data
        return out.copy()

    def sample(self, n: int, seed: int = 0) -> np.ndarray:
        """Draw n rows from the fitted generative model."""
        check_is_fitted(self, "bundle_")
        return ev.sample_generated(self.bundle_, n, RngStream(seed))

    def score_samples(self, X, k_samples: int = 16, seed: int = 0) -> np.ndarray:
        """Per-row lower bound on log p(x), averaged over k posterior draws."""
        check_is_fitted(self, "bundle_")
        X = self._check_input(X, self.n_features_in_, "score_samples")
        bound = ev.nll_bound(self.bundle_, X, k_samples, RngStream(seed))
        return -bound.per_example

    def score(self, X, y=None) -> float:
        """Mean of score_samples: higher is better."""
        return float(np.mean(self.score_samples(X)))
