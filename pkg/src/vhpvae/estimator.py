"""Scikit-learn style front end for the hierarchical-prior VAE.

`HierarchicalPriorVAE` wraps model construction, the constrained-optimisation
training loop, and the importance-sampled likelihood behind the familiar
`fit` / `transform` / `score` surface so the model composes with pipelines
and `clone`.  The lower-level pieces (`Trainer`, `VhpModel`, the CLI) remain
available for everything the wrapper does not cover.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .evalmetrics import loglik_iw_per_datum
from .schedule import ScheduleConfig
from .stochastic import VhpModel, prior_sample
from .trainer import TrainConfig, Trainer


class HierarchicalPriorVAE(TransformerMixin, BaseEstimator):
    """VAE with a learned two-level prior, trained under a KL constraint.

    `fit` trains encoder/decoder plus a second-stage prior on the latent
    codes; `transform` maps data to posterior means, `inverse_transform`
    decodes latent codes back to data space, and `score` is the mean
    importance-sampled test log-likelihood (higher is better).

    Parameters mirror the training config: `hidden` sets the layer widths
    shared by all four networks, `algorithm` picks the beta schedule
    ("rewo", "geco", "warmup", "none"), and `kappa` is the reconstruction
    tolerance the schedule enforces.
    """

    def __init__(self, hidden=(64, 64), activation="relu", gated=False,
                 decoder_family="gaussian", dim_z=2, dim_zeta=2,
                 iw_samples=16, algorithm="rewo", kappa=0.02, nu=1.0,
                 tau=3.0, alpha=0.99, beta0=1e-3, warmup_steps=None,
                 learning_rate=1e-4, batch_size=128, epochs=20,
                 s_loglik=100, seed=0):
        self.hidden = hidden
        self.activation = activation
        self.gated = gated
        self.decoder_family = decoder_family
        self.dim_z = dim_z
        self.dim_zeta = dim_zeta
        self.iw_samples = iw_samples
        self.algorithm = algorithm
        self.kappa = kappa
        self.nu = nu
        self.tau = tau
        self.alpha = alpha
        self.beta0 = beta0
        self.warmup_steps = warmup_steps
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.epochs = epochs
        self.s_loglik = s_loglik
        self.seed = seed

    def _schedule_config(self):
        return ScheduleConfig(algorithm=self.algorithm, kappa=self.kappa,
                              nu=self.nu, tau=self.tau, alpha=self.alpha,
                              beta0=self.beta0,
                              warmup_steps=self.warmup_steps)

    def fit(self, X, y=None):
        """Train on `X` (n_samples, n_features); `y` is ignored."""
        X = check_array(X, dtype=np.float64)
        schedule_cfg = self._schedule_config()
        # batches never exceed the dataset size
        train_cfg = TrainConfig(epochs=self.epochs,
                                batch_size=min(self.batch_size, X.shape[0]),
                                learning_rate=self.learning_rate,
                                seed=self.seed)
        rng = np.random.default_rng(self.seed)
        model = VhpModel.create(rng, X.shape[1], self.dim_z, self.dim_zeta,
                                hidden=tuple(self.hidden),
                                activation=self.activation,
                                decoder_family=self.decoder_family,
                                iw_samples=self.iw_samples,
                                gated=self.gated)
        trainer = Trainer(model, schedule_cfg, train_cfg)
        trainer.run(X)
        self.trainer_ = trainer
        self.model_ = trainer.model
        self.history_ = trainer.history
        self.n_features_in_ = X.shape[1]
        return self

    def _validate_for_model(self, X):
        check_is_fitted(self, "model_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(
                f"X has {X.shape[1]} features, but {type(self).__name__} "
                f"was fitted with {self.n_features_in_}")
        return X

    def transform(self, X):
        """Posterior mean codes, shape (n_samples, dim_z)."""
        X = self._validate_for_model(X)
        return self.model_.encoder(X).mean

    def inverse_transform(self, Z):
        """Decoder means for latent codes `Z`, shape (n_samples, dim_z)."""
        check_is_fitted(self, "model_")
        Z = check_array(Z, dtype=np.float64)
        if Z.shape[1] != self.model_.dim_z:
            raise ValueError(
                f"Z has {Z.shape[1]} columns, expected {self.model_.dim_z}")
        return self.model_.decoder(Z).mean

    def sample(self, n_samples=1, random_state=None):
        """Decoder means of `n_samples` draws from the learned prior."""
        check_is_fitted(self, "model_")
        rng = np.random.default_rng(random_state)
        z, _ = prior_sample(self.model_, n_samples, rng)
        return self.model_.decoder(z).mean

    def score_samples(self, X):
        """Per-datum importance-sampled log-likelihood, shape (n_samples,)."""
        X = self._validate_for_model(X)
        return loglik_iw_per_datum(self.model_, X, self.s_loglik,
                                   seed=self.seed)

    def score(self, X, y=None):
        """Mean of `score_samples(X)`; `y` is ignored."""
        return float(np.mean(self.score_samples(X)))
