"""scikit-learn style wrappers around the training and sampling routines.

``X`` is a stack of binary layouts and ``y`` the matching fabricated
images, both shaped (N, H, W). Sampling methods return (N, M, H, W).
"""

from dataclasses import fields

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .exceptions import InvalidInputError
from .networks import (UNetEnsembleModule, draw_samples, load_checkpoint, save_checkpoint,
                       unet_forward)
from .training import TrainConfig, train_ensemble, train_genfab, train_unet
from .validation import check_pair_arrays

_TRAIN_FIELDS = [f.name for f in fields(TrainConfig) if f.name not in ("checkpoint_path", "seed")]


class _TwinBase(BaseEstimator):
    def _train_config(self):
        params = {k: getattr(self, k) for k in _TRAIN_FIELDS}
        return TrainConfig(seed=self.random_state, **params)

    def _layouts(self, X):
        X = check_pair_arrays(X)
        size = self.model_.cfg.input_size
        if X.shape[1:] != (size, size):
            raise InvalidInputError(f"layouts must be {size}x{size}, got {X.shape[1:]}")
        return X

    def sample(self, X, n_samples=35, random_state=0):
        check_is_fitted(self, "model_")
        X = self._layouts(X)
        return np.stack([np.stack(draw_samples(self.model_, x, n_samples, random_state))
                         for x in X])

    def save(self, path):
        check_is_fitted(self, "model_")
        save_checkpoint(self.model_, path, {"estimator": type(self).__name__,
                                            "params": self.get_params()})

    @classmethod
    def load(cls, path):
        model, meta = load_checkpoint(path)
        est = cls(**meta.get("params", {}))
        est.model_ = model
        est.loss_log_ = []
        return est


def _init_train_params(self, steps, batch_size, lr_G, lr_D, beta1, beta2, adam_eps,
                       lambda_l1, lambda_gan, latent_dim, depth, base_width, log_every,
                       random_state):
    self.steps = steps
    self.batch_size = batch_size
    self.lr_G = lr_G
    self.lr_D = lr_D
    self.beta1 = beta1
    self.beta2 = beta2
    self.adam_eps = adam_eps
    self.lambda_l1 = lambda_l1
    self.lambda_gan = lambda_gan
    self.latent_dim = latent_dim
    self.depth = depth
    self.base_width = base_width
    self.log_every = log_every
    self.random_state = random_state


class GenFab(_TwinBase):
    """Noise-injected conditional GAN; ``sample`` draws fabrication outcomes."""

    def __init__(self, steps=2000, batch_size=4, lr_G=2e-4, lr_D=2e-4, beta1=0.5, beta2=0.999,
                 adam_eps=1e-8, lambda_l1=100.0, lambda_gan=1.0, latent_dim=16, depth=8,
                 base_width=32, log_every=1, random_state=0):
        _init_train_params(self, steps, batch_size, lr_G, lr_D, beta1, beta2, adam_eps,
                           lambda_l1, lambda_gan, latent_dim, depth, base_width, log_every,
                           random_state)

    def fit(self, X, y):
        res = train_genfab(check_pair_arrays(X, y), self._train_config())
        self.model_, self.discriminator_, self.loss_log_ = res.model, res.discriminator, res.log
        return self

    def predict(self, X):
        """One outcome per layout, using latent draw 0."""
        return self.sample(X, 1, self.random_state)[:, 0]


class UNetRegressor(_TwinBase):
    """L1-trained U-Net; with ``dropout_p > 0``, ``sample`` is MC dropout."""

    def __init__(self, dropout_p=0.0, steps=2000, batch_size=4, lr_G=2e-4, lr_D=2e-4, beta1=0.5,
                 beta2=0.999, adam_eps=1e-8, lambda_l1=100.0, lambda_gan=0.0, latent_dim=16,
                 depth=8, base_width=32, log_every=1, random_state=0):
        self.dropout_p = dropout_p
        _init_train_params(self, steps, batch_size, lr_G, lr_D, beta1, beta2, adam_eps,
                           lambda_l1, lambda_gan, latent_dim, depth, base_width, log_every,
                           random_state)

    def fit(self, X, y):
        res = train_unet(check_pair_arrays(X, y), self._train_config(), self.dropout_p)
        self.model_, self.loss_log_ = res.model, res.log
        return self

    def predict(self, X):
        check_is_fitted(self, "model_")
        return np.stack([unet_forward(self.model_, x) for x in self._layouts(X)])


class UNetEnsemble(_TwinBase):
    """``n_members`` U-Nets trained from distinct seeds."""

    def __init__(self, n_members=5, steps=2000, batch_size=4, lr_G=2e-4, lr_D=2e-4, beta1=0.5,
                 beta2=0.999, adam_eps=1e-8, lambda_l1=100.0, lambda_gan=0.0, latent_dim=16,
                 depth=8, base_width=32, log_every=1, random_state=0):
        self.n_members = n_members
        _init_train_params(self, steps, batch_size, lr_G, lr_D, beta1, beta2, adam_eps,
                           lambda_l1, lambda_gan, latent_dim, depth, base_width, log_every,
                           random_state)

    def fit(self, X, y):
        results = train_ensemble(check_pair_arrays(X, y), self._train_config(), self.n_members,
                                 self.random_state)
        self.model_ = UNetEnsembleModule(r.model for r in results)
        self.loss_log_ = [r.log for r in results]
        return self

    def predict(self, X):
        """Ensemble mean."""
        return self.sample(X, self.n_members).mean(axis=1)
