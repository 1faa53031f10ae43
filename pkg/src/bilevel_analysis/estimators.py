"""scikit-learn style wrappers around the denoisers.

All estimators take ``X`` as a stack of noisy images ``(T, N, N)`` and
``y`` as the matching clean images. ``predict`` returns denoised images and
``score`` the aggregate SNR in dB (``numpy.inf`` for an exact match).
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._validation import check_images, check_pairs, check_positive
from .datagen import Dataset
from .denoise import DenoiseConfig, admm_denoise, resolve_operator
from .evaluation import is_infinite, snr
from .train import (TrainConfig, beta_sweep, initial_filterbank, parse_schedule, sgd_train,
                    unsupervised_train)


class _DenoiserBase(BaseEstimator):

    def _denoise_config(self) -> DenoiseConfig:
        return DenoiseConfig(rho=self.rho, relax=self.relax, outer_iters=self.outer_iters,
                             tol=self.tol)

    def _select_beta(self, fb, X, y):
        if self.beta is not None:
            self.beta_ = check_positive(self.beta, "beta", allow_zero=True)
            self.sweep_ = None
            return
        sweep = beta_sweep(fb, Dataset(y, X), grid=self.beta_grid,
                           cfg=self._denoise_config(), refine=self.refine)
        self.beta_ = sweep.best_beta
        self.sweep_ = sweep

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "filterbank_")
        single = np.ndim(X) == 2
        X = check_images(X, min_side=self.filterbank_.f)
        out = admm_denoise(self.filterbank_, X, self._denoise_config(), beta=self.beta_).x
        return out[0] if single else out

    def score(self, X, y) -> float:
        X, y = check_pairs(X, y)
        value = snr(self.predict(X), y)
        return np.inf if is_infinite(value) else value


class AnalysisDenoiser(_DenoiserBase):
    """Denoiser with a fixed analysis operator.

    Parameters
    ----------
    operator : {'tv', 'dct'}, FilterBank or path
    beta : float or None
        Regularization weight. None picks it on the training pairs by
        :func:`~bilevel_analysis.train.beta_sweep`.
    beta_grid : array_like or None
        Sweep grid, default 15 log-spaced values over [1e-3, 1].
    refine : int
        Extra sweep points between the neighbours of the best grid value.
    rho, relax, outer_iters, tol
        ADMM settings.
    """

    def __init__(self, operator="tv", beta=None, beta_grid=None, refine=0, rho=1.0, relax=1.0,
                 outer_iters=400, tol=0.0):
        self.operator = operator
        self.beta = beta
        self.beta_grid = beta_grid
        self.refine = refine
        self.rho = rho
        self.relax = relax
        self.outer_iters = outer_iters
        self.tol = tol

    def fit(self, X, y):
        fb = resolve_operator(self.operator)
        X, y = check_pairs(X, y, min_side=fb.f)
        self._select_beta(fb, X, y)
        self.filterbank_ = fb
        return self


class SupervisedAnalysisDenoiser(_DenoiserBase):
    """Filters learned by minimizing the denoising error on training pairs.

    With ``beta=None`` the weight comes from a sweep with the initial bank,
    which is then held fixed during training.
    """

    def __init__(self, beta=None, step_size=2.0, schedule="1x5000,5x2500,10x2500", seed=0,
                 init="dct", warm_start=True, beta_grid=None, refine=0, rho=10.0,
                 relax=1.7, outer_iters=2000, tol=1e-6):
        self.beta = beta
        self.step_size = step_size
        self.schedule = schedule
        self.seed = seed
        self.init = init
        self.warm_start = warm_start
        self.beta_grid = beta_grid
        self.refine = refine
        self.rho = rho
        self.relax = relax
        self.outer_iters = outer_iters
        self.tol = tol

    def fit(self, X, y):
        cfg = TrainConfig(schedule=parse_schedule(self.schedule), init=self.init)
        fb0 = initial_filterbank(cfg.init)
        X, y = check_pairs(X, y, min_side=fb0.f)
        self._select_beta(fb0, X, y)
        cfg = TrainConfig(beta=self.beta_, step_size=self.step_size, schedule=cfg.schedule,
                          seed=self.seed, init=self.init, warm_start=self.warm_start,
                          denoise=self._denoise_config())
        self.run_ = sgd_train(Dataset(y, X), cfg, init_fb=fb0)
        self.filterbank_ = self.run_.final_fb
        return self


class UnsupervisedAnalysisDenoiser(_DenoiserBase):
    """Orthonormal filters learned to sparsify the clean training images.

    ``learn_beta`` weights the sparsity term during learning; None takes the
    weight a sweep picks for the DCT bank on the training pairs.
    """

    def __init__(self, beta=None, n_iter=200, learn_rho=1.0, learn_beta=None, beta_grid=None,
                 refine=0, rho=1.0, relax=1.0, outer_iters=400, tol=0.0):
        self.beta = beta
        self.n_iter = n_iter
        self.learn_rho = learn_rho
        self.learn_beta = learn_beta
        self.beta_grid = beta_grid
        self.refine = refine
        self.rho = rho
        self.relax = relax
        self.outer_iters = outer_iters
        self.tol = tol

    def fit(self, X, y):
        X, y = check_pairs(X, y, min_side=3)
        if self.learn_beta is None:
            self.learn_beta_ = beta_sweep("dct", Dataset(y, X), grid=self.beta_grid,
                                          cfg=self._denoise_config()).best_beta
        else:
            self.learn_beta_ = check_positive(self.learn_beta, "learn_beta")
        self.learn_info_ = unsupervised_train(y, iters=self.n_iter, rho=self.learn_rho,
                                              beta=self.learn_beta_, return_info=True)
        fb = self.learn_info_.fb
        self._select_beta(fb, X, y)
        self.filterbank_ = fb
        return self
