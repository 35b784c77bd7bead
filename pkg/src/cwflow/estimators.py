"""scikit-learn style wrappers around the reconstruction model and the OOD detector."""
from __future__ import annotations

import numpy as np
import torch
from sklearn.base import BaseEstimator, ClassifierMixin

from . import metrics
from .cwfa import CWFA, CWFAConfig, TrainReport, build_conditions, load_model, save_model, train
from .ood import classify, score_samples, select_threshold
from .validation import check_is_fitted, check_pairs, check_stack


class CWFAReconstructor(BaseEstimator):
    """Light-field image to volume reconstruction with a conditional wavelet flow.

    Parameters
    ----------
    layout : LensletLayout
        Lenslet centers used to crop the per-lenslet views.
    levels : int, default=3
        Number of flow levels n; the volume depth must be divisible by 2**n.
    blocks_per_level : int, default=6
    conv_channels : int, default=14
    alpha : float, default=0.48
        Weight of the spatial (reconstruction MSE) term of each level loss.
    rho : float, default=1e-5
        L2 penalty on the parameters, also the optimiser weight decay.
    block_type : {"affine", "coupling"}, default="affine"
    epochs : int, default=100
        Total epochs, split evenly over the n + 1 training stages unless
        ``epochs_per_level`` is set.
    epochs_per_level : int or None, default=None
    learning_rate : float, default=1e-4
    batch_size : int, default=1
    temperature : float, default=0.0
        Latent scale used by :meth:`predict`; 0 gives the deterministic mode.
    detail_base : {"prior", "none"}, default="prior"
    random_state : int, default=0

    Attributes
    ----------
    model_ : CWFA
    prior_ : ndarray of shape (D, H, W)
        Mean of the training volumes.
    report_ : TrainReport
    """

    def __init__(self, layout=None, levels=3, blocks_per_level=6, conv_channels=14, alpha=0.48, rho=1e-5,
                 block_type="affine", epochs=100, epochs_per_level=None, learning_rate=1e-4, batch_size=1,
                 temperature=0.0, detail_base="prior", random_state=0):
        self.layout = layout
        self.levels = levels
        self.blocks_per_level = blocks_per_level
        self.conv_channels = conv_channels
        self.alpha = alpha
        self.rho = rho
        self.block_type = block_type
        self.epochs = epochs
        self.epochs_per_level = epochs_per_level
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.temperature = temperature
        self.detail_base = detail_base
        self.random_state = random_state

    def _config(self) -> CWFAConfig:
        return CWFAConfig(
            levels=self.levels, blocks_per_level=self.blocks_per_level, conv_channels=self.conv_channels,
            alpha=self.alpha, rho=self.rho, temperature=self.temperature, block_type=self.block_type,
            epochs=self.epochs, epochs_per_level=self.epochs_per_level, learning_rate=self.learning_rate,
            batch_size=self.batch_size, detail_base=self.detail_base, seed=int(self.random_state or 0),
        )

    def fit(self, X, y):
        """Train on sensor images ``X`` [N, Hs, Ws] and volumes ``y`` [N, D, H, W]."""
        if self.layout is None:
            raise ValueError("CWFAReconstructor needs a lenslet layout")
        X, y = check_pairs(X, y)
        cfg = self._config()
        self.model_ = CWFA(cfg, y.shape[1:], len(self.layout))
        self.prior_ = y.mean(axis=0)
        volumes = torch.from_numpy(y)
        cond = build_conditions(X, self.layout, volumes.mean(0))
        self.report_ = train(self.model_, cond, volumes, cfg, TrainReport())
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        return self

    def _cond(self, X):
        return build_conditions(X, self.layout, self.model_.prior)

    def predict(self, X, temperature=None, generator=None):
        """Reconstructed volumes [N, D, H, W] (clipped to >= 0 on the prior support)."""
        check_is_fitted(self, "model_")
        X = check_stack(X, 3, "X")
        t = self.temperature if temperature is None else temperature
        with torch.no_grad():
            return self.model_.reconstruct(self._cond(X), t, generator).numpy()

    def score_samples(self, X, y):
        """Per-level per-dimension NLL, shape [N, levels + 1]; column 0 is CWF step 1."""
        check_is_fitted(self, "model_")
        X, y = check_pairs(X, y)
        with torch.no_grad():
            return self.model_.total_loglik(torch.from_numpy(y), self._cond(X)).numpy()

    def score(self, X, y):
        """Mean PSNR (dB) of :meth:`predict` against ``y``."""
        X, y = check_pairs(X, y)
        return float(np.mean([metrics.psnr(a, b) for a, b in zip(y, self.predict(X))]))

    def save(self, path) -> None:
        check_is_fitted(self, "model_")
        save_model(self.model_, path, self.layout)

    @classmethod
    def load(cls, path) -> "CWFAReconstructor":
        model, meta = load_model(path)
        cfg = model.config
        est = cls(layout=meta.get("layout"), levels=cfg.levels, blocks_per_level=cfg.blocks_per_level,
                  conv_channels=cfg.conv_channels, alpha=cfg.alpha, rho=cfg.rho, block_type=cfg.block_type,
                  epochs=cfg.epochs, epochs_per_level=cfg.epochs_per_level, learning_rate=cfg.learning_rate,
                  batch_size=cfg.batch_size, temperature=cfg.temperature, detail_base=cfg.detail_base,
                  random_state=cfg.seed)
        est.model_ = model
        est.prior_ = model.prior.numpy().copy()
        return est


class LikelihoodOODDetector(ClassifierMixin, BaseEstimator):
    """Flags samples whose NLL at one flow level exceeds an F1-selected threshold.

    Parameters
    ----------
    reconstructor : CWFAReconstructor
        A fitted reconstructor supplying the likelihood model.
    level : int, default=1
        CWF step scored (1 = highest resolution, levels + 1 = LR term).
    n_thresholds : int, default=1000

    Attributes
    ----------
    threshold_ : float
    report_ : ThresholdReport
    classes_ : ndarray, ``[0, 1]`` (1 = out of distribution)
    """

    def __init__(self, reconstructor=None, level=1, n_thresholds=1000):
        self.reconstructor = reconstructor
        self.level = level
        self.n_thresholds = n_thresholds

    def _scores(self, X, volumes):
        rec = self.reconstructor
        check_is_fitted(rec, "model_")
        return score_samples(rec.model_, X, volumes, rec.layout)

    def fit(self, X, volumes, labels):
        """Select the threshold from labelled pairs (labels: 1/True/"out" vs 0/False/"in")."""
        scores = self._scores(X, volumes)
        self.report_ = select_threshold(scores, labels, self.n_thresholds, self.level)
        self.threshold_ = self.report_.threshold
        self.classes_ = np.array([0, 1])
        return self

    def decision_function(self, X, volumes):
        """NLL at the scored level; larger means more likely out of distribution."""
        return np.array([s.level(self.level) for s in self._scores(X, volumes)])

    def predict(self, X, volumes):
        check_is_fitted(self, "report_")
        return np.array([int(classify(s, self.report_) == "out") for s in self._scores(X, volumes)])

    def score(self, X, volumes, labels):
        """F1 of the "out" class."""
        pred = self.predict(X, volumes).astype(bool)
        true = np.array([lab == "out" if isinstance(lab, str) else bool(lab) for lab in labels])
        tp = np.sum(pred & true)
        denom = 2 * tp + np.sum(pred & ~true) + np.sum(~pred & true)
        return float(2 * tp / denom) if denom else 0.0
