"""scikit-learn style wrapper: ``fit`` calibrates the noise model, ``predict`` gives key rates.

Rows of ``X`` are operating points ``[loss_db, mu1, mu2, p_Z_alice, p_Z_bob]``.
``y`` holds the measured ``[qber, phi_Z]`` per row (or just ``qber``).
"""
from __future__ import annotations

import warnings

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .calibration import CalibrationTarget, calibrate_noise, model_error_rates
from .defaults import CALIBRATED_NOISE, DETECTOR_EXTRA_LOSS_DB
from .finitekey import DEFAULT_EPS, DEFAULT_F_EC, DecoyScheme, SecurityParams
from .session import SessionConfig, default_link, protocol_name, run_session

FEATURES = ("loss_db", "mu1", "mu2", "p_Z_alice", "p_Z_bob")


class KeyRateEstimator(BaseEstimator):
    def __init__(self, protocol="4D", f_ec=DEFAULT_F_EC, eps_sec=DEFAULT_EPS, block_size=10**7,
                 phi_weight=0.25, cutoff_db=None, detector_extra_loss_db=DETECTOR_EXTRA_LOSS_DB):
        self.protocol = protocol
        self.f_ec = f_ec
        self.eps_sec = eps_sec
        self.block_size = block_size
        self.phi_weight = phi_weight
        self.cutoff_db = cutoff_db
        self.detector_extra_loss_db = detector_extra_loss_db

    def _check_X(self, X):
        X = check_array(X, dtype=float)
        if X.shape[1] != len(FEATURES):
            raise ValueError(f"expected {len(FEATURES)} features {FEATURES}, got {X.shape[1]}")
        if np.any(X[:, 0] < 0):
            raise ValueError("loss_db must be non-negative")
        if np.any(X[:, 2] <= 0) or np.any(X[:, 1] <= X[:, 2]):
            raise ValueError("need mu1 > mu2 > 0 in every row")
        if np.any((X[:, 3:] <= 0) | (X[:, 3:] >= 1)):
            raise ValueError("basis probabilities must lie in (0, 1)")
        return X

    def _targets(self, X, y=None):
        out = []
        for i, row in enumerate(X):
            qber = phi = None
            if y is not None:
                qber = float(y[i, 0])
                phi = float(y[i, 1]) if y.shape[1] > 1 else None
            out.append(CalibrationTarget(*map(float, row), qber=qber if qber is not None else 0.0, phi_Z=phi))
        return out

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=float, multi_output=True)
        X = self._check_X(X)
        y = y.reshape(len(y), -1)
        if y.shape[1] > 2 or np.any((y < 0) | (y > 1)):
            raise ValueError("y must hold error rates [qber] or [qber, phi_Z] in [0, 1]")
        self.protocol_ = protocol_name(self.protocol)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            self.calibration_ = calibrate_noise(self._targets(X, y), self.protocol_, cutoff_db=self.cutoff_db,
                                                phi_weight=self.phi_weight,
                                                detector_extra_loss_db=self.detector_extra_loss_db)
        self.noise_ = self.calibration_.noise
        self.n_features_in_ = X.shape[1]
        return self

    def _config(self, row) -> SessionConfig:
        loss, mu1, mu2, pza, pzb = map(float, row)
        link = default_link(self.protocol_, loss, self.noise_, self.detector_extra_loss_db)
        return SessionConfig(self.protocol_, link, DecoyScheme(mu1, mu2),
                             SecurityParams(eps_sec=self.eps_sec, eps_corr=self.eps_sec, block_size=self.block_size),
                             p_Z_alice=pza, p_Z_bob=pzb, f_ec=self.f_ec)

    def predict(self, X) -> np.ndarray:
        """Secret key rate (bit/s) at each operating point."""
        check_is_fitted(self, "noise_")
        X = self._check_X(X)
        return np.array([run_session(self._config(row)).skr_bits_per_second for row in X])

    def predict_error_rates(self, X) -> np.ndarray:
        """Expected ``[qber, phi_Z]`` per row under the fitted noise."""
        check_is_fitted(self, "noise_")
        X = self._check_X(X)
        q, phi = model_error_rates(self.protocol_, self.noise_, self._targets(X), self.detector_extra_loss_db,
                                   self.block_size)
        return np.column_stack([q, phi])

    def score(self, X, y) -> float:
        """Negative RMS deviation of the predicted error rates from ``y``."""
        X, y = check_X_y(X, y, dtype=float, multi_output=True)
        y = y.reshape(len(y), -1)
        pred = self.predict_error_rates(X)[:, : y.shape[1]]
        return -float(np.sqrt(np.mean((pred - y) ** 2)))

    @classmethod
    def pretrained(cls, protocol="4D", **params) -> "KeyRateEstimator":
        """Estimator carrying the frozen default calibration, no fit needed."""
        est = cls(protocol=protocol, **params)
        est.protocol_ = protocol_name(protocol)
        est.noise_ = CALIBRATED_NOISE[est.protocol_]
        est.calibration_ = None
        est.n_features_in_ = len(FEATURES)
        return est
