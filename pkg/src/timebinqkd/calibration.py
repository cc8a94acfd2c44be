"""Fit the unpublished noise parameters (dark counts, intrinsic Z/X errors) to measured error rates."""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import least_squares, minimize_scalar

from .channel import expected_tallies
from .defaults import DETECTOR_EXTRA_LOSS_DB, NoiseParams
from .finitekey import DecoyScheme, estimate_bounds
from .reference import CUTOFF_LOSS_DB, REFERENCE_POINTS
from .session import SessionConfig, cutoff_loss, default_link, protocol_name

logger = logging.getLogger(__name__)

# A fit is adequate when every QBER point is reproduced within this many absolute units.
QBER_TOLERANCE = 0.004
# O(1) scaling of (dark counts [Hz], e_Z, e_X) for the optimiser
_SCALE = np.array([100.0, 0.01, 0.01])
# residual per dB of cutoff miss: 2 dB weighs like 0.4 percentage points of QBER
CUTOFF_WEIGHT = 0.002


class CalibrationWarning(UserWarning):
    pass


@dataclass(frozen=True)
class CalibrationTarget:
    loss_db: float
    mu1: float
    mu2: float
    p_Z_alice: float
    p_Z_bob: float
    qber: float
    phi_Z: float | None = None


@dataclass
class CalibrationResult:
    protocol: str
    noise: NoiseParams
    qber_model: np.ndarray
    phi_model: np.ndarray
    qber_residuals: np.ndarray
    phi_residuals: np.ndarray
    cost: float
    adequate: bool
    targets: tuple = field(repr=False, default=())
    cutoff_db: float | None = None
    cutoff_target_db: float | None = None

    @property
    def max_qber_residual(self) -> float:
        return float(np.max(np.abs(self.qber_residuals))) if self.qber_residuals.size else 0.0

    def to_dict(self) -> dict:
        return {
            "protocol": self.protocol,
            "dark_count_rate": self.noise.dark_count_rate,
            "intrinsic_error_Z": self.noise.intrinsic_error_Z,
            "intrinsic_error_X": self.noise.intrinsic_error_X,
            "qber_model": self.qber_model.tolist(),
            "phi_model": self.phi_model.tolist(),
            "qber_residuals": self.qber_residuals.tolist(),
            "phi_residuals": self.phi_residuals.tolist(),
            "cutoff_db": self.cutoff_db,
            "cutoff_target_db": self.cutoff_target_db,
            "adequate": self.adequate,
        }


def reference_targets(protocol) -> list[CalibrationTarget]:
    return [CalibrationTarget(p.loss_db, p.mu1, p.mu2, p.p_Z_alice, p.p_Z_bob, p.qber, p.phi_Z)
            for p in REFERENCE_POINTS[protocol_name(protocol)]]


def model_error_rates(protocol, noise: NoiseParams, targets, detector_extra_loss_db: float = DETECTOR_EXTRA_LOSS_DB,
                      block_size: int | None = None):
    """Expected (QBER, phi_Z) at each target operating point, without rounding the tallies."""
    name = protocol_name(protocol)
    qber, phi = [], []
    for t in targets:
        cfg = SessionConfig(protocol=name, link=default_link(name, t.loss_db, noise, detector_extra_loss_db),
                            decoy=DecoyScheme(t.mu1, t.mu2), p_Z_alice=t.p_Z_alice, p_Z_bob=t.p_Z_bob)
        n_Z = block_size or cfg.security.block_size
        tallies, _ = expected_tallies(cfg.resolved_link(), cfg.d, n_Z, rounded=False)
        qber.append(tallies.error_rate("Z"))
        phi.append(estimate_bounds(tallies, cfg.decoy, cfg.security, cfg.d, cfg.gamma_constant).phi_Z_upper)
    return np.array(qber), np.array(phi)


def calibrate_noise(targets=None, protocol="4D", *, cutoff_db="auto", phi_weight: float = 0.25,
                    qber_weight: float = 1.0, cutoff_weight: float = CUTOFF_WEIGHT,
                    detector_extra_loss_db: float = DETECTOR_EXTRA_LOSS_DB, max_dark_rate: float = 2000.0,
                    starts=None, tolerance: float = QBER_TOLERANCE) -> CalibrationResult:
    """Least-squares fit of (dark count rate, intrinsic Z error, intrinsic X error).

    ``targets`` defaults to the reference operating points of ``protocol``. Targets
    without ``phi_Z`` only constrain the QBER. ``cutoff_db`` adds the loss at which
    the optimised key vanishes as a further target; ``"auto"`` uses the reference
    cutoff when ``targets`` is None and nothing otherwise. With a cutoff the dark
    count rate is searched in one dimension (the cutoff is only piecewise smooth)
    and the two intrinsic errors are fitted by least squares at each step.

    The result is flagged (and a :class:`CalibrationWarning` issued) when any
    fitted QBER misses its target by more than ``tolerance``.
    """
    name = protocol_name(protocol)
    if cutoff_db == "auto":
        cutoff_db = CUTOFF_LOSS_DB[name] if targets is None else None
    targets = tuple(reference_targets(name) if targets is None else targets)
    if not targets:
        raise ValueError("calibration needs at least one target")
    q_target = np.array([t.qber for t in targets])
    has_phi = np.array([t.phi_Z is not None for t in targets])
    phi_target = np.array([t.phi_Z if t.phi_Z is not None else 0.0 for t in targets])

    def noise_of(x):
        x = np.maximum(x, 0.0) * _SCALE
        return NoiseParams(float(x[0]), float(min(x[1], 1.0)), float(min(x[2], 1.0)))

    def residuals(x):
        q, phi = model_error_rates(name, noise_of(x), targets, detector_extra_loss_db)
        r = [qber_weight * (q - q_target)]
        if phi_weight > 0 and has_phi.any():
            r.append(phi_weight * (phi - phi_target)[has_phi])
        return np.concatenate(r)

    def fit(fixed_dark=None):
        best = None
        for x0 in starts if starts is not None else ([1.0, 1.0, 1.0], [0.0, 0.0, 0.0], [5.0, 2.0, 4.0]):
            if fixed_dark is None:
                sol = least_squares(residuals, np.asarray(x0, float), bounds=(0.0, [1e4, 100.0, 100.0]))
            else:
                sub = lambda e: residuals(np.r_[fixed_dark / _SCALE[0], e])
                sol = least_squares(sub, np.asarray(x0[1:], float), bounds=(0.0, 100.0))
                sol.x = np.r_[fixed_dark / _SCALE[0], sol.x]
            if best is None or sol.cost < best.cost:
                best = sol
        return best

    cutoff = None
    if cutoff_db is None:
        best = fit()
        cost = float(best.cost)
    else:
        def outer(dark):
            sol = fit(dark)
            cut = cutoff_loss(name, noise_of(sol.x), detector_extra_loss_db=detector_extra_loss_db)
            total = sol.cost + 0.5 * (cutoff_weight * (cut - cutoff_db)) ** 2
            logger.info("dark %.2f Hz: cutoff %.2f dB, cost %.3g", dark, cut, total)
            cache[dark] = (total, sol, cut)
            return total

        cache = {}
        minimize_scalar(outer, bounds=(0.0, max_dark_rate), method="bounded", options={"xatol": 0.5})
        cost, best, cutoff = min(cache.values(), key=lambda v: v[0])
    noise = noise_of(best.x)
    q, phi = model_error_rates(name, noise, targets, detector_extra_loss_db)
    q_res = q - q_target
    phi_res = np.where(has_phi, phi - phi_target, np.nan)
    adequate = bool(np.all(np.abs(q_res) <= tolerance + 1e-12))
    if not adequate:
        msg = (f"{name} noise model misses the QBER targets by up to {np.max(np.abs(q_res)):.4f} "
               f"(tolerance {tolerance}); the three-parameter model is inadequate for these targets")
        warnings.warn(msg, CalibrationWarning, stacklevel=2)
        logger.warning(msg)
    return CalibrationResult(name, noise, q, phi, q_res, phi_res, float(cost), adequate, targets,
                             cutoff, cutoff_db)
