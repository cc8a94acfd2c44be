"""Default link parameters, including the frozen noise calibration.

The noise values come from :func:`timebinqkd.calibration.calibrate_noise` run
against the reference error rates; re-run ``timebinqkd calibrate`` to refresh.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

# 20 % quantum efficiency plus ~2.2 dB gating/timing loss = 9.2 dB per SPAD
DETECTOR_EFFICIENCY = 0.20
DETECTOR_TOTAL_LOSS_DB = 9.2
DETECTOR_EXTRA_LOSS_DB = DETECTOR_TOTAL_LOSS_DB + 10.0 * math.log10(DETECTOR_EFFICIENCY)


@dataclass(frozen=True)
class NoiseParams:
    dark_count_rate: float
    intrinsic_error_Z: float
    intrinsic_error_X: float

    def __post_init__(self):
        if self.dark_count_rate < 0:
            raise ValueError("dark count rate must be non-negative")
        for v in (self.intrinsic_error_Z, self.intrinsic_error_X):
            if not 0.0 <= v <= 1.0:
                raise ValueError("intrinsic error rates must lie in [0, 1]")


CALIBRATED_NOISE = {
    "2D": NoiseParams(dark_count_rate=98.1, intrinsic_error_Z=0.01231, intrinsic_error_X=0.04257),
    "4D": NoiseParams(dark_count_rate=65.0, intrinsic_error_Z=0.03616, intrinsic_error_X=0.02773),
}
