"""Operating points and measured values of the fiber experiment (two protocols, four spools)."""
from __future__ import annotations

from dataclasses import dataclass


@dataclass(frozen=True)
class OperatingPoint:
    protocol: str
    length_km: float
    loss_db: float
    mu1: float
    mu2: float
    p_Z_alice: float
    p_Z_bob: float
    qber: float
    phi_Z: float
    skr: float
    secret_fraction: float


def _rows(protocol, mu1, mu2, p_bob, qber, phi, skr, frac):
    lengths = (25, 65, 105, 145)
    losses = (5.1, 14.0, 23.0, 31.5)
    return tuple(
        OperatingPoint(protocol, *row)
        for row in zip(lengths, losses, mu1, mu2, (0.9,) * 4, p_bob, qber, phi, skr, frac)
    )


REFERENCE_POINTS = {
    "2D": _rows(
        "2D",
        mu1=(0.07, 0.12, 0.26, 0.31),
        mu2=(0.03, 0.06, 0.14, 0.15),
        p_bob=(0.5, 0.9, 0.5, 0.5),
        qber=(0.011, 0.011, 0.014, 0.023),
        phi=(0.066, 0.092, 0.089, 0.136),
        skr=(15e3, 12e3, 5.1e3, 0.53e3),
        frac=(2.6e-5, 2.0e-5, 8.7e-6, 8.9e-7),
    ),
    "4D": _rows(
        "4D",
        mu1=(0.10, 0.20, 0.21, 0.18),
        mu2=(0.05, 0.10, 0.10, 0.08),
        p_bob=(0.7, 0.7, 0.7, 0.5),
        qber=(0.034, 0.034, 0.049, 0.079),
        phi=(0.039, 0.046, 0.057, 0.072),
        skr=(37e3, 24e3, 5.5e3, 0.42e3),
        frac=(1.2e-4, 7.9e-5, 1.8e-5, 1.4e-6),
    ),
}

BLOCK_SIZE = 10**7
# last channel loss with a positive key
CUTOFF_LOSS_DB = {"2D": 39.0, "4D": 34.0}
# SKR(4D) / SKR(2D) at the two shortest spools
ENHANCEMENT = {5.1: 2.4, 14.0: 2.0}
# 25 km <-> 5.1 dB
FIBER_DB_PER_KM = 0.204


def reference_point(protocol: str, loss_db: float) -> OperatingPoint:
    for p in REFERENCE_POINTS[protocol.upper()]:
        if abs(p.loss_db - loss_db) < 1e-9:
            return p
    raise KeyError(f"no reference point for {protocol} at {loss_db} dB")
