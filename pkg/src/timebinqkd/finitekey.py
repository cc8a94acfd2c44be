"""One-decoy finite-key bounds and secret-key length for the 2D and 4D protocols.

All counts are per privacy-amplification block. Intermediate bounds that come
out negative are clamped at zero.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict

from .qudit import Basis, binary_entropy, shannon_entropy_4d, symbol_entropy

LN2 = math.log(2.0)

DEFAULT_EPS = 1e-9
DEFAULT_F_EC = 1.16
GAMMA_CONSTANT = 21.0


@dataclass(frozen=True)
class SecurityParams:
    eps_sec: float = DEFAULT_EPS
    eps_corr: float = DEFAULT_EPS
    eps_1: float | None = None
    eps_2: float | None = None
    block_size: int = 10**7

    def __post_init__(self):
        # concentration-bound budget defaults to eps_sec / 19
        if self.eps_1 is None:
            object.__setattr__(self, "eps_1", self.eps_sec / 19)
        if self.eps_2 is None:
            object.__setattr__(self, "eps_2", self.eps_sec / 19)
        for name in ("eps_sec", "eps_corr", "eps_1", "eps_2"):
            v = getattr(self, name)
            if not 0.0 < v < 1.0:
                raise ValueError(f"{name} must lie in (0, 1), got {v!r}")
        if self.block_size < 1:
            raise ValueError("block_size must be >= 1")


@dataclass(frozen=True)
class DecoyScheme:
    mu1: float
    mu2: float
    p_mu1: float = 0.5
    p_mu2: float = 0.5

    def __post_init__(self):
        if not self.mu1 > self.mu2 > 0:
            raise ValueError(f"need mu1 > mu2 > 0, got mu1={self.mu1}, mu2={self.mu2}")
        if abs(self.p_mu1 + self.p_mu2 - 1.0) > 1e-12 or min(self.p_mu1, self.p_mu2) <= 0:
            raise ValueError("intensity probabilities must be positive and sum to 1")

    @property
    def intensities(self) -> tuple[float, float]:
        return (self.mu1, self.mu2)

    @property
    def probabilities(self) -> tuple[float, float]:
        return (self.p_mu1, self.p_mu2)


@dataclass
class TallyCounts:
    """Detections ``n[basis][k]`` and errors ``m[basis][k]``; k = 0 for mu1, 1 for mu2."""

    n: dict = field(default_factory=lambda: {"Z": [0, 0], "X": [0, 0]})
    m: dict = field(default_factory=lambda: {"Z": [0, 0], "X": [0, 0]})

    def __post_init__(self):
        for b in ("Z", "X"):
            self.n[b] = list(self.n[b])
            self.m[b] = list(self.m[b])
            for nk, mk in zip(self.n[b], self.m[b]):
                if not 0 <= mk <= nk:
                    raise ValueError(f"inconsistent tallies in basis {b}: m={mk}, n={nk}")

    @classmethod
    def from_arrays(cls, n_z, m_z, n_x, m_x):
        return cls({"Z": list(n_z), "X": list(n_x)}, {"Z": list(m_z), "X": list(m_x)})

    def n_total(self, basis: Basis | str) -> float:
        return sum(self.n[Basis(basis).value])

    def m_total(self, basis: Basis | str) -> float:
        return sum(self.m[Basis(basis).value])

    def error_rate(self, basis: Basis | str) -> float:
        n = self.n_total(basis)
        return self.m_total(basis) / n if n else 0.0

    def __add__(self, other: "TallyCounts") -> "TallyCounts":
        return TallyCounts(
            {b: [x + y for x, y in zip(self.n[b], other.n[b])] for b in ("Z", "X")},
            {b: [x + y for x, y in zip(self.m[b], other.m[b])] for b in ("Z", "X")},
        )

    def to_dict(self) -> dict:
        return {"n": {b: list(v) for b, v in self.n.items()}, "m": {b: list(v) for b, v in self.m.items()}}


@dataclass
class PhotonBounds:
    D0_lower: float = 0.0
    D0_upper: float = 0.0
    D1_lower: float = 0.0
    D1_X_lower: float = 0.0
    v1_upper: float = 0.0
    phi_Z_upper: float = 0.0
    tau0: float = 0.0
    tau1: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)


def hoeffding_delta(total: float, eps: float) -> float:
    return math.sqrt(total / 2.0 * math.log(1.0 / eps))


def finite_corrected_count(count, total, k, p_k, eps, direction="upper") -> float:
    """Decoy-weighted count ``e^k/p_k (count +/- sqrt(total/2 ln 1/eps))``."""
    if count > total:
        raise ValueError(f"count {count} exceeds total {total}")
    delta = hoeffding_delta(total, eps)
    if direction == "upper":
        return math.exp(k) / p_k * (count + delta)
    if direction == "lower":
        return max(0.0, math.exp(k) / p_k * (count - delta))
    raise ValueError(f"direction must be 'upper' or 'lower', got {direction!r}")


def tau_n(n: int, scheme: DecoyScheme) -> float:
    """Probability that the source emits exactly ``n`` photons, averaged over intensities."""
    return sum(p * math.exp(-k) * k**n / math.factorial(n) for k, p in zip(scheme.intensities, scheme.probabilities))


def _corrected(tallies, basis, scheme, params, which="n"):
    b = Basis(basis).value
    counts = tallies.n[b] if which == "n" else tallies.m[b]
    total = sum(counts)
    eps = params.eps_1 if which == "n" else params.eps_2
    out = []
    for c, k, p in zip(counts, scheme.intensities, scheme.probabilities):
        out.append((finite_corrected_count(c, total, k, p, eps, "lower"),
                    finite_corrected_count(c, total, k, p, eps, "upper")))
    return out


def vacuum_upper(tallies: TallyCounts, scheme: DecoyScheme, params: SecurityParams, d: int = 4,
                 basis: Basis | str = Basis.Z, k_index: int = 1) -> float:
    """Upper bound on vacuum detections from the errors seen at one intensity.

    A vacuum click is wrong with probability 1 - 1/d, hence the ``d/(d-1)`` prefactor.
    """
    b = Basis(basis).value
    if d not in (2, 4):
        raise ValueError(f"unsupported dimension {d}")
    k = scheme.intensities[k_index]
    p_k = scheme.probabilities[k_index]
    m_k = tallies.m[b][k_index]
    m_tot = sum(tallies.m[b])
    n_tot = sum(tallies.n[b])
    t0 = tau_n(0, scheme)
    bracket = (t0 * math.exp(k) / p_k * (m_k + hoeffding_delta(m_tot, params.eps_2))
               + hoeffding_delta(n_tot, params.eps_1))
    return d / (d - 1) * bracket


def vacuum_lower(tallies: TallyCounts, scheme: DecoyScheme, params: SecurityParams,
                 basis: Basis | str = Basis.Z) -> float:
    (n1_lo, n1_hi), (n2_lo, n2_hi) = _corrected(tallies, basis, scheme, params)
    mu1, mu2 = scheme.intensities
    val = tau_n(0, scheme) * (mu1 * n2_lo - mu2 * n1_hi) / (mu1 - mu2)
    return max(0.0, val)


def single_photon_lower(tallies: TallyCounts, scheme: DecoyScheme, params: SecurityParams,
                        vacuum_upper_value: float, basis: Basis | str = Basis.Z) -> float:
    mu1, mu2 = scheme.intensities
    if mu1 <= mu2:
        raise ValueError("single-photon bound needs mu1 > mu2")
    (n1_lo, n1_hi), (n2_lo, n2_hi) = _corrected(tallies, basis, scheme, params)
    t0, t1 = tau_n(0, scheme), tau_n(1, scheme)
    val = t1 * mu1 / (mu2 * (mu1 - mu2)) * (
        n2_lo - (mu2**2 / mu1**2) * n1_hi - (mu1**2 - mu2**2) / mu1**2 * vacuum_upper_value / t0)
    return max(0.0, val)


def single_photon_errors_upper(tallies: TallyCounts, scheme: DecoyScheme, params: SecurityParams,
                               basis: Basis | str = Basis.X) -> float:
    (m1_lo, m1_hi), (m2_lo, m2_hi) = _corrected(tallies, basis, scheme, params, which="m")
    mu1, mu2 = scheme.intensities
    return max(0.0, tau_n(1, scheme) * (m1_hi - m2_lo) / (mu1 - mu2))


def gamma_correction(a: float, b: float, c: float, d_: float, constant: float = GAMMA_CONSTANT) -> float:
    """Finite-sample penalty added to the single-photon phase-error estimate."""
    if not 0.0 <= b <= 1.0:
        raise ValueError(f"b must be a rate in [0, 1], got {b!r}")
    if c <= 0 or d_ <= 0 or a <= 0:
        raise ValueError("gamma_correction needs a, c, d_ > 0")
    if b in (0.0, 1.0):
        return 0.0
    s = c + d_
    # log of the argument taken term by term; the product overflows for tiny b
    log2_arg = (math.log2(s) - math.log2(c) - math.log2(d_) - math.log2(1.0 - b) - math.log2(b)
                + 2.0 * math.log2(constant / a))
    inner = s * (1.0 - b) * b / (c * d_ * LN2) * log2_arg
    return math.sqrt(max(0.0, inner))


def phase_error_upper(tallies: TallyCounts, scheme: DecoyScheme, params: SecurityParams,
                      D1_Z: float, D1_X: float, gamma_constant: float = GAMMA_CONSTANT) -> tuple[float, float]:
    """Upper bound on the key-basis phase-error rate. Returns ``(phi_Z, v_X1_upper)``."""
    if D1_Z <= 0 or D1_X <= 0:
        raise ValueError("phase-error bound needs positive single-photon counts in both bases")
    v1 = min(single_photon_errors_upper(tallies, scheme, params, Basis.X), D1_X)
    ratio = v1 / D1_X
    phi = ratio + gamma_correction(params.eps_sec, ratio, D1_X, D1_Z, gamma_constant)
    return min(1.0, max(0.0, phi)), v1


def lambda_ec(n_z: float, qber: float, d: int, f_ec: float = DEFAULT_F_EC) -> float:
    """Bits leaked during error correction."""
    if f_ec < 1:
        raise ValueError("f_ec must be >= 1")
    return n_z * f_ec * symbol_entropy(qber, d)


def _finite_key_constant(params: SecurityParams) -> float:
    return 6.0 * math.log2(19.0 / params.eps_sec) + math.log2(2.0 / params.eps_corr)


def key_length_2d(bounds: PhotonBounds, leak_ec: float, params: SecurityParams) -> float:
    phi = min(bounds.phi_Z_upper, 0.5)
    ell = (bounds.D0_lower + bounds.D1_lower * (1.0 - binary_entropy(phi))
           - leak_ec - _finite_key_constant(params))
    return max(0.0, ell)


def key_length_4d(bounds: PhotonBounds, leak_ec: float, params: SecurityParams) -> float:
    phi = min(bounds.phi_Z_upper, 0.75)
    ell = (2.0 * bounds.D0_lower + bounds.D1_lower * (2.0 - shannon_entropy_4d(phi))
           - leak_ec - _finite_key_constant(params))
    return max(0.0, ell)


def key_length(bounds: PhotonBounds, leak_ec: float, params: SecurityParams, d: int) -> float:
    if d == 2:
        return key_length_2d(bounds, leak_ec, params)
    if d == 4:
        return key_length_4d(bounds, leak_ec, params)
    raise ValueError(f"unsupported dimension {d}")


def estimate_bounds(tallies: TallyCounts, scheme: DecoyScheme, params: SecurityParams, d: int,
                    gamma_constant: float = GAMMA_CONSTANT) -> PhotonBounds:
    """Run the full one-decoy chain on a block of tallies."""
    b = PhotonBounds(tau0=tau_n(0, scheme), tau1=tau_n(1, scheme))
    b.D0_upper = vacuum_upper(tallies, scheme, params, d, Basis.Z)
    b.D0_lower = min(vacuum_lower(tallies, scheme, params, Basis.Z), b.D0_upper)
    b.D1_lower = single_photon_lower(tallies, scheme, params, b.D0_upper, Basis.Z)
    x_vac = vacuum_upper(tallies, scheme, params, d, Basis.X)
    b.D1_X_lower = single_photon_lower(tallies, scheme, params, x_vac, Basis.X)
    if b.D1_lower > 0 and b.D1_X_lower > 0:
        b.phi_Z_upper, b.v1_upper = phase_error_upper(tallies, scheme, params, b.D1_lower, b.D1_X_lower,
                                                      gamma_constant)
    else:
        b.phi_Z_upper = 1.0 - 1.0 / d
        b.v1_upper = b.D1_X_lower
    return b
