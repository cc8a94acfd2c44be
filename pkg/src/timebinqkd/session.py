"""Protocol orchestration: one privacy-amplification block from link model to secret key rate."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .channel import (
    STATE_RATE,
    DetectorModel,
    LinkModel,
    SourceModel,
    expected_rates_batch,
    expected_tallies,
    protocol_dimension,
    simulate_block,
)
from .defaults import CALIBRATED_NOISE, DETECTOR_EFFICIENCY, DETECTOR_EXTRA_LOSS_DB, NoiseParams
from .finitekey import (
    DEFAULT_F_EC,
    GAMMA_CONSTANT,
    DecoyScheme,
    PhotonBounds,
    SecurityParams,
    TallyCounts,
    estimate_bounds,
    key_length,
    lambda_ec,
)
from .reference import REFERENCE_POINTS

logger = logging.getLogger(__name__)


def protocol_name(protocol) -> str:
    return f"{protocol_dimension(protocol)}D"


def default_link(protocol, loss_db: float, noise: NoiseParams | None = None,
                 detector_extra_loss_db: float = DETECTOR_EXTRA_LOSS_DB) -> LinkModel:
    """Link with the experiment's fixed hardware values and the calibrated noise for ``protocol``."""
    name = protocol_name(protocol)
    noise = noise or CALIBRATED_NOISE[name]
    source = SourceModel(state_rate=STATE_RATE[protocol_dimension(name)],
                         intrinsic_error_Z=noise.intrinsic_error_Z, intrinsic_error_X=noise.intrinsic_error_X)
    detector = DetectorModel(efficiency=DETECTOR_EFFICIENCY, dark_count_rate=noise.dark_count_rate,
                             extra_loss_db=detector_extra_loss_db)
    return LinkModel(channel_loss_db=loss_db, source=source, detector=detector)


def _nearest_reference(name: str, loss_db: float):
    return min(REFERENCE_POINTS[name], key=lambda p: abs(p.loss_db - loss_db))


@dataclass(frozen=True)
class SessionConfig:
    """Everything needed to evaluate one block.

    ``decoy``, ``p_Z_alice`` and ``p_Z_bob`` override whatever the embedded
    ``link`` carries, so the link only needs to describe the hardware.
    """

    protocol: str = "4D"
    link: LinkModel = field(default_factory=LinkModel)
    decoy: DecoyScheme = field(default_factory=lambda: DecoyScheme(0.10, 0.05))
    security: SecurityParams = field(default_factory=SecurityParams)
    p_Z_alice: float = 0.9
    p_Z_bob: float = 0.7
    f_ec: float = DEFAULT_F_EC
    gamma_constant: float = GAMMA_CONSTANT
    monte_carlo: bool = False

    def __post_init__(self):
        object.__setattr__(self, "protocol", protocol_name(self.protocol))
        for name in ("p_Z_alice", "p_Z_bob"):
            if not 0.0 < getattr(self, name) < 1.0:
                raise ValueError(f"{name} must lie in (0, 1)")
        if self.f_ec < 1.0:
            raise ValueError("f_ec must be >= 1")
        self.link.source.check_dimension(self.d)

    @property
    def d(self) -> int:
        return protocol_dimension(self.protocol)

    @property
    def state_rate(self) -> float:
        return self.link.source.state_rate

    def resolved_link(self) -> LinkModel:
        source = replace(self.link.source, decoy=self.decoy, p_Z_alice=self.p_Z_alice)
        return replace(self.link, source=source, p_Z_bob=self.p_Z_bob)

    def replace(self, **changes) -> "SessionConfig":
        return replace(self, **changes)

    @classmethod
    def for_point(cls, protocol, loss_db: float, *, mu1=None, mu2=None, p_Z_alice=None, p_Z_bob=None,
                  noise: NoiseParams | None = None, link: LinkModel | None = None,
                  detector_extra_loss_db: float = DETECTOR_EXTRA_LOSS_DB, **kwargs) -> "SessionConfig":
        """Config at ``loss_db`` with the closest reference operating point filling unset values."""
        name = protocol_name(protocol)
        ref = _nearest_reference(name, loss_db)
        link = link.with_loss(loss_db) if link is not None else default_link(name, loss_db, noise, detector_extra_loss_db)
        decoy = DecoyScheme(ref.mu1 if mu1 is None else mu1, ref.mu2 if mu2 is None else mu2)
        return cls(protocol=name, link=link, decoy=decoy,
                   p_Z_alice=ref.p_Z_alice if p_Z_alice is None else p_Z_alice,
                   p_Z_bob=ref.p_Z_bob if p_Z_bob is None else p_Z_bob, **kwargs)


@dataclass
class KeyRateReport:
    protocol: str
    channel_loss_db: float
    mu1: float
    mu2: float
    p_Z_alice: float
    p_Z_bob: float
    qber_Z: float
    error_rate_X: float
    phi_Z_upper: float
    key_length_bits: float
    skr_bits_per_second: float
    secret_fraction: float
    duration_s: float
    state_rate: float
    method: str
    bounds: PhotonBounds
    tallies: TallyCounts

    def to_dict(self) -> dict:
        out = {k: v for k, v in asdict(self).items() if k not in ("bounds", "tallies")}
        out["bounds"] = self.bounds.to_dict()
        out["tallies"] = self.tallies.to_dict()
        return out

    def to_bytes(self) -> bytes:
        """Canonical serialisation; equal reports give equal bytes."""
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")).encode()

    @classmethod
    def from_dict(cls, data: dict) -> "KeyRateReport":
        data = dict(data)
        data["bounds"] = PhotonBounds(**data["bounds"])
        data["tallies"] = TallyCounts(**data["tallies"])
        return cls(**data)

    def row(self) -> dict:
        """The flat record written by the CLI reports."""
        return {
            "protocol": self.protocol,
            "loss_db": self.channel_loss_db,
            "mu1": self.mu1,
            "mu2": self.mu2,
            "pZ_alice": self.p_Z_alice,
            "pZ_bob": self.p_Z_bob,
            "qber": self.qber_Z,
            "phi_Z": self.phi_Z_upper,
            "skr_bps": self.skr_bits_per_second,
            "secret_fraction": self.secret_fraction,
        }


# -- sifting and error estimation ----------------------------------------------

@dataclass
class SiftedPairs:
    """Matched-basis conclusive events: basis (0=Z, 1=X), intensity index, both parties' symbols."""

    basis: np.ndarray
    intensity: np.ndarray
    alice_symbol: np.ndarray
    bob_outcome: np.ndarray

    def __len__(self):
        return int(self.basis.size)

    def tallies(self) -> TallyCounts:
        n = np.zeros((2, 2), dtype=np.int64)
        m = np.zeros((2, 2), dtype=np.int64)
        np.add.at(n, (self.basis, self.intensity), 1)
        wrong = self.alice_symbol != self.bob_outcome
        np.add.at(m, (self.basis[wrong], self.intensity[wrong]), 1)
        n, m = n.tolist(), m.tolist()
        return TallyCounts.from_arrays(n[0], m[0], n[1], m[1])


def sift(alice_records: dict, bob_records: dict) -> SiftedPairs:
    """Keep events where both bases agree and Bob's click was conclusive.

    ``alice_records`` holds ``basis``, ``symbol``, ``intensity``; ``bob_records``
    holds ``basis`` and ``outcome`` (-1 for inconclusive), all index-aligned.
    """
    a_basis = np.asarray(alice_records["basis"])
    b_basis = np.asarray(bob_records["basis"])
    outcome = np.asarray(bob_records["outcome"])
    if a_basis.shape != b_basis.shape or outcome.shape != b_basis.shape:
        raise ValueError("alice and bob records are not index-aligned")
    keep = (a_basis == b_basis) & (outcome >= 0)
    return SiftedPairs(
        basis=a_basis[keep].astype(np.int64),
        intensity=np.asarray(alice_records["intensity"])[keep].astype(np.int64),
        alice_symbol=np.asarray(alice_records["symbol"])[keep],
        bob_outcome=outcome[keep],
    )


@dataclass(frozen=True)
class ErrorRates:
    qber_Z: float
    error_rate_X: float
    per_intensity: dict
    # bases with no sifted events; their rates are NaN
    empty: tuple = ()


def estimate_error_rates(pairs: SiftedPairs | TallyCounts) -> ErrorRates:
    tallies = pairs.tallies() if isinstance(pairs, SiftedPairs) else pairs
    if tallies.n_total("Z") + tallies.n_total("X") == 0:
        raise ValueError("no sifted events to estimate error rates from")
    empty = tuple(b for b in "ZX" if tallies.n_total(b) == 0)
    rate = lambda m, n: m / n if n else math.nan
    per_k = {b: [rate(m, n) for m, n in zip(tallies.m[b], tallies.n[b])] for b in "ZX"}
    total = {b: rate(tallies.m_total(b), tallies.n_total(b)) for b in "ZX"}
    if empty:
        logger.warning("no sifted events in basis %s", ", ".join(empty))
    return ErrorRates(total["Z"], total["X"], per_k, empty)


def compute_skr(key_length_bits: float, duration_s: float, state_rate: float) -> tuple[float, float]:
    """Secret key rate in bit/s and the secret fraction (bits per prepared state)."""
    if duration_s <= 0:
        raise ValueError("duration must be positive")
    if state_rate <= 0:
        raise ValueError("state rate must be positive")
    skr = key_length_bits / duration_s
    return skr, skr / state_rate


# -- one block -----------------------------------------------------------------

def report_from_tallies(config: SessionConfig, tallies: TallyCounts, duration_s: float,
                        method: str = "analytic") -> KeyRateReport:
    d = config.d
    bounds = estimate_bounds(tallies, config.decoy, config.security, d, config.gamma_constant)
    qber = tallies.error_rate("Z")
    leak = lambda_ec(tallies.n_total("Z"), qber, d, config.f_ec)
    ell = key_length(bounds, leak, config.security, d)
    skr, frac = compute_skr(ell, duration_s, config.state_rate)
    return KeyRateReport(
        protocol=config.protocol, channel_loss_db=config.link.channel_loss_db,
        mu1=config.decoy.mu1, mu2=config.decoy.mu2, p_Z_alice=config.p_Z_alice, p_Z_bob=config.p_Z_bob,
        qber_Z=qber, error_rate_X=tallies.error_rate("X"), phi_Z_upper=bounds.phi_Z_upper,
        key_length_bits=ell, skr_bits_per_second=skr, secret_fraction=frac, duration_s=duration_s,
        state_rate=config.state_rate, method=method, bounds=bounds, tallies=tallies,
    )


def block_tallies(config: SessionConfig, seed=None, monte_carlo: bool | None = None, keep_records: bool = False):
    """``(tallies, duration, block)`` for one block; ``block`` is None on the analytic path."""
    mc = config.monte_carlo if monte_carlo is None else monte_carlo
    link = config.resolved_link()
    n_Z = config.security.block_size
    if mc:
        block = simulate_block(link, config.d, n_Z, rng_seed=seed, keep_records=keep_records)
        return block.tallies, block.wall_time_equivalent, block
    tallies, duration = expected_tallies(link, config.d, n_Z)
    return tallies, duration, None


def run_session(config: SessionConfig, seed=None, monte_carlo: bool | None = None) -> KeyRateReport:
    """Evaluate one block: tallies (expected or simulated), bounds, key length and SKR."""
    mc = config.monte_carlo if monte_carlo is None else monte_carlo
    tallies, duration, _ = block_tallies(config, seed, mc)
    return report_from_tallies(config, tallies, duration, "monte-carlo" if mc else "analytic")


# -- parameter optimisation ----------------------------------------------------

@dataclass(frozen=True)
class SearchSpace:
    mu1: tuple = tuple(round(0.01 * i, 2) for i in range(1, 51))
    mu2_min: float = 0.005
    mu2_step: float = 0.01
    p_Z_bob: tuple = (0.5, 0.7, 0.9)

    def pairs(self):
        """All (mu1, mu2) with mu2 in {mu2_min} + multiples of mu2_step, mu2 <= mu1 / 2."""
        out = []
        for m1 in self.mu1:
            cands = [self.mu2_min] + [round(self.mu2_step * j, 10) for j in range(1, int(m1 / 2 / self.mu2_step + 1e-9) + 1)]
            out.extend((m1, m2) for m2 in sorted(set(cands)) if 0 < m2 <= m1 / 2 + 1e-12)
        return out


@dataclass
class OptimizationResult:
    mu1: float
    mu2: float
    p_Z_bob: float
    skr: float
    report: KeyRateReport | None
    # columns mu1, mu2, p_Z_bob, skr
    surface: np.ndarray


def _tallies_from_rates(n, m, n_Z_target):
    duration = n_Z_target / n[0].sum()
    n = np.rint(n * duration).astype(int)
    m = np.minimum(np.rint(m * duration).astype(int), n).tolist()
    n = n.tolist()
    return TallyCounts.from_arrays(n[0], m[0], n[1], m[1]), duration


def optimize_parameters(config: SessionConfig, search_space: SearchSpace | None = None) -> OptimizationResult:
    """Grid search of (mu1, mu2, p_Z_bob) maximising the analytic SKR at the config's link.

    Decoy send probabilities stay as configured. Raises ValueError on an empty grid.
    """
    space = search_space or SearchSpace()
    pairs = space.pairs()
    if not pairs or not space.p_Z_bob:
        raise ValueError("empty search space")
    mu1, mu2 = np.array(pairs).T
    rows = []
    best = None
    for pzb in space.p_Z_bob:
        cfg = config.replace(p_Z_bob=pzb)
        n, m, _ = expected_rates_batch(cfg.resolved_link(), cfg.d, mu1, mu2)
        for i in range(len(pairs)):
            if n[i, 0].sum() <= 0:
                rows.append((mu1[i], mu2[i], pzb, 0.0))
                continue
            tallies, duration = _tallies_from_rates(n[i], m[i], cfg.security.block_size)
            point = cfg.replace(decoy=replace(cfg.decoy, mu1=float(mu1[i]), mu2=float(mu2[i])))
            rep = report_from_tallies(point, tallies, duration)
            rows.append((mu1[i], mu2[i], pzb, rep.skr_bits_per_second))
            if best is None or rep.skr_bits_per_second > best.skr_bits_per_second:
                best = rep
    surface = np.array(rows)
    if best is None:
        i = int(np.argmax(surface[:, 3]))
        return OptimizationResult(surface[i, 0], surface[i, 1], surface[i, 2], 0.0, None, surface)
    return OptimizationResult(best.mu1, best.mu2, best.p_Z_bob, best.skr_bits_per_second, best, surface)


def cutoff_loss(protocol, noise: NoiseParams | None = None, lo: float = 20.0, hi: float = 60.0, tol: float = 0.05,
                search_space: SearchSpace | None = None, **config_kwargs) -> float:
    """Largest channel loss (dB, to within ``tol``) at which the optimised SKR is still positive.

    Returns ``lo`` if there is no key at ``lo`` and ``hi`` if there is key at ``hi``.
    """
    def has_key(loss):
        cfg = SessionConfig.for_point(protocol, loss, noise=noise, **config_kwargs)
        return optimize_parameters(cfg, search_space).skr > 0

    if not has_key(lo):
        return lo
    if has_key(hi):
        return hi
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        lo, hi = (mid, hi) if has_key(mid) else (lo, mid)
    return lo
