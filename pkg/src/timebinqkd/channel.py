"""Statistical model of the fiber link: weak-coherent source with one decoy, fiber
and receiver losses, interferometric projection, and SPADs with dark counts and
dead time.

Two paths produce the same :class:`TallyCounts` for a block:

* :func:`expected_tallies` evaluates closed-form click probabilities;
* :func:`simulate_block` realises the experiment event by event.

Both are built on the same table of per-pulse click classes, so they agree in
expectation by construction of the physics and not by sharing the sampling code.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from functools import lru_cache

import numpy as np
from numba import njit
from scipy.stats import norm

from .finitekey import DecoyScheme, TallyCounts
from .qudit import (
    Basis,
    INSERTION_LOSS_DB,
    interferometer_response,
    outcome_map,
    prepared_states,
    receiver_interferometer,
)

logger = logging.getLogger(__name__)

BIN_DURATION = 840e-12
STATE_RATE = {2: 595e6, 4: 297.5e6}


def protocol_dimension(protocol) -> int:
    """Accept ``2``, ``4``, ``"2D"`` or ``"4D"``."""
    if isinstance(protocol, str):
        protocol = protocol.strip().upper().rstrip("D")
    d = int(protocol)
    if d not in (2, 4):
        raise ValueError(f"unknown protocol {protocol!r}; expected 2D or 4D")
    return d


def db_to_transmission(loss_db: float) -> float:
    return 10.0 ** (-loss_db / 10.0)


@dataclass(frozen=True)
class SourceModel:
    state_rate: float = STATE_RATE[4]
    bin_duration: float = BIN_DURATION
    p_Z_alice: float = 0.9
    decoy: DecoyScheme = field(default_factory=lambda: DecoyScheme(0.10, 0.05))
    intrinsic_error_Z: float = 0.0
    intrinsic_error_X: float = 0.0
    prbs: bool = False

    def __post_init__(self):
        if not 0.0 < self.p_Z_alice < 1.0:
            raise ValueError("p_Z_alice must lie in (0, 1)")
        for name in ("intrinsic_error_Z", "intrinsic_error_X"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")

    def check_dimension(self, d: int):
        # 1e-3 slack: 595 MHz x 2 x 840 ps = 0.9996
        if self.state_rate * d * self.bin_duration > 1.0 + 1e-3:
            raise ValueError(f"state rate {self.state_rate:g} Hz does not fit {d} bins of {self.bin_duration:g} s")


@dataclass(frozen=True)
class DetectorModel:
    efficiency: float = 0.20
    dark_count_rate: float = 0.0
    dead_time: float = 20e-6
    timing_jitter: float = 200e-12
    # coupling/timing-gate loss on top of the quantum efficiency
    extra_loss_db: float = 0.0
    n_detectors: int = 2

    def __post_init__(self):
        if not 0.0 < self.efficiency <= 1.0:
            raise ValueError("detector efficiency must lie in (0, 1]")
        if self.dead_time <= 0:
            raise ValueError("dead time must be positive")
        if self.dark_count_rate < 0 or self.extra_loss_db < 0:
            raise ValueError("dark count rate and extra loss must be non-negative")

    @property
    def transmission(self) -> float:
        return self.efficiency * db_to_transmission(self.extra_loss_db)


@dataclass(frozen=True)
class LinkModel:
    channel_loss_db: float = 5.1
    p_Z_bob: float = 0.7
    source: SourceModel = field(default_factory=SourceModel)
    detector: DetectorModel = field(default_factory=DetectorModel)
    # insertion loss of the tau- and 2tau-delay interferometers
    interferometer_loss_db: tuple[float, float] = (INSERTION_LOSS_DB[1], INSERTION_LOSS_DB[2])

    def __post_init__(self):
        object.__setattr__(self, "interferometer_loss_db", tuple(float(v) for v in self.interferometer_loss_db))
        if self.channel_loss_db < 0 or min(self.interferometer_loss_db) < 0:
            raise ValueError("losses must be non-negative")
        if not 0.0 < self.p_Z_bob < 1.0:
            raise ValueError("p_Z_bob must lie in (0, 1)")

    def with_loss(self, loss_db: float) -> "LinkModel":
        return replace(self, channel_loss_db=loss_db)


@dataclass
class BlockResult:
    tallies: TallyCounts
    wall_time_equivalent: float
    raw_click_rate: dict
    pulses_sent: int = 0
    # true Z/X detections from 0- and 1-photon pulses (Monte Carlo only)
    photon_tags: dict | None = None
    records: "EventRecords | None" = None


# -- elementary physics ------------------------------------------------------

def sample_photon_number(mu: float, rng=None, size=None):
    if mu < 0:
        raise ValueError("mean photon number must be non-negative")
    rng = np.random.default_rng(rng)
    return rng.poisson(mu, size=size)


def dead_time_throttle(raw_rate, dead_time: float):
    """Registered rate of a non-paralysable detector fed at ``raw_rate``."""
    raw_rate = np.asarray(raw_rate, dtype=float)
    if np.any(raw_rate < 0):
        raise ValueError("raw rate must be non-negative")
    out = raw_rate / (1.0 + raw_rate * dead_time)
    return float(out) if out.ndim == 0 else out


def jitter_error(timing_jitter: float, bin_duration: float) -> float:
    """Chance that a Gaussian timing jitter (given as FWHM) pushes a click into the neighbouring bin."""
    if timing_jitter <= 0:
        return 0.0
    sigma = timing_jitter / (2.0 * math.sqrt(2.0 * math.log(2.0)))
    return float(2.0 * norm.sf(bin_duration / 2.0 / sigma))


def arm_transmission(link: LinkModel, basis: Basis | str, d: int) -> float:
    """Channel -> detector transmission of one receiver arm, before the conclusive-event cut."""
    basis = Basis(basis)
    t = db_to_transmission(link.channel_loss_db) * link.detector.transmission
    spec = receiver_interferometer(basis, d)
    if spec is not None:
        t *= db_to_transmission(link.interferometer_loss_db[spec.delay - 1])
    return t


def end_to_end_efficiency(link: LinkModel, basis: Basis | str, protocol=4) -> float:
    """Probability that a photon entering the fiber yields a conclusive click in ``basis``.

    Interferometric projections keep only the interference bin, half of the clicks.
    The 2D key basis is a plain time-of-arrival measurement.
    """
    d = protocol_dimension(protocol)
    t = arm_transmission(link, basis, d)
    if receiver_interferometer(Basis(basis), d) is not None:
        t *= 0.5
    return t


# -- click-class table ---------------------------------------------------------

@dataclass(frozen=True)
class ReceiverLayout:
    d: int
    detectors: tuple[str, ...]
    # 2D routes photons passively (per photon); 4D switches the whole pulse.
    per_photon_routing: bool

    def detector_for(self, bob_basis: Basis, port: int) -> int:
        if self.d == 2:
            return 0 if bob_basis is Basis.Z else 1
        return port


def receiver_layout(d: int) -> ReceiverLayout:
    if d == 2:
        return ReceiverLayout(2, ("Z", "X"), True)
    return ReceiverLayout(4, ("+", "-"), False)


@dataclass(frozen=True)
class ClassTable:
    """Every (alice basis, symbol, intensity, bob basis, detector, outcome) click class.

    ``prob`` is the per-pulse probability of that click before dead time.
    ``symbol`` is the conclusive outcome or -1, ``bin_offset`` the click time within
    the pulse in units of the bin width.
    """

    alice_basis: np.ndarray
    alice_symbol: np.ndarray
    intensity: np.ndarray
    bob_basis: np.ndarray
    detector: np.ndarray
    outcome: np.ndarray
    bin_offset: np.ndarray
    prob: np.ndarray
    # per-(alice basis, symbol, intensity, bob basis) photon-level data for tagging
    arm_mean: np.ndarray
    arm_route: np.ndarray

    def __len__(self):
        return self.prob.size


def _basis_code(b: Basis) -> int:
    return 0 if b is Basis.Z else 1


def _cells(state, bob_basis: Basis, d: int, error: float, matched: bool):
    """(port, bin, outcome, probability) for one prepared state, given a click."""
    spec = receiver_interferometer(bob_basis, d)
    if spec is None:
        resp = np.zeros((2, d))
        resp[0] = np.abs(state.amplitudes) ** 2
    else:
        resp = interferometer_response(state, spec)
    mapping = outcome_map(bob_basis, d)
    cells = []
    conclusive_mass = sum(resp[c] for c in mapping)
    for port in range(resp.shape[0]):
        for b in range(resp.shape[1]):
            p = resp[port, b]
            sym = mapping.get((port, b), -1)
            if sym >= 0 and matched:
                # intrinsic symbol error spread evenly over the wrong symbols
                p = conclusive_mass * ((1.0 - error) if sym == state.index else error / (d - 1))
            if p > 1e-15:
                cells.append((port, b, sym, p))
    return cells


def _bob_bases(link: LinkModel):
    return ((Basis.Z, link.p_Z_bob), (Basis.X, 1.0 - link.p_Z_bob))


def _alice_classes(src: SourceModel, d: int):
    """(basis, state, intensity index, probability per pulse)."""
    out = []
    for a_basis, pa in ((Basis.Z, src.p_Z_alice), (Basis.X, 1.0 - src.p_Z_alice)):
        states = prepared_states(a_basis, d)
        for s in states:
            for k, pk in enumerate(src.decoy.probabilities):
                out.append((a_basis, s, k, pa * pk / len(states)))
    return out


def effective_errors(link: LinkModel) -> tuple[float, float]:
    src, det = link.source, link.detector
    ej = jitter_error(det.timing_jitter, src.bin_duration)
    combine = lambda e: 1.0 - (1.0 - e) * (1.0 - ej)
    return combine(src.intrinsic_error_Z), combine(src.intrinsic_error_X)


@lru_cache(maxsize=256)
def class_table(link: LinkModel, d: int) -> ClassTable:
    src = link.source
    layout = receiver_layout(d)
    err = dict(zip((Basis.Z, Basis.X), effective_errors(link)))
    rows = []
    arm = []
    for a_basis, state, k, pa in _alice_classes(src, d):
        mu = src.decoy.intensities[k]
        for b_basis, pb in _bob_bases(link):
            eta = arm_transmission(link, b_basis, d)
            if layout.per_photon_routing:
                p_click, arm_row = -math.expm1(-mu * pb * eta), (mu, pb * eta, 1.0)
            else:
                p_click, arm_row = pb * -math.expm1(-mu * eta), (mu, eta, pb)
            for port, b, sym, p in _cells(state, b_basis, d, err[b_basis], a_basis is b_basis):
                arm.append(arm_row)
                rows.append((_basis_code(a_basis), state.index, k, _basis_code(b_basis),
                             layout.detector_for(b_basis, port), sym, b, pa * p_click * p))
    cols = list(zip(*rows))
    arm = np.array(arm)
    return ClassTable(
        alice_basis=np.array(cols[0], dtype=np.int8),
        alice_symbol=np.array(cols[1], dtype=np.int8),
        intensity=np.array(cols[2], dtype=np.int8),
        bob_basis=np.array(cols[3], dtype=np.int8),
        detector=np.array(cols[4], dtype=np.int8),
        outcome=np.array(cols[5], dtype=np.int8),
        bin_offset=np.array(cols[6], dtype=np.int16),
        prob=np.array(cols[7], dtype=float),
        arm_mean=arm[:, 0:2],
        arm_route=arm[:, 2],
    )


def _dark_conclusive(layout: ReceiverLayout, det: int, bob_basis: Basis) -> float:
    """Fraction of a detector's dark clicks that land in a conclusive window for ``bob_basis``."""
    d = layout.d
    windows = {b % d for (_, b) in outcome_map(bob_basis, d)}
    return len(windows) / d


def _dark_basis_weights(layout: ReceiverLayout, link: LinkModel, det: int):
    """Probability that a dark click on ``det`` is read in each Bob basis."""
    if layout.d == 2:
        return {Basis.Z: 1.0, Basis.X: 0.0} if det == 0 else {Basis.Z: 0.0, Basis.X: 1.0}
    return dict(_bob_bases(link))


# -- analytic path -------------------------------------------------------------

@dataclass
class ExpectedRates:
    """Per-second rates after dead time; ``n``/``m`` indexed [basis][intensity]."""

    n: np.ndarray
    m: np.ndarray
    raw_rate: np.ndarray
    registered_rate: np.ndarray
    state_rate: float


@dataclass(frozen=True)
class _RateKernel:
    """Click classes with the intensity dependence factored out.

    Row ``r`` contributes ``weight[r] * p_k * route[r] * (1 - exp(-mu_k * scale[r]))``
    per pulse, where ``k = intensity[r]``.
    """

    intensity: np.ndarray
    detector: np.ndarray
    weight: np.ndarray
    scale: np.ndarray
    route: np.ndarray
    # rows -> n[basis, k] and m[basis, k], flattened as 2 * basis + k
    n_map: np.ndarray
    m_map: np.ndarray


def _canonical(link: LinkModel) -> LinkModel:
    d = link.source.decoy
    return replace(link, source=replace(link.source, decoy=DecoyScheme(1.0, 0.5, d.p_mu1, d.p_mu2)))


@lru_cache(maxsize=256)
def _rate_kernel(link: LinkModel, d: int) -> _RateKernel:
    layout = receiver_layout(d)
    err = dict(zip((Basis.Z, Basis.X), effective_errors(link)))
    rows = []
    for a_basis, state, k, pa in _alice_classes(link.source, d):
        pa /= link.source.decoy.probabilities[k]
        for b_basis, pb in _bob_bases(link):
            eta = arm_transmission(link, b_basis, d)
            scale, route = (pb * eta, 1.0) if layout.per_photon_routing else (eta, pb)
            for port, _, sym, p in _cells(state, b_basis, d, err[b_basis], a_basis is b_basis):
                sifted = sym >= 0 and a_basis is b_basis
                rows.append((k, layout.detector_for(b_basis, port), pa * p, scale, route,
                             sifted, sifted and sym != state.index, _basis_code(b_basis)))
    cols = list(zip(*rows))
    n_rows = len(rows)
    n_map = np.zeros((n_rows, 4))
    m_map = np.zeros((n_rows, 4))
    for r, (k, _, _, _, _, sifted, wrong, b) in enumerate(rows):
        n_map[r, 2 * b + k] = sifted
        m_map[r, 2 * b + k] = wrong
    return _RateKernel(np.array(cols[0]), np.array(cols[1]), np.array(cols[2]), np.array(cols[3]),
                       np.array(cols[4]), n_map, m_map)


def expected_rates_batch(link: LinkModel, protocol, mu1, mu2):
    """Vectorised :func:`expected_rates` over intensity pairs.

    ``mu1``/``mu2`` broadcast to a common 1-D shape ``(G,)``. Returns ``(n, m, raw)``
    with shapes ``(G, 2, 2)``, ``(G, 2, 2)`` and ``(G, n_detectors)`` in counts per second.
    """
    d = protocol_dimension(protocol)
    src, det = link.source, link.detector
    src.check_dimension(d)
    mu1, mu2 = np.broadcast_arrays(np.atleast_1d(np.asarray(mu1, float)), np.atleast_1d(np.asarray(mu2, float)))
    R = src.state_rate
    layout = receiver_layout(d)
    ker = _rate_kernel(_canonical(link), d)
    p_k = np.array(src.decoy.probabilities)
    mu = np.stack([mu1, mu2], axis=1)  # (G, 2)
    mu_row = mu[:, ker.intensity]  # (G, rows)
    prob = (ker.weight * p_k[ker.intensity] * ker.route) * -np.expm1(-mu_row * ker.scale)

    n_det = len(layout.detectors)
    det_map = np.zeros((ker.detector.size, n_det))
    det_map[np.arange(ker.detector.size), ker.detector] = 1.0
    raw = prob @ det_map * R + det.dark_count_rate
    throttle = 1.0 / (1.0 + raw * det.dead_time)
    rate = prob * R * throttle[:, ker.detector]
    n = (rate @ ker.n_map).reshape(-1, 2, 2)
    m = (rate @ ker.m_map).reshape(-1, 2, 2)

    p_alice = (src.p_Z_alice, 1.0 - src.p_Z_alice)
    for j in range(n_det):
        for b_basis, w in _dark_basis_weights(layout, link, j).items():
            if w == 0:
                continue
            bi = _basis_code(b_basis)
            conclusive = det.dark_count_rate * throttle[:, j] * w * _dark_conclusive(layout, j, b_basis)
            for k, pk in enumerate(p_k):
                dark = conclusive * p_alice[bi] * pk
                n[:, bi, k] += dark
                m[:, bi, k] += dark * (1.0 - 1.0 / d)
    return n, m, raw


def expected_rates(link: LinkModel, protocol) -> ExpectedRates:
    d = protocol_dimension(protocol)
    decoy = link.source.decoy
    n, m, raw = expected_rates_batch(link, d, decoy.mu1, decoy.mu2)
    throttle = 1.0 / (1.0 + raw[0] * link.detector.dead_time)
    return ExpectedRates(n[0], m[0], raw[0], raw[0] * throttle, link.source.state_rate)


def expected_tallies(link: LinkModel, protocol, n_Z_target: int = 10**7, rounded: bool = True):
    """Expected block tallies scaled so that Z-basis detections equal ``n_Z_target``.

    Returns ``(TallyCounts, duration_seconds)``.
    """
    if n_Z_target < 1:
        raise ValueError("n_Z_target must be >= 1")
    rates = expected_rates(link, protocol)
    z_rate = rates.n[0].sum()
    if z_rate <= 0:
        raise ValueError("link produces no key-basis detections")
    duration = n_Z_target / z_rate
    n = rates.n * duration
    m = rates.m * duration
    if rounded:
        n = np.rint(n).astype(int)
        m = np.minimum(np.rint(m).astype(int), n)
        n, m = n.tolist(), m.tolist()
    else:
        n, m = n.tolist(), m.tolist()
    return TallyCounts.from_arrays(n[0], m[0], n[1], m[1]), duration


# -- Monte Carlo path ------------------------------------------------------------

PRBS_LENGTH = 2**12 - 1


@lru_cache(maxsize=4)
def prbs12(seed: int = 0xFFF) -> np.ndarray:
    """Maximal-length 12-bit LFSR sequence (taps 12, 11, 10, 4)."""
    state = seed & 0xFFF or 1
    out = np.empty(PRBS_LENGTH, dtype=np.int8)
    for i in range(PRBS_LENGTH):
        bit = ((state >> 11) ^ (state >> 10) ^ (state >> 9) ^ (state >> 3)) & 1
        out[i] = state & 1
        state = ((state << 1) | bit) & 0xFFF
    return out


@njit(cache=True)
def _apply_dead_time(times, detector, dead_time, last_click):
    keep = np.zeros(times.size, dtype=np.bool_)
    for i in range(times.size):
        j = detector[i]
        if times[i] - last_click[j] >= dead_time:
            keep[i] = True
            last_click[j] = times[i]
    return keep


@dataclass
class EventRecords:
    """Registered clicks in time order, split into the two parties' views."""

    time: np.ndarray
    detector: np.ndarray
    alice_basis: np.ndarray
    alice_symbol: np.ndarray
    intensity: np.ndarray
    bob_basis: np.ndarray
    outcome: np.ndarray
    photons: np.ndarray

    FIELDS = ("time", "detector", "alice_basis", "alice_symbol", "intensity", "bob_basis", "outcome", "photons")

    @classmethod
    def empty(cls):
        return cls(np.empty(0), *(np.empty(0, dtype=np.int8) for _ in range(7)))

    def __len__(self):
        return self.time.size

    def take(self, idx) -> "EventRecords":
        return EventRecords(*(getattr(self, f)[idx] for f in self.FIELDS))

    @classmethod
    def concat(cls, parts) -> "EventRecords":
        parts = list(parts)
        if not parts:
            return cls.empty()
        return cls(*(np.concatenate([getattr(p, f) for p in parts]) for f in cls.FIELDS))

    def alice_view(self) -> dict:
        return {"basis": self.alice_basis, "symbol": self.alice_symbol, "intensity": self.intensity}

    def bob_view(self) -> dict:
        return {"basis": self.bob_basis, "outcome": self.outcome}


def tally_records(rec: EventRecords) -> TallyCounts:
    sifted = (rec.alice_basis == rec.bob_basis) & (rec.outcome >= 0)
    err = sifted & (rec.outcome != rec.alice_symbol)
    n = np.zeros((2, 2), dtype=np.int64)
    m = np.zeros((2, 2), dtype=np.int64)
    np.add.at(n, (rec.bob_basis[sifted], rec.intensity[sifted]), 1)
    np.add.at(m, (rec.bob_basis[err], rec.intensity[err]), 1)
    n, m = n.tolist(), m.tolist()
    return TallyCounts.from_arrays(n[0], m[0], n[1], m[1])


def _photon_cdf(mu, eta, n_max: int = 24) -> np.ndarray:
    """CDF over n = 1..n_max of P(n photons | click) for Poisson(mu) and per-photon efficiency eta."""
    n = np.arange(1, n_max + 1)
    log_pn = -mu[:, None] + n[None, :] * np.log(np.maximum(mu[:, None], 1e-300)) - np.cumsum(np.log(n))[None, :]
    w = np.exp(log_pn) * -np.expm1(n[None, :] * np.log1p(-np.minimum(eta[:, None], 1 - 1e-15)))
    cdf = np.cumsum(w, axis=1)
    cdf /= cdf[:, -1:]
    # columns that are 1 everywhere never change a draw
    width = max(1, int((cdf < 1.0).any(axis=0).sum()) + 1)
    return cdf[:, :width]


class _BlockSampler:
    def __init__(self, link: LinkModel, d: int, rng: np.random.Generator):
        self.link, self.d, self.rng = link, d, rng
        self.src, self.det = link.source, link.detector
        self.tab = class_table(link, d)
        self.layout = receiver_layout(d)
        self.R = self.src.state_rate
        self.tau = self.src.bin_duration
        self.p_k = np.array(self.src.decoy.probabilities)
        self.mu = np.array(self.src.decoy.intensities)
        self.prbs = prbs12() if self.src.prbs else None
        # per-intensity click tables: a pulse's intensity is fixed first
        self.q_k = np.array([self.tab.prob[self.tab.intensity == k].sum() / self.p_k[k] for k in range(2)])
        self.q_max = float(self.q_k.max())
        self.cond = []
        for k in range(2):
            idx = np.flatnonzero(self.tab.intensity == k)
            self.cond.append((idx, self.tab.prob[idx] / self.tab.prob[idx].sum()))
        self.windows = {b: np.array(sorted({c[1] % d for c in outcome_map(b, d)})) for b in (Basis.Z, Basis.X)}
        self.window_symbol = {b: {(port, c[1] % d): s for c, s in outcome_map(b, d).items() for port in [c[0]]}
                              for b in (Basis.Z, Basis.X)}
        self.last_click = np.full(len(self.layout.detectors), -np.inf)
        self.photon_cdf = _photon_cdf(self.tab.arm_mean[:, 0], self.tab.arm_mean[:, 1])
        self.dark_eta = self._dark_eta()

    def _dark_eta(self) -> float:
        """Per-photon click probability of the whole receiver (for tagging dark clicks)."""
        eta = {b: arm_transmission(self.link, b, self.d) for b in (Basis.Z, Basis.X)}
        return sum(w * eta[b] for b, w in _bob_bases(self.link))

    def intensity_of(self, pulse: np.ndarray) -> np.ndarray:
        if self.prbs is not None:
            return self.prbs[pulse % PRBS_LENGTH].astype(np.int8)
        return (self.rng.random(pulse.size) >= self.p_k[0]).astype(np.int8)

    def _signal(self, start: int, n_pulses: int):
        rng = self.rng
        if self.q_max <= 0:
            return None
        n_cand = rng.binomial(n_pulses, self.q_max)
        pulse = start + np.sort(rng.choice(n_pulses, size=n_cand, replace=False)) if n_cand < n_pulses // 8 \
            else start + np.flatnonzero(rng.random(n_pulses) < self.q_max)
        k = self.intensity_of(pulse)
        # thinning from the largest per-intensity click probability
        keep = rng.random(pulse.size) < self.q_k[k] / self.q_max
        pulse, k = pulse[keep], k[keep]
        cls = np.empty(pulse.size, dtype=np.int64)
        for kk in range(2):
            sel = k == kk
            idx, p = self.cond[kk]
            cls[sel] = rng.choice(idx, size=int(sel.sum()), p=p)
        t = self.tab
        photons = self._tag_photons(cls)
        return dict(
            time=pulse / self.R + t.bin_offset[cls] * self.tau,
            detector=t.detector[cls], alice_basis=t.alice_basis[cls], alice_symbol=t.alice_symbol[cls],
            intensity=t.intensity[cls], bob_basis=t.bob_basis[cls], outcome=t.outcome[cls], photons=photons,
        )

    def _tag_photons(self, cls):
        """Photon number of each clicking pulse, drawn from P(n | click)."""
        u = self.rng.random(cls.size)
        return ((self.photon_cdf[cls] < u[:, None]).sum(axis=1) + 1).astype(np.int8)

    def _dark(self, start: int, n_pulses: int):
        rng, layout, d = self.rng, self.layout, self.d
        rate = self.det.dark_count_rate
        if rate <= 0:
            return None
        t0, span = start / self.R, n_pulses / self.R
        parts = []
        for j in range(len(layout.detectors)):
            cnt = rng.poisson(rate * span)
            times = np.sort(t0 + rng.random(cnt) * span)
            pulse = np.minimum((times * self.R).astype(np.int64), start + n_pulses - 1)
            frac = times * self.R - pulse
            bin_ = np.minimum((frac * d).astype(np.int64), d - 1)
            weights = _dark_basis_weights(layout, self.link, j)
            bob = np.where(rng.random(cnt) < weights[Basis.Z], 0, 1).astype(np.int8)
            if layout.d == 2 and j == 1:
                port = rng.integers(0, 2, cnt)
            elif layout.d == 2:
                port = np.zeros(cnt, dtype=np.int64)
            else:
                port = np.full(cnt, j)
            outcome = np.full(cnt, -1, dtype=np.int8)
            for bi, b in enumerate((Basis.Z, Basis.X)):
                lut = self.window_symbol[b]
                sel = np.flatnonzero(bob == bi)
                for i in sel:
                    outcome[i] = lut.get((int(port[i]), int(bin_[i])), -1)
            a_basis = (rng.random(cnt) >= self.src.p_Z_alice).astype(np.int8)
            n_states = np.where(a_basis == 0, d, 1 if d == 2 else d)
            symbol = (rng.random(cnt) * n_states).astype(np.int8)
            k = self.intensity_of(pulse)
            # photon number of the coincident pulse, given it produced no signal click
            photons = rng.poisson(self.mu[k] * (1.0 - self.dark_eta)).astype(np.int8)
            parts.append(dict(time=times, detector=np.full(cnt, j, dtype=np.int8), alice_basis=a_basis,
                              alice_symbol=symbol, intensity=k, bob_basis=bob, outcome=outcome, photons=photons))
        return parts

    def chunk(self, start: int, n_pulses: int) -> EventRecords:
        parts = []
        sig = self._signal(start, n_pulses)
        if sig is not None:
            parts.append(sig)
        dark = self._dark(start, n_pulses)
        if dark:
            parts.extend(dark)
        if not parts:
            return EventRecords.empty()
        rec = EventRecords(*(np.concatenate([np.asarray(p[f]) for p in parts]).astype(
            np.float64 if f == "time" else np.int8) for f in EventRecords.FIELDS))
        order = np.argsort(rec.time, kind="stable")
        rec = rec.take(order)
        keep = _apply_dead_time(rec.time, rec.detector.astype(np.int64), self.det.dead_time, self.last_click)
        return rec.take(keep)


def simulate_block(link: LinkModel, protocol, n_Z_target: int, rng_seed=None,
                   keep_records: bool = False, chunk_events: int = 200_000) -> BlockResult:
    """Monte Carlo realisation of one block, stopped at the ``n_Z_target``-th sifted key-basis click."""
    if n_Z_target < 1:
        raise ValueError("n_Z_target must be >= 1")
    d = protocol_dimension(protocol)
    link.source.check_dimension(d)
    rng = np.random.default_rng(rng_seed)
    sampler = _BlockSampler(link, d, rng)
    rates = expected_rates(link, d)
    z_rate = rates.n[0].sum()
    if z_rate <= 0:
        raise ValueError("link produces no key-basis detections")
    raw_total = rates.raw_rate.sum()
    # size chunks by the expected number of raw clicks, and no larger than the block needs
    needed = 1.05 * n_Z_target / z_rate * raw_total + 100
    events = min(chunk_events, needed)
    n_pulses = int(max(1000, min(events / max(raw_total / sampler.R, 1e-300), 2**40)))

    parts, n_z, start = [], 0, 0
    tallies = TallyCounts()
    clicks = np.zeros(len(sampler.layout.detectors), dtype=np.int64)
    tags = {b: {"vacuum": 0, "single": 0} for b in "ZX"}
    last_time = 0.0
    while n_z < n_Z_target:
        rec = sampler.chunk(start, n_pulses)
        start += n_pulses
        zmask = (rec.alice_basis == 0) & (rec.bob_basis == 0) & (rec.outcome >= 0)
        cum = n_z + np.cumsum(zmask)
        if cum.size and cum[-1] >= n_Z_target:
            rec = rec.take(slice(0, int(np.searchsorted(cum, n_Z_target)) + 1))
            n_z = n_Z_target
        elif cum.size:
            n_z = int(cum[-1])
        if not len(rec):
            continue
        tallies = tallies + tally_records(rec)
        clicks += np.bincount(rec.detector.astype(np.int64), minlength=clicks.size)
        sifted = (rec.alice_basis == rec.bob_basis) & (rec.outcome >= 0)
        for bi, b in enumerate("ZX"):
            sel = sifted & (rec.bob_basis == bi)
            tags[b]["vacuum"] += int((sel & (rec.photons == 0)).sum())
            tags[b]["single"] += int((sel & (rec.photons == 1)).sum())
        last_time = float(rec.time[-1])
        if keep_records:
            parts.append(rec)

    duration = last_time if last_time > 0 else start / sampler.R
    rate = {name: float(c) / duration for name, c in zip(sampler.layout.detectors, clicks)}
    records = EventRecords.concat(parts) if keep_records else None
    return BlockResult(tallies, duration, rate, int(math.ceil(duration * sampler.R)), tags, records)
