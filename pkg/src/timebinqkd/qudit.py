"""Time-bin qubit/qudit states, the two measurement bases and the receiver interferometers.

Bin indices start at 0. A d-dimensional symbol occupies bins ``0..d-1``; an
unbalanced interferometer with delay ``delay`` (in units of the bin width)
spreads it over ``d + delay`` output bins.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from functools import lru_cache

import numpy as np

ATOL = 1e-12

SQRT_HALF = 1.0 / np.sqrt(2.0)


class Basis(str, Enum):
    Z = "Z"
    X = "X"


@dataclass(frozen=True)
class TimeBinState:
    """Amplitudes of a photon over ``d`` time bins plus its basis label."""

    amplitudes: np.ndarray
    basis: Basis
    index: int

    def __post_init__(self):
        amps = np.asarray(self.amplitudes, dtype=complex)
        if amps.ndim != 1 or amps.size not in (2, 4):
            raise ValueError(f"expected a 2- or 4-bin amplitude vector, got shape {amps.shape}")
        norm = float(np.vdot(amps, amps).real)
        if abs(norm - 1.0) > ATOL:
            raise ValueError(f"state is not normalised (|a|^2 = {norm!r})")
        object.__setattr__(self, "amplitudes", amps)

    @property
    def d(self) -> int:
        return self.amplitudes.size

    @property
    def label(self) -> str:
        return f"{self.basis.value.lower()}{self.index}"


@dataclass(frozen=True)
class InterferometerSpec:
    """Unbalanced Mach-Zehnder: long-arm delay in bins, long-arm phase, insertion loss in dB."""

    delay: int = 1
    phase: float = 0.0
    insertion_loss_db: float = 2.3

    def __post_init__(self):
        if self.delay not in (1, 2):
            raise ValueError(f"delay must be 1 or 2 bin widths, got {self.delay}")
        if self.insertion_loss_db < 0:
            raise ValueError("insertion loss must be non-negative")


def _check_probability(x: float) -> float:
    x = float(x)
    if not 0.0 <= x <= 1.0 or np.isnan(x):
        raise ValueError(f"probability outside [0, 1]: {x!r}")
    return x


def _xlog2(x: float) -> float:
    return 0.0 if x == 0.0 else x * np.log2(x)


def binary_entropy(x: float) -> float:
    """h(x) = -x log2 x - (1-x) log2(1-x), in bits."""
    x = _check_probability(x)
    return -_xlog2(x) - _xlog2(1.0 - x)


def shannon_entropy_4d(x: float) -> float:
    """Entropy of a 4-outcome symbol with error probability ``x`` spread evenly over the 3 wrong symbols."""
    x = _check_probability(x)
    # x log2(x/3) split up so subnormal x does not underflow to log2(0)
    return -_xlog2(x) + x * np.log2(3.0) - _xlog2(1.0 - x)


def symbol_entropy(x: float, d: int) -> float:
    if d == 2:
        return binary_entropy(x)
    if d == 4:
        return shannon_entropy_4d(x)
    raise ValueError(f"unsupported dimension {d}")


# Non-zero (bin, sign) pairs for every basis state. Z pairs consecutive bins in
# d=4; X pairs bins two apart.
_LAYOUT = {
    (2, Basis.Z): [((0, 1),), ((1, 1),)],
    (2, Basis.X): [((0, 1), (1, 1)), ((0, 1), (1, -1))],
    (4, Basis.Z): [((0, 1), (1, 1)), ((0, 1), (1, -1)), ((2, 1), (3, 1)), ((2, 1), (3, -1))],
    (4, Basis.X): [((0, 1), (2, 1)), ((0, 1), (2, -1)), ((1, 1), (3, 1)), ((1, 1), (3, -1))],
}


def state_vector(basis: Basis | str, index: int, d: int = 4) -> TimeBinState:
    basis = Basis(basis)
    try:
        layout = _LAYOUT[(d, basis)]
    except KeyError:
        raise ValueError(f"unsupported dimension {d}") from None
    if not 0 <= index < d:
        raise ValueError(f"index {index} out of range for d={d}")
    amps = np.zeros(d, dtype=complex)
    occupied = layout[index]
    scale = 1.0 if len(occupied) == 1 else SQRT_HALF
    for b, sign in occupied:
        amps[b] = sign * scale
    return TimeBinState(amps, basis, index)


def basis_states(basis: Basis | str, d: int) -> list[TimeBinState]:
    return [state_vector(basis, n, d) for n in range(d)]


def prepared_states(basis: Basis | str, d: int) -> list[TimeBinState]:
    """States Alice actually sends. The 2D X basis is sent only as the 0-phase superposition."""
    basis = Basis(basis)
    if d == 2 and basis is Basis.X:
        return [state_vector(basis, 0, d)]
    return basis_states(basis, d)


def overlap_probability(a: TimeBinState, b: TimeBinState) -> float:
    if a.d != b.d:
        raise ValueError(f"dimension mismatch: {a.d} vs {b.d}")
    return float(abs(np.vdot(a.amplitudes, b.amplitudes)) ** 2)


@dataclass
class MUBReport:
    d: int
    gram_z: np.ndarray
    gram_x: np.ndarray
    cross: np.ndarray = field(repr=False)
    ok: bool = False

    def __bool__(self):
        return self.ok


def _gram(states):
    m = np.array([s.amplitudes for s in states])
    return np.abs(m.conj() @ m.T) ** 2


def check_mub(z_states, x_states, atol: float = ATOL) -> MUBReport:
    d = z_states[0].d
    gz, gx = _gram(z_states), _gram(x_states)
    cross = np.array([[overlap_probability(z, x) for x in x_states] for z in z_states])
    eye = np.eye(d)
    ok = (np.allclose(gz, eye, rtol=0, atol=atol) and np.allclose(gx, eye, rtol=0, atol=atol)
          and np.allclose(cross, 1.0 / d, rtol=0, atol=atol))
    return MUBReport(d, gz, gx, cross, bool(ok))


def verify_mub_pair(d: int) -> MUBReport:
    return check_mub(basis_states(Basis.Z, d), basis_states(Basis.X, d))


# -- receiver --------------------------------------------------------------

def interferometer_response(state: TimeBinState, spec: InterferometerSpec) -> np.ndarray:
    """Detection probability per output port and bin, shape ``(2, d + delay)``.

    Row 0 is the ``+`` port, row 1 the ``-`` port. Insertion loss is not applied,
    so the array sums to one.
    """
    a = state.amplitudes
    n = a.size + spec.delay
    early = np.zeros(n, dtype=complex)
    late = np.zeros(n, dtype=complex)
    early[: a.size] = a
    late[spec.delay:] = a * np.exp(1j * spec.phase)
    plus = (early + late) / 2.0
    minus = (early - late) / 2.0
    return np.abs(np.vstack([plus, minus])) ** 2


DELAY = {Basis.Z: 1, Basis.X: 2}
INSERTION_LOSS_DB = {1: 2.3, 2: 2.5}


def receiver_interferometer(basis: Basis | str, d: int) -> InterferometerSpec | None:
    """Interferometer used to project on ``basis``; None for a plain time-of-arrival measurement."""
    basis = Basis(basis)
    if d == 2:
        if basis is Basis.Z:
            return None
        return InterferometerSpec(1, 0.0, INSERTION_LOSS_DB[1])
    delay = DELAY[basis]
    return InterferometerSpec(delay, 0.0, INSERTION_LOSS_DB[delay])


@lru_cache(maxsize=None)
def outcome_map(basis: Basis, d: int) -> dict[tuple[int, int], int]:
    """(port, bin) -> symbol for the conclusive events of a measurement.

    Built from the basis states themselves: each state lights exactly one
    (port, bin) cell with its interference peak.
    """
    spec = receiver_interferometer(basis, d)
    mapping = {}
    for s in basis_states(basis, d):
        if spec is None:
            probs = np.abs(s.amplitudes) ** 2
            cell = (0, int(np.argmax(probs)))
        else:
            resp = interferometer_response(s, spec)
            cell = tuple(int(i) for i in np.unravel_index(np.argmax(resp), resp.shape))
        if cell in mapping:
            raise RuntimeError(f"ambiguous outcome cell {cell} in basis {basis.value}, d={d}")
        mapping[cell] = s.index
    return mapping


@dataclass(frozen=True)
class OutcomeDistribution:
    """Per-symbol probabilities of a conclusive click plus the inconclusive mass."""

    conclusive: np.ndarray
    inconclusive: float

    @property
    def conclusive_total(self) -> float:
        return float(self.conclusive.sum())

    def conditional(self) -> np.ndarray:
        total = self.conclusive_total
        return self.conclusive / total if total > 0 else np.zeros_like(self.conclusive)


def measurement_outcome_distribution(state: TimeBinState, measured: Basis | str) -> OutcomeDistribution:
    measured = Basis(measured)
    d = state.d
    spec = receiver_interferometer(measured, d)
    if spec is None:
        probs = np.abs(state.amplitudes) ** 2
        return OutcomeDistribution(probs.copy(), 0.0)
    resp = interferometer_response(state, spec)
    out = np.zeros(d)
    for (port, b), symbol in outcome_map(measured, d).items():
        out[symbol] += resp[port, b]
    return OutcomeDistribution(out, float(resp.sum() - out.sum()))


def conclusive_windows(basis: Basis | str, d: int) -> list[int]:
    """Bins (within one symbol period of ``d`` bins) where a click is conclusive."""
    return sorted({b % d for (_, b) in outcome_map(Basis(basis), d)})
