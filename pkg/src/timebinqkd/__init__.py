"""Time-bin QKD simulation and finite-key secret key rates for the 2D three-state and 4D protocols."""
from .channel import (
    BlockResult,
    DetectorModel,
    LinkModel,
    SourceModel,
    dead_time_throttle,
    end_to_end_efficiency,
    expected_tallies,
    sample_photon_number,
    simulate_block,
)
from .finitekey import (
    DecoyScheme,
    PhotonBounds,
    SecurityParams,
    TallyCounts,
    estimate_bounds,
    finite_corrected_count,
    gamma_correction,
    key_length,
    key_length_2d,
    key_length_4d,
    lambda_ec,
    phase_error_upper,
    single_photon_lower,
    tau_n,
    vacuum_lower,
    vacuum_upper,
)
from .qudit import (
    Basis,
    InterferometerSpec,
    TimeBinState,
    binary_entropy,
    interferometer_response,
    measurement_outcome_distribution,
    overlap_probability,
    shannon_entropy_4d,
    state_vector,
    verify_mub_pair,
)
from .session import (
    KeyRateReport,
    SessionConfig,
    compute_skr,
    estimate_error_rates,
    optimize_parameters,
    run_session,
    sift,
)

__version__ = "0.1.0"
