import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from timebinqkd.channel import (
    DetectorModel,
    LinkModel,
    PRBS_LENGTH,
    SourceModel,
    dead_time_throttle,
    end_to_end_efficiency,
    expected_rates,
    expected_tallies,
    jitter_error,
    prbs12,
    protocol_dimension,
    sample_photon_number,
    simulate_block,
)
from timebinqkd.finitekey import DecoyScheme
from timebinqkd.session import SessionConfig


def quiet_link(loss_db=5.1, d=4, **det):
    det.setdefault("timing_jitter", 0.0)
    src = SourceModel(state_rate=595e6 if d == 2 else 297.5e6)
    return LinkModel(channel_loss_db=loss_db, source=src, detector=DetectorModel(**det))


# -- elementary physics ----------------------------------------------------------

def test_throttle_examples():
    assert dead_time_throttle(0.0, 20e-6) == 0
    assert dead_time_throttle(50e3, 20e-6) == pytest.approx(25e3, rel=1e-12)
    assert dead_time_throttle(1e15, 20e-6) == pytest.approx(50e3, rel=1e-3)
    with pytest.raises(ValueError):
        dead_time_throttle(-1.0, 20e-6)


@settings(max_examples=200, deadline=None)
@given(st.floats(0, 1e12), st.floats(0, 1e12))
def test_throttle_monotone_and_bounded(a, b):
    lo, hi = sorted((a, b))
    assert dead_time_throttle(lo, 20e-6) <= dead_time_throttle(hi, 20e-6) <= 50e3 * (1 + 1e-12)
    assert dead_time_throttle(hi, 20e-6) <= hi + 1e-9


def test_sample_photon_number():
    assert np.all(sample_photon_number(0.0, 1, 1000) == 0)
    x = sample_photon_number(0.10, np.random.default_rng(7), 10**6)
    assert abs(x.mean() - 0.10) < 3 * math.sqrt(0.10 / 10**6)
    with pytest.raises(ValueError):
        sample_photon_number(-0.1)


def test_end_to_end_efficiency():
    ideal = LinkModel(channel_loss_db=0.0, detector=DetectorModel(efficiency=1.0), interferometer_loss_db=(0, 0))
    assert end_to_end_efficiency(ideal, "Z", 4) == pytest.approx(0.5, abs=1e-15)
    link = quiet_link(5.1, 4, efficiency=0.2, extra_loss_db=2.0)
    expected = 0.5 * 10 ** (-(5.1 + 2.3) / 10) * 0.2 * 10 ** (-0.2)
    assert end_to_end_efficiency(link, "Z", 4) == pytest.approx(expected, rel=1e-12)
    expected_x = 0.5 * 10 ** (-(5.1 + 2.5) / 10) * 0.2 * 10 ** (-0.2)
    assert end_to_end_efficiency(link, "X", 4) == pytest.approx(expected_x, rel=1e-12)
    # 2D key basis is time-of-arrival: no interferometer, no conclusive cut
    assert end_to_end_efficiency(link, "Z", 2) == pytest.approx(10 ** (-5.1 / 10) * 0.2 * 10 ** (-0.2), rel=1e-12)


def test_jitter_error_small_for_default_detector():
    assert jitter_error(0.0, 840e-12) == 0
    assert 0 < jitter_error(200e-12, 840e-12) < 1e-5
    assert jitter_error(840e-12, 840e-12) > jitter_error(400e-12, 840e-12)


def test_protocol_dimension_parsing():
    assert protocol_dimension("2D") == 2 and protocol_dimension("4d") == 4 and protocol_dimension(4) == 4
    with pytest.raises(ValueError):
        protocol_dimension("3D")


def test_model_validation():
    with pytest.raises(ValueError):
        LinkModel(channel_loss_db=-1)
    with pytest.raises(ValueError):
        LinkModel(p_Z_bob=1.0)
    with pytest.raises(ValueError):
        DetectorModel(efficiency=0)
    with pytest.raises(ValueError):
        SourceModel(intrinsic_error_Z=1.5)
    with pytest.raises(ValueError):
        # four 840 ps bins do not fit a 595 MHz period
        simulate_block(quiet_link(5.1, 2), 4, 10)


def test_prbs12_is_maximal_length():
    seq = prbs12()
    assert seq.size == PRBS_LENGTH == 4095
    assert int(seq.sum()) == 2048
    # the LFSR never revisits its state inside one period
    states = {tuple(seq[i:i + 12]) for i in range(PRBS_LENGTH - 12)}
    assert len(states) == PRBS_LENGTH - 12


# -- expected tallies -----------------------------------------------------------

@pytest.mark.parametrize("d", [2, 4])
def test_noiseless_link_has_no_errors(d):
    t, duration = expected_tallies(quiet_link(10.0, d), d, 10**6)
    assert t.m_total("Z") == 0 and t.m_total("X") == 0
    assert t.n_total("Z") == pytest.approx(10**6, abs=2)
    assert duration > 0


@pytest.mark.parametrize("d,limit", [(2, 0.5), (4, 0.75)])
def test_noise_only_limit(d, limit):
    link = quiet_link(150.0, d, dark_count_rate=100.0)
    t, _ = expected_tallies(link, d, 10**6, rounded=False)
    assert t.error_rate("Z") == pytest.approx(limit, abs=1e-6)


def test_expected_tallies_scale_with_target():
    link = quiet_link(10.0, 4, dark_count_rate=50.0)
    a, da = expected_tallies(link, 4, 10**5, rounded=False)
    b, db = expected_tallies(link, 4, 10**6, rounded=False)
    assert db == pytest.approx(10 * da, rel=1e-12)
    assert b.n["X"][0] == pytest.approx(10 * a.n["X"][0], rel=1e-12)
    with pytest.raises(ValueError):
        expected_tallies(link, 4, 0)


def test_intensity_ratio_follows_mu():
    # far from saturation the mu1/mu2 detection ratio is ~ mu1/mu2
    link = quiet_link(30.0, 4)
    t, _ = expected_tallies(link, 4, 10**6, rounded=False)
    mu1, mu2 = link.source.decoy.intensities
    assert t.n["Z"][0] / t.n["Z"][1] == pytest.approx((1 - math.exp(-mu1 * 1e-4)) / (1 - math.exp(-mu2 * 1e-4)),
                                                      rel=1e-3)


@pytest.mark.parametrize("protocol", ["2D", "4D"])
def test_registered_rate_saturates(protocol):
    cfg = SessionConfig.for_point(protocol, 0.0)
    link = cfg.resolved_link()
    link = LinkModel(0.0, link.p_Z_bob,
                     SourceModel(link.source.state_rate, decoy=DecoyScheme(0.5, 0.25)), link.detector)
    rates = expected_rates(link, protocol)
    assert np.all(rates.registered_rate < 50e3)
    block = simulate_block(link, protocol, 2 * 10**4, rng_seed=3)
    assert max(block.raw_click_rate.values()) <= 50e3


# -- Monte Carlo ------------------------------------------------------------------

@pytest.mark.parametrize("protocol", ["2D", "4D"])
def test_simulation_deterministic_per_seed(protocol):
    link = SessionConfig.for_point(protocol, 14.0).resolved_link()
    a = simulate_block(link, protocol, 5000, rng_seed=11)
    b = simulate_block(link, protocol, 5000, rng_seed=11)
    c = simulate_block(link, protocol, 5000, rng_seed=12)
    assert a.tallies == b.tallies and a.wall_time_equivalent == b.wall_time_equivalent
    assert a.tallies != c.tallies


@pytest.mark.parametrize("protocol", ["2D", "4D"])
def test_simulation_stops_at_target_and_keeps_records(protocol):
    link = SessionConfig.for_point(protocol, 23.0).resolved_link()
    block = simulate_block(link, protocol, 3000, rng_seed=5, keep_records=True)
    assert block.tallies.n_total("Z") == 3000
    rec = block.records
    assert np.all(np.diff(rec.time) >= 0)
    # per-detector dead time is respected in the registered record
    for j in np.unique(rec.detector):
        gaps = np.diff(rec.time[rec.detector == j])
        assert gaps.size == 0 or gaps.min() >= link.detector.dead_time
    tags = block.photon_tags
    assert tags["Z"]["vacuum"] + tags["Z"]["single"] <= block.tallies.n_total("Z")


def test_prbs_intensity_pattern():
    cfg = SessionConfig.for_point("4D", 14.0)
    link = cfg.resolved_link()
    link = LinkModel(link.channel_loss_db, link.p_Z_bob,
                     SourceModel(link.source.state_rate, decoy=link.source.decoy, prbs=True), link.detector)
    block = simulate_block(link, "4D", 20_000, rng_seed=1)
    t, _ = expected_tallies(link, "4D", 20_000, rounded=False)
    frac_mc = block.tallies.n["Z"][0] / block.tallies.n_total("Z")
    frac_an = t.n["Z"][0] / t.n_total("Z")
    # the PRBS has 2048 ones out of 4095, so the decoy share is 0.5 up to 1/8190
    assert frac_mc == pytest.approx(frac_an, abs=0.015)


def test_mc_matches_expectation_small_block():
    link = SessionConfig.for_point("4D", 23.0).resolved_link()
    block = simulate_block(link, "4D", 20_000, rng_seed=9)
    exp, _ = expected_tallies(link, "4D", 20_000, rounded=False)
    for b in "ZX":
        for k in range(2):
            for obs, mean in ((block.tallies.n[b][k], exp.n[b][k]), (block.tallies.m[b][k], exp.m[b][k])):
                assert abs(obs - mean) <= 4 * math.sqrt(max(mean, 1.0))
