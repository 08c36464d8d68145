import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from semfl.errors import ContractError, EmptyRoundError, ParameterError
from semfl.model import Architecture, init_params
from semfl.network import (
    DeviceProfile, compute_delay, db_to_linear, dbm_to_watt, delay_report, downlink_rate, model_bits,
    round_delay, shannon_rate, transmission_delays, uplink_rate,
)

from conftest import rel_err

# Shannon formula evaluated in 40-digit decimal arithmetic for the reference link parameters
UPLINK_REF = 24582267.959601204
DOWNLINK_REF = 538083920.17081577


def test_unit_conversions():
    assert db_to_linear(-50.0) == pytest.approx(1e-5, rel=1e-15)
    assert dbm_to_watt(30.0) == 1.0
    assert dbm_to_watt(-174.0) == pytest.approx(10 ** -20.4, rel=1e-14)


def test_uplink_reference_value():
    assert rel_err(uplink_rate(DeviceProfile()), UPLINK_REF) < 1e-6
    assert uplink_rate(DeviceProfile()) == pytest.approx(2.458e7, rel=1e-3)


def test_downlink_reference_value():
    assert rel_err(downlink_rate(DeviceProfile()), DOWNLINK_REF) < 1e-6
    assert downlink_rate(DeviceProfile()) == pytest.approx(5.38e8, rel=1e-3)


def test_zero_signal_zero_rate():
    assert shannon_rate(1e6, 0.0, 1e-5, 0.0, 1e-20) == 0.0
    assert shannon_rate(1e6, 0.01, 0.0, 0.0, 1e-20) == 0.0


def test_bandwidth_doubling_at_fixed_snr():
    # doubling B doubles the noise power, so double P as well to hold the SNR
    a = shannon_rate(1e6, 0.01, 1e-5, 0.0, 4e-21)
    b = shannon_rate(2e6, 0.02, 1e-5, 0.0, 4e-21)
    assert rel_err(b, 2 * a) < 1e-15


def test_downlink_equals_uplink_when_symmetric():
    p = DeviceProfile(p_up_w=0.5, p_down_w=0.5, b_up_hz=3e6, b_down_hz=3e6, interference_up_w=1e-14, interference_down_w=1e-14)
    assert uplink_rate(p) == downlink_rate(p)


@settings(max_examples=60, deadline=None)
@given(
    p=st.floats(1e-4, 10.0), h=st.floats(1e-9, 1e-2), i=st.floats(0.0, 1e-10),
    b=st.floats(1e5, 1e8), f=st.floats(1.01, 4.0),
)
def test_property_rate_monotonicity(p, h, i, b, f):
    sigma = dbm_to_watt(-174.0)
    r = shannon_rate(b, p, h, i, sigma)
    assert shannon_rate(b, p * f, h, i, sigma) > r
    assert shannon_rate(b, p, h * f, i, sigma) > r
    assert shannon_rate(b, p, h, i * f + 1e-13, sigma) < r


def test_profile_validation():
    with pytest.raises(ParameterError):
        DeviceProfile(cpu_freq_hz=0.0)
    with pytest.raises(ParameterError):
        DeviceProfile(interference_up_w=-1.0)


def test_model_bits():
    assert model_bits(10) == 320
    arch = Architecture()
    p = init_params(arch, 0)
    mask = np.zeros(len(p), dtype=bool)
    mask[:100] = True
    assert model_bits(p) == model_bits(p, mask) == 32 * arch.num_params
    counted = sum(math.prod(s) for _, s in arch.manifest())
    assert model_bits(p) == 32 * counted == 32 * 38738


def test_transmission_delays():
    assert transmission_delays(1e6, 1e6, 1e6) == (1.0, 1.0)
    u1, d1 = transmission_delays(5e5, 2e6, 4e6)
    u2, d2 = transmission_delays(1e6, 2e6, 4e6)
    assert (u2, d2) == (2 * u1, 2 * d1)
    bits = 32 * 38738
    up, down = transmission_delays(bits, UPLINK_REF, DOWNLINK_REF)
    assert rel_err(up, bits / UPLINK_REF) < 1e-15
    assert up == pytest.approx(0.050427243, rel=1e-8)
    assert transmission_delays(100, 0.0, 1.0)[0] == math.inf


def test_compute_delay():
    assert compute_delay(100, 1e5, 10, 5, 2e9) == pytest.approx(0.25, rel=1e-15)
    full = compute_delay(300, 38738, 10, 2, 2e9)
    assert rel_err(compute_delay(300, 0.5 * 38738, 10, 2, 2e9), 0.5 * full) < 1e-12
    rng = np.random.default_rng(0)
    for _ in range(20):
        d, t, k, g, f = rng.integers(1, 500), rng.integers(1, 10**5), rng.random() * 20, rng.integers(1, 5), rng.random() * 3e9 + 1e8
        assert rel_err(compute_delay(d, t, k, g, f), d * k * t * g / f) < 1e-12
    with pytest.raises(ContractError):
        compute_delay(1, 1, 1, 1, 0.0)


def test_compute_delay_linear_in_proportion():
    P = 38738
    for zeta in (0.1, 0.33, 0.5, 0.9):
        ratio = compute_delay(200, zeta * P, 10, 2, 2e9) / compute_delay(200, P, 10, 2, 2e9)
        assert abs(ratio - zeta) < 1e-12


def test_round_delay_cases():
    d_t, flags = round_delay([0.2, 0.5, 0.3], 1.0)
    assert d_t == 0.5 and flags.all()
    d_t, flags = round_delay([0.2, 1.5, 0.3], 1.0)
    assert d_t == 0.3 and flags.tolist() == [True, False, True]
    d_t, _ = round_delay([0.2, 7.5, 0.3])
    assert d_t == 7.5
    with pytest.raises(EmptyRoundError) as info:
        round_delay([2.0, 3.0, 4.0], 1.0, round_index=4)
    assert info.value.round_index == 4


@settings(max_examples=60, deadline=None)
@given(d=st.lists(st.floats(0.0, 10.0), min_size=1, max_size=8), d_max=st.floats(0.01, 10.0))
def test_property_round_delay(d, d_max):
    d = np.asarray(d)
    if not (d <= d_max).any():
        with pytest.raises(EmptyRoundError):
            round_delay(d, d_max)
        return
    d_t, flags = round_delay(d, d_max)
    assert d_t <= d_max
    assert d_t == d[flags].max()
    assert np.array_equal(flags, d <= d_max)


def test_delay_report_and_comm_bits():
    slow = DeviceProfile(cpu_freq_hz=1e5)
    profiles = [DeviceProfile(), slow, DeviceProfile(p_up_w=0.02)]
    rep = delay_report(profiles, [100, 100, 50], [1000, 1000, 500], 32000, 2, d_max=1.0)
    assert rep.participants.tolist() == [True, False, True]
    assert rep.round_delay == rep.d_total[[0, 2]].max()
    assert np.allclose(rep.d_total, rep.d_up + rep.d_down + rep.d_comp, rtol=0, atol=0)
    assert rep.comm_bits == 2 * 2 * 32000
    assert np.all(rep.d_total >= 0)
