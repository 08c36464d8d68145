"""Wireless link rates and per-round delay accounting."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .errors import ContractError, EmptyRoundError, ParameterError

BITS_PER_PARAM = 32


def db_to_linear(db):
    return 10.0 ** (db / 10.0)


def dbm_to_watt(dbm):
    return 10.0 ** ((dbm - 30.0) / 10.0)


@dataclass(frozen=True)
class DeviceProfile:
    cpu_freq_hz: float = 2e9
    channel_index: int = 0
    p_up_w: float = 0.01
    p_down_w: float = 1.0
    b_up_hz: float = 1e6
    b_down_hz: float = 20e6
    gain: float = db_to_linear(-50.0)
    interference_up_w: float = 0.0
    interference_down_w: float = 0.0
    noise_psd_w_hz: float = dbm_to_watt(-174.0)
    kappa: float = 10.0

    def __post_init__(self):
        positive = ("cpu_freq_hz", "p_up_w", "p_down_w", "b_up_hz", "b_down_hz", "gain", "noise_psd_w_hz", "kappa")
        for name in positive:
            if not getattr(self, name) > 0:
                raise ParameterError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("interference_up_w", "interference_down_w"):
            if not getattr(self, name) >= 0:
                raise ParameterError(f"{name} must be non-negative, got {getattr(self, name)}")

    def jittered(self, rng, std_db):
        """Copy with log-normal fading applied to the channel gain."""
        return replace(self, gain=self.gain * db_to_linear(rng.normal(0.0, std_db)))


def shannon_rate(bandwidth_hz, power_w, gain, interference_w, noise_psd_w_hz):
    """``B * log2(1 + P h / (I + sigma B))``; noise power is PSD times bandwidth."""
    snr = power_w * gain / (interference_w + noise_psd_w_hz * bandwidth_hz)
    return bandwidth_hz * math.log2(1.0 + snr)


def uplink_rate(profile):
    return shannon_rate(profile.b_up_hz, profile.p_up_w, profile.gain, profile.interference_up_w, profile.noise_psd_w_hz)


def downlink_rate(profile):
    return shannon_rate(
        profile.b_down_hz, profile.p_down_w, profile.gain, profile.interference_down_w, profile.noise_psd_w_hz
    )


def model_bits(params, mask=None):
    """Bits on the wire for one model copy.

    The full model travels regardless of freezing, so ``mask`` is ignored.
    """
    count = params if isinstance(params, (int, np.integer)) else len(params)
    return BITS_PER_PARAM * int(count)


def transmission_delays(bits, up_rate, down_rate):
    """(uplink, downlink) seconds; a zero rate gives an infinite delay."""
    d_up = bits / up_rate if up_rate > 0 else math.inf
    d_down = bits / down_rate if down_rate > 0 else math.inf
    return d_up, d_down


def compute_delay(volume, trainable_params, kappa, epochs, cpu_freq_hz):
    """Local training time: samples * cycles-per-sample * epochs / frequency."""
    if cpu_freq_hz <= 0:
        raise ContractError("CPU frequency must be positive")
    cycles_per_sample = kappa * trainable_params
    return volume * cycles_per_sample * epochs / cpu_freq_hz


def round_delay(device_delays, d_max=math.inf, round_index=None):
    """Round delay and participation flags.

    A device takes part iff its delay is within ``d_max``; the round lasts as
    long as the slowest participant.
    """
    d = np.asarray(device_delays, dtype=np.float64)
    if d.size == 0:
        raise ContractError("need at least one device")
    flags = d <= d_max
    if not flags.any():
        raise EmptyRoundError(round_index)
    return float(d[flags].max()), flags


@dataclass
class DelayReport:
    d_up: np.ndarray
    d_down: np.ndarray
    d_comp: np.ndarray
    d_total: np.ndarray
    participants: np.ndarray
    round_delay: float
    model_bits: int

    @property
    def comm_bits(self):
        """Uplink plus downlink bits moved by participating devices."""
        return int(self.participants.sum()) * 2 * self.model_bits


def delay_report(profiles, volumes, trainable, bits, epochs, d_max=math.inf, round_index=None):
    n = len(profiles)
    d_up, d_down, d_comp = np.zeros(n), np.zeros(n), np.zeros(n)
    for i, prof in enumerate(profiles):
        d_up[i], d_down[i] = transmission_delays(bits, uplink_rate(prof), downlink_rate(prof))
        d_comp[i] = compute_delay(volumes[i], trainable[i], prof.kappa, epochs, prof.cpu_freq_hz)
    total = d_up + d_down + d_comp
    d_t, flags = round_delay(total, d_max, round_index)
    return DelayReport(d_up, d_down, d_comp, total, flags, d_t, bits)
