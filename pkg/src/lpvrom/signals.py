"""Excitation signal generators and the prediction-error metric.

Frequencies of the periodic excitations are expressed as fractions of the
reduced frequency ``f_r = V / c_bar`` (flight speed over mean chord), so the
same specification scales across operating points. All generators are
deterministic under a fixed seed.

The turbulence surrogate is deliberately simple: white noise through a
first-order low-pass filter with configurable bandwidth, as a stand-in for a
full Dryden filter.
"""

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError

CBAR_DEFAULT = 0.29

SINE_BANK_CHANNELS = (0, 2, 4)
SINE_BANK_FRACTIONS = (1.0 / (5.0 * np.pi), 1.0 / (10.0 * np.pi), 1.0 / (20.0 * np.pi))
CHIRP_BAND = (1.0 / (50.0 * np.pi), 2.0 / (15.0 * np.pi))

KINDS = (
    "zero",
    "impulse_train",
    "sine_bank",
    "chirp",
    "prbs9",
    "gust_one_cosine",
    "filtered_noise",
)


def reduced_frequency(v_speed, cbar=CBAR_DEFAULT):
    """Aircraft reduced frequency ``f_r = V / c_bar`` in Hz."""
    if v_speed <= 0 or cbar <= 0:
        raise DimensionError("speed and chord must be positive")
    return v_speed / cbar


@dataclass(frozen=True)
class SignalSpec:
    """Description of one excitation sequence.

    ``channels`` restricts the excited input channels (``None`` means the
    kind's default: all channels, or the sine bank's 1/3/5 convention).
    ``freq_fractions`` are per-channel sine frequencies as fractions of
    ``f_r``; ``chirp_band`` is the swept fraction range. ``bandwidth_hz``
    only applies to the filtered-noise surrogate.
    """

    kind: str
    dt: float
    n_s: int
    amplitude: float = 1.0
    channels: tuple = None
    freq_fractions: tuple = None
    chirp_band: tuple = CHIRP_BAND
    gust_length_s: float = 0.5
    bandwidth_hz: float = 4.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise DimensionError(f"unknown signal kind {self.kind!r}; known: {KINDS}")
        if not self.dt > 0:
            raise DimensionError("dt must be positive")
        if self.n_s < 1:
            raise DimensionError("n_s must be >= 1")
        if not np.isfinite(self.amplitude):
            raise DimensionError("amplitude must be finite")
        if self.channels is not None:
            object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
            if any(c < 0 for c in self.channels):
                raise DimensionError("channel indices must be nonnegative")
        if self.freq_fractions is not None:
            object.__setattr__(self, "freq_fractions", tuple(float(f) for f in self.freq_fractions))
            if any(f <= 0 for f in self.freq_fractions):
                raise DimensionError("frequency fractions must be positive")
        if not (0 < self.chirp_band[0] < self.chirp_band[1]):
            raise DimensionError("chirp_band must be increasing and positive")
        if self.gust_length_s <= 0:
            raise DimensionError("gust_length_s must be positive")


def prbs9(n_samples, amplitude=1.0, seed=0):
    """Maximal-length PRBS-9 sequence with levels ``+-amplitude``.

    A 9-bit Fibonacci shift register with taps (9, 5) gives period 511 with
    256 high and 255 low values per period; the seed selects the (nonzero)
    initial register state, i.e. the phase of the sequence.
    """
    if n_samples < 1:
        raise DimensionError("PRBS sequence needs at least one chip")
    rng = np.random.default_rng(seed)
    state = rng.integers(0, 2, size=9)
    if not state.any():
        state[0] = 1
    out = np.empty(n_samples)
    for k in range(n_samples):
        out[k] = amplitude if state[8] else -amplitude
        feedback = state[8] ^ state[4]
        state[1:] = state[:-1]
        state[0] = feedback
    return out


def gust_one_cosine(length_s, amplitude, dt):
    """1-cosine gust profile: ``0.5 A (1 - cos(2 pi t / T))`` on ``[0, T]``.

    Returns the samples covering the gust (zero at both ends, peak ``A`` at
    mid-length); the caller embeds it at the desired onset.
    """
    if length_s <= 0:
        raise DimensionError("gust length must be positive")
    n = int(round(length_s / dt))
    t = np.arange(n + 1) * dt
    return 0.5 * amplitude * (1.0 - np.cos(2.0 * np.pi * t / length_s))


def filtered_noise(n_samples, dt, bandwidth_hz, amplitude=1.0, seed=0):
    """First-order low-passed white noise, RMS-normalized to ``amplitude``.

    Documented surrogate for Dryden turbulence: ``y_k = a y_{k-1} + (1-a) w_k``
    with ``a = exp(-2 pi f_bw dt)`` and the white-noise variance chosen so the
    stationary output standard deviation equals ``amplitude``.
    """
    if bandwidth_hz <= 0:
        raise DimensionError("bandwidth must be positive")
    a = float(np.exp(-2.0 * np.pi * bandwidth_hz * dt))
    rng = np.random.default_rng(seed)
    w = rng.standard_normal(n_samples)
    y = np.empty(n_samples)
    acc = 0.0
    for k in range(n_samples):
        acc = a * acc + (1.0 - a) * w[k]
        y[k] = acc
    stationary_std = (1.0 - a) / np.sqrt(1.0 - a * a)
    return y * (amplitude / stationary_std)


def generate(spec, n_u, v_speed=None, cbar=CBAR_DEFAULT):
    """Render a :class:`SignalSpec` to an ``(n_u, n_s + 1)`` input matrix.

    ``v_speed`` is required for the reduced-frequency-relative kinds
    (sine bank and chirp).
    """
    n = spec.n_s + 1
    U = np.zeros((n_u, n))
    if spec.channels is not None and any(c >= n_u for c in spec.channels):
        raise DimensionError(f"channel mask {spec.channels} exceeds n_u={n_u}")
    t = np.arange(n) * spec.dt

    if spec.kind == "zero":
        return U

    if spec.kind == "impulse_train":
        channels = spec.channels if spec.channels is not None else tuple(range(n_u))
        rng = np.random.default_rng(spec.seed)
        order = rng.permutation(len(channels))
        segment = n // len(channels)
        if segment < 1:
            raise DimensionError("sequence too short for one impulse per channel")
        for slot, idx in enumerate(order):
            U[channels[idx], slot * segment] = spec.amplitude
        return U

    if spec.kind == "sine_bank":
        if v_speed is None:
            raise DimensionError("sine bank needs the flight speed for f_r")
        f_r = reduced_frequency(v_speed, cbar)
        channels = spec.channels if spec.channels is not None else SINE_BANK_CHANNELS
        fractions = spec.freq_fractions if spec.freq_fractions is not None else SINE_BANK_FRACTIONS
        if len(channels) != len(fractions):
            raise DimensionError("need one frequency fraction per excited channel")
        for c, frac in zip(channels, fractions):
            U[c] = spec.amplitude * np.sin(2.0 * np.pi * frac * f_r * t)
        return U

    if spec.kind == "chirp":
        if v_speed is None:
            raise DimensionError("chirp needs the flight speed for f_r")
        f_r = reduced_frequency(v_speed, cbar)
        f0, f1 = spec.chirp_band[0] * f_r, spec.chirp_band[1] * f_r
        T = spec.n_s * spec.dt
        phase = 2.0 * np.pi * (f0 * t + 0.5 * (f1 - f0) * t * t / T)
        wave = spec.amplitude * np.sin(phase)
        channels = spec.channels if spec.channels is not None else tuple(range(n_u))
        for c in channels:
            U[c] = wave
        return U

    if spec.kind == "prbs9":
        channels = spec.channels if spec.channels is not None else tuple(range(n_u))
        for i, c in enumerate(channels):
            U[c] = prbs9(n, amplitude=spec.amplitude, seed=spec.seed + i)
        return U

    if spec.kind == "gust_one_cosine":
        channels = spec.channels if spec.channels is not None else (0,)
        profile = gust_one_cosine(spec.gust_length_s, spec.amplitude, spec.dt)
        m = min(profile.size, n)
        for c in channels:
            U[c, :m] = profile[:m]
        return U

    if spec.kind == "filtered_noise":
        channels = spec.channels if spec.channels is not None else tuple(range(n_u))
        for i, c in enumerate(channels):
            U[c] = filtered_noise(n, spec.dt, spec.bandwidth_hz,
                                  amplitude=spec.amplitude, seed=spec.seed + i)
        return U

    raise DimensionError(f"unhandled signal kind {spec.kind!r}")


def relative_error(predicted, truth):
    """Euclidean norm of the error signal relative to the true signal norm.

    Both sequences are flattened; shapes must match and the truth must not be
    identically zero.
    """
    p = np.asarray(predicted, dtype=float)
    tr = np.asarray(truth, dtype=float)
    if p.shape != tr.shape:
        raise DimensionError(f"shape mismatch: predicted {p.shape}, truth {tr.shape}")
    denom = float(np.linalg.norm(tr))
    if denom == 0.0:
        raise ZeroDivisionError("truth signal has zero norm")
    return float(np.linalg.norm(p - tr)) / denom
