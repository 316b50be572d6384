"""EEG containers, preprocessing, and synthetic data generators."""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace
from fractions import Fraction

import numpy as np
from scipy import signal as sps

CANONICAL_VOLTS_PER_UNIT = 1e-4  # 1.0 == 0.1 mV


@dataclass(frozen=True)
class EegSample:
    """A C x T recording. ``volts_per_unit`` records the physical unit of ``data``."""

    data: np.ndarray
    channel_names: tuple
    fs: float
    volts_per_unit: float = CANONICAL_VOLTS_PER_UNIT
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 2 or data.shape[0] < 1:
            raise ValueError(f"expected a C x T matrix, got shape {data.shape}")
        names = tuple(self.channel_names)
        if len(names) != data.shape[0]:
            raise ValueError(f"{len(names)} channel names for {data.shape[0]} channels")
        if len(set(names)) != len(names):
            raise ValueError("channel names must be unique")
        if self.fs <= 0:
            raise ValueError("fs must be positive")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "channel_names", names)

    @property
    def n_channels(self) -> int:
        return self.data.shape[0]

    @property
    def n_times(self) -> int:
        return self.data.shape[1]

    @property
    def duration_s(self) -> float:
        return self.n_times / self.fs


@dataclass(frozen=True)
class ChannelVocabulary:
    """Canonical channel names with normalised 2-D scalp coordinates in (0, 1)."""

    names: tuple
    coords: np.ndarray

    def __post_init__(self):
        names = tuple(self.names)
        coords = np.asarray(self.coords, dtype=np.float64).reshape(len(names), 2)
        if len(set(names)) != len(names):
            raise ValueError("vocabulary names must be unique")
        if np.any(coords <= 0) or np.any(coords >= 1):
            raise ValueError("coordinates must lie in the open unit square")
        object.__setattr__(self, "names", names)
        object.__setattr__(self, "coords", coords)

    def __len__(self):
        return len(self.names)

    def index_of(self, names) -> np.ndarray:
        lookup = {n: i for i, n in enumerate(self.names)}
        missing = [n for n in names if n not in lookup]
        if missing:
            raise KeyError(f"unknown channel(s): {', '.join(missing)}")
        return np.array([lookup[n] for n in names], dtype=np.intp)

    def coords_of(self, names) -> np.ndarray:
        return self.coords[self.index_of(names)]

    def extended(self, names, rng: np.random.Generator) -> "ChannelVocabulary":
        """Append unseen names with random interior coordinates."""
        new = [n for n in names if n not in self.names]
        if not new:
            return self
        extra = rng.uniform(0.05, 0.95, size=(len(new), 2))
        return ChannelVocabulary(self.names + tuple(new), np.vstack([self.coords, extra]))


def grid_vocabulary(n_channels: int = 16, prefix: str = "E") -> ChannelVocabulary:
    """Channels on a near-square grid, cell centres as coordinates.

    ``grid_vocabulary(16)`` is a 4x4 grid with coordinates 0.125 ... 0.875.
    """
    cols = math.ceil(math.sqrt(n_channels))
    rows = math.ceil(n_channels / cols)
    names, coords = [], []
    for k in range(n_channels):
        r, c = divmod(k, cols)
        names.append(f"{prefix}{k:02d}")
        coords.append(((c + 0.5) / cols, (r + 0.5) / rows))
    return ChannelVocabulary(tuple(names), np.array(coords))


# ---------------------------------------------------------------------------
# preprocessing

def bandpass(sample: EegSample, lo_hz: float = 0.5, hi_hz: float = 70.0, order: int = 4) -> EegSample:
    """Zero-phase Butterworth band-pass (forward-backward)."""
    nyq = sample.fs / 2.0
    if not 0 < lo_hz < hi_hz < nyq:
        raise ValueError(f"band {lo_hz}-{hi_hz} Hz must satisfy 0 < lo < hi < fs/2 = {nyq}")
    sos = sps.butter(order, [lo_hz, hi_hz], btype="bandpass", fs=sample.fs, output="sos")
    padlen = min(3 * (2 * len(sos) + 1), sample.n_times - 1)
    out = sps.sosfiltfilt(sos, sample.data, axis=-1, padlen=padlen)
    return replace(sample, data=out)


def resample(sample: EegSample, fs_out: float) -> EegSample:
    """Rational-factor polyphase resampling with an anti-alias FIR."""
    if fs_out <= 0:
        raise ValueError("fs_out must be positive")
    if fs_out == sample.fs:
        return replace(sample, data=sample.data.copy())
    ratio = Fraction(fs_out / sample.fs).limit_denominator(1000)
    up, down = ratio.numerator, ratio.denominator
    out = sps.resample_poly(sample.data, up, down, axis=-1)
    n_target = int(round(sample.n_times * fs_out / sample.fs))
    out = out[:, :n_target]
    return replace(sample, data=out, fs=float(fs_out))


def segment(recording: EegSample, window_s: float = 4.0, hop_s: float | None = None) -> list:
    """Cut fixed-length windows; hop defaults to the window (no overlap)."""
    hop_s = window_s if hop_s is None else hop_s
    if hop_s <= 0 or window_s <= 0:
        raise ValueError("window and hop must be positive")
    W = int(round(window_s * recording.fs))
    H = int(round(hop_s * recording.fs))
    T = recording.n_times
    if W > T:
        warnings.warn(f"window of {W} samples exceeds recording length {T}; no segments", RuntimeWarning)
        return []
    count = (T - W) // H + 1
    return [replace(recording, data=recording.data[:, k * H: k * H + W].copy()) for k in range(count)]


def rescale_units(sample: EegSample, volts_per_unit: float) -> EegSample:
    """Re-express data so that 1.0 == 0.1 mV.

    ``volts_per_unit`` describes the incoming data: 1.0 for volts, 1e-6 for uV.
    """
    if volts_per_unit <= 0:
        raise ValueError("volts_per_unit must be positive")
    factor = volts_per_unit / CANONICAL_VOLTS_PER_UNIT
    meta = dict(sample.meta, unit_factor=factor)
    return replace(sample, data=sample.data * factor, volts_per_unit=CANONICAL_VOLTS_PER_UNIT, meta=meta)


def preprocess(recording: EegSample, *, lo_hz=0.5, hi_hz=70.0, fs_out=200.0, window_s=4.0,
               hop_s=None, volts_per_unit=None) -> list:
    """Band-pass, resample, segment, and convert to 0.1 mV units."""
    x = bandpass(recording, lo_hz, hi_hz)
    x = resample(x, fs_out)
    vpu = recording.volts_per_unit if volts_per_unit is None else volts_per_unit
    return [rescale_units(s, vpu) for s in segment(x, window_s, hop_s)]


def preprocess_shape(n_times: int, fs: float, *, fs_out=200.0, window_s=4.0, hop_s=None) -> tuple:
    """Number of segments and samples per segment ``preprocess`` will produce."""
    t_out = int(round(n_times * fs_out / fs))
    W = int(round(window_s * fs_out))
    H = int(round((window_s if hop_s is None else hop_s) * fs_out))
    return (0 if W > t_out else (t_out - W) // H + 1), W


# ---------------------------------------------------------------------------
# synthetic EEG

@dataclass
class SynthConfig:
    n_channels: int = 16
    fs: float = 200.0
    duration_s: float = 4.0
    bands: tuple = ((6.0, 0.6), (10.0, 1.0), (20.0, 0.4))  # (centre Hz, amplitude)
    noise_amplitude: float = 0.5
    mixing_scale: float = 0.15
    signature_amplitude: float = 2.0
    signature_hz: float = 8.0
    signature_spread: float = 0.5    # std of the per-sample log-amplitude
    seed: int = 0

    def __post_init__(self):
        if self.mixing_scale <= 0:
            raise ValueError("mixing_scale must be positive")
        if self.noise_amplitude < 0 or self.signature_amplitude < 0 or any(a < 0 for _, a in self.bands):
            raise ValueError("amplitudes must be non-negative")
        if self.signature_spread < 0 or self.signature_hz <= 0:
            raise ValueError("signature_spread must be non-negative and signature_hz positive")

    @property
    def n_times(self) -> int:
        return int(round(self.fs * self.duration_s))

    def vocabulary(self) -> ChannelVocabulary:
        return grid_vocabulary(self.n_channels)


def mixing_matrix(coords: np.ndarray, scale: float) -> np.ndarray:
    """Row-normalised Gaussian volume-conduction kernel over scalp coordinates."""
    d2 = ((coords[:, None, :] - coords[None, :, :]) ** 2).sum(-1)
    K = np.exp(-d2 / (2.0 * scale * scale))
    return K / K.sum(axis=1, keepdims=True)


def _sample_rng(seed: int, index: int, stream: int = 0) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, stream, index]))


def _pink_noise(rng, shape, fs):
    n = shape[-1]
    spec = rng.standard_normal(shape[:-1] + (n // 2 + 1,)) + 1j * rng.standard_normal(shape[:-1] + (n // 2 + 1,))
    freqs = np.fft.rfftfreq(n, 1.0 / fs)
    freqs[0] = freqs[1]
    spec /= np.sqrt(freqs)
    spec[..., 0] = 0.0
    x = np.fft.irfft(spec, n=n, axis=-1)
    return x / x.std(axis=-1, keepdims=True)


def _sources(cfg: SynthConfig, rng: np.random.Generator) -> np.ndarray:
    C, T = cfg.n_channels, cfg.n_times
    t = np.arange(T) / cfg.fs
    src = cfg.noise_amplitude * _pink_noise(rng, (C, T), cfg.fs)
    for centre, amp in cfg.bands:
        freq = centre + rng.uniform(-1.0, 1.0, size=(C, 1))
        phase = rng.uniform(0, 2 * np.pi, size=(C, 1))
        envelope = 1.0 + 0.5 * np.sin(2 * np.pi * rng.uniform(0.2, 1.0, size=(C, 1)) * t + phase)
        src += amp * envelope * np.sin(2 * np.pi * freq * t + phase)
    return src


def signature_gain(coords: np.ndarray) -> np.ndarray:
    """Front-to-back dipole: +1 at one edge of the scalp, -1 at the other."""
    return np.cos(np.pi * coords[:, 1])


def _one_sample(cfg: SynthConfig, K: np.ndarray, gain: np.ndarray, index: int, stream: int = 0) -> np.ndarray:
    rng = _sample_rng(cfg.seed, index, stream)
    x = K @ _sources(cfg, rng)
    if cfg.signature_amplitude > 0:
        # one rhythm shared by every channel through a fixed dipolar field;
        # its amplitude is a per-sample trait that survives any channel subset
        amp = cfg.signature_amplitude * np.exp(cfg.signature_spread * rng.standard_normal())
        t = np.arange(cfg.n_times) / cfg.fs
        wave = np.sin(2 * np.pi * cfg.signature_hz * t + rng.uniform(0, 2 * np.pi))
        x = x + amp * gain[:, None] * wave
    return x


def synth_eeg(cfg: SynthConfig, n_samples: int) -> list:
    """Spatially mixed rhythms plus 1/f noise, one ``EegSample`` per index.

    Each sample depends only on ``(cfg, index)``.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    vocab = cfg.vocabulary()
    K = mixing_matrix(vocab.coords, cfg.mixing_scale)
    gain = signature_gain(vocab.coords)
    return [EegSample(_one_sample(cfg, K, gain, i), vocab.names, cfg.fs) for i in range(n_samples)]


def class_patterns(cfg: SynthConfig, n_classes: int) -> np.ndarray:
    """Per-class (C, T) waveforms: a burst at the signature frequency with
    class-specific phase and gain offsets between the four scalp quadrants."""
    vocab = cfg.vocabulary()
    quad = (vocab.coords[:, 0] >= 0.5).astype(int) + 2 * (vocab.coords[:, 1] >= 0.5).astype(int)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 7919, n_classes]))
    t = np.arange(cfg.n_times) / cfg.fs
    window = np.hanning(cfg.n_times)
    patterns = np.empty((n_classes, cfg.n_channels, cfg.n_times))
    for c in range(n_classes):
        phases = rng.uniform(0, 2 * np.pi, size=4)
        gains = rng.uniform(0.5, 1.5, size=4)
        for g in range(4):
            rows = quad == g
            patterns[c, rows] = gains[g] * window * np.sin(2 * np.pi * cfg.signature_hz * t + phases[g])
    return patterns


def synth_downstream(cfg: SynthConfig, n_classes: int = 4, n_per_class: int = 50,
                     separation: float = 0.3) -> tuple:
    """Balanced labelled set; classes differ by a cross-quadrant burst pattern.

    The pattern is added on top of background EEG drawn from ``cfg`` so the
    class identity is a global, multi-channel feature.
    """
    if n_classes < 2:
        raise ValueError("n_classes must be >= 2")
    vocab = cfg.vocabulary()
    K = mixing_matrix(vocab.coords, cfg.mixing_scale)
    gain = signature_gain(vocab.coords)
    patterns = class_patterns(cfg, n_classes)
    labels = np.repeat(np.arange(n_classes), n_per_class)
    order = np.random.default_rng(np.random.SeedSequence([cfg.seed, 104729])).permutation(labels.size)
    labels = labels[order]
    samples = []
    for i, y in enumerate(labels):
        x = _one_sample(cfg, K, gain, i, stream=1)
        samples.append(EegSample(x + separation * patterns[y], vocab.names, cfg.fs))
    return samples, labels.astype(np.int64)
