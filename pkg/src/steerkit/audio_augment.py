"""Speaker-voice perturbation for reference waveforms.

Three transforms applied in order behind a single ``gamma > threshold`` gate:
formant scaling, F0 scaling and a random peaking-filter equaliser. All
operate on mono float64 signals and preserve length exactly.

STFT defaults: Hann window of 1024 samples, hop 256, centre padding.
"""

from __future__ import annotations

import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import signal as sps

from .errors import FormatError, SignalError
from .numerics.rng import Rng

SAMPLE_RATES = (16000, 22050, 24000, 44100, 48000)
N_FFT = 1024
HOP = 256


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)
        if self.sample_rate not in SAMPLE_RATES:
            raise SignalError(f"unsupported sample rate {self.sample_rate}; expected one of {SAMPLE_RATES}")
        if not np.isfinite(self.samples).all():
            raise SignalError("waveform contains NaN or Inf")

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


def soft_clip(x: np.ndarray, knee: float = 0.9) -> np.ndarray:
    """Identity when ``max|x| <= 1``; otherwise compress everything above ``knee`` smoothly below 1."""
    if np.max(np.abs(x), initial=0.0) <= 1.0:
        return x
    mag = np.abs(x)
    over = mag > knee
    out = x.copy()
    out[over] = np.sign(x[over]) * (knee + (1 - knee) * np.tanh((mag[over] - knee) / (1 - knee)))
    return out


def _wave(samples: np.ndarray, sr: int) -> Waveform:
    return Waveform(soft_clip(samples), sr)


# -- WAV I/O -----------------------------------------------------------------


def read_wav(path: str | Path) -> Waveform:
    """PCM 16-bit or IEEE float 32-bit WAV; multichannel input is averaged to mono."""
    data = Path(path).read_bytes()
    if len(data) < 12:
        raise FormatError(f"{path}: truncated RIFF header at byte {len(data)}")
    if data[:4] != b"RIFF" or data[8:12] != b"WAVE":
        raise FormatError(f"{path}: not a RIFF/WAVE file (byte 0)")
    pos, fmt, pcm = 12, None, None
    while pos < len(data):
        if pos + 8 > len(data):
            raise FormatError(f"{path}: truncated chunk header at byte {pos}")
        cid, size = data[pos : pos + 4], struct.unpack("<I", data[pos + 4 : pos + 8])[0]
        body = pos + 8
        if body + size > len(data):
            raise FormatError(f"{path}: chunk {cid!r} at byte {pos} claims {size} bytes, file ends at byte {len(data)}")
        if cid == b"fmt ":
            if size < 16:
                raise FormatError(f"{path}: fmt chunk too short at byte {pos}")
            tag, channels, rate, _, block, bits = struct.unpack("<HHIIHH", data[body : body + 16])
            if tag == 0xFFFE and size >= 26:
                tag = struct.unpack("<H", data[body + 24 : body + 26])[0]
            fmt = (tag, channels, rate, block, bits)
        elif cid == b"data":
            pcm = data[body : body + size]
        pos = body + size + (size & 1)
    if fmt is None or pcm is None:
        raise FormatError(f"{path}: missing {'fmt' if fmt is None else 'data'} chunk")
    tag, channels, rate, block, bits = fmt
    if tag == 1 and bits == 16:
        x = np.frombuffer(pcm[: len(pcm) // 2 * 2], dtype="<i2").astype(np.float64) / 32768.0
    elif tag == 3 and bits == 32:
        x = np.frombuffer(pcm[: len(pcm) // 4 * 4], dtype="<f4").astype(np.float64)
    else:
        raise FormatError(f"{path}: unsupported codec (format tag {tag}, {bits} bits)")
    if channels < 1:
        raise FormatError(f"{path}: zero channels")
    x = x[: len(x) // channels * channels].reshape(-1, channels).mean(axis=1)
    return Waveform(x, rate)


def write_wav(wave: Waveform, path: str | Path) -> None:
    """Mono 16-bit PCM."""
    q = np.clip(np.round(wave.samples * 32768.0), -32768, 32767).astype("<i2")
    payload = q.tobytes()
    header = b"RIFF" + struct.pack("<I", 36 + len(payload)) + b"WAVE"
    fmt = b"fmt " + struct.pack("<IHHIIHH", 16, 1, 1, wave.sample_rate, wave.sample_rate * 2, 2, 16)
    Path(path).write_bytes(header + fmt + b"data" + struct.pack("<I", len(payload)) + payload)


# -- STFT ----------------------------------------------------------------------


def _window(n_fft: int) -> np.ndarray:
    return sps.get_window("hann", n_fft, fftbins=True)


def stft(x: np.ndarray, n_fft: int = N_FFT, hop: int = HOP) -> np.ndarray:
    """``(frames, n_fft // 2 + 1)`` complex spectrogram with centred frames."""
    pad = n_fft // 2
    xp = np.pad(x, (pad, pad + n_fft))
    n_frames = 1 + len(x) // hop
    idx = np.arange(n_fft)[None, :] + hop * np.arange(n_frames)[:, None]
    return np.fft.rfft(xp[idx] * _window(n_fft), axis=1)


def istft(spec: np.ndarray, length: int, n_fft: int = N_FFT, hop: int = HOP) -> np.ndarray:
    """Weighted overlap-add inverse of :func:`stft`."""
    win = _window(n_fft)
    frames = np.fft.irfft(spec, n=n_fft, axis=1) * win
    total = hop * (len(frames) - 1) + n_fft
    y, wsum = np.zeros(total), np.zeros(total)
    for t, fr in enumerate(frames):
        y[t * hop : t * hop + n_fft] += fr
        wsum[t * hop : t * hop + n_fft] += win**2
    nz = wsum > 1e-10
    y[nz] /= wsum[nz]
    pad = n_fft // 2
    out = y[pad : pad + length]
    return np.pad(out, (0, length - len(out)))


def time_stretch(x: np.ndarray, rate: float, n_fft: int = N_FFT, hop: int = HOP, anchor: int = 4) -> np.ndarray:
    """Phase-vocoder time stretch; output length ``round(len(x) / rate)``.

    Per-bin phase propagation without phase locking. Zero-padded edge frames
    give biased phase increments, so output frames up to analysis frame
    ``anchor`` (the first full window) take their source frame's phase,
    advanced by the anchor frame's instantaneous frequency times the offset
    between output and source frame index; propagation starts from there.
    """
    spec = stft(x, n_fft, hop)
    n_frames, n_bins = spec.shape
    steps = np.arange(0, n_frames, rate)
    padded = np.vstack([spec, np.zeros((2, n_bins), dtype=spec.dtype)])
    advance = 2 * np.pi * hop * np.arange(n_bins) / n_fft

    def increment(j: int) -> np.ndarray:
        dphi = np.angle(padded[j + 1]) - np.angle(padded[j]) - advance
        return advance + dphi - 2 * np.pi * np.round(dphi / (2 * np.pi))

    j0 = min(anchor, max(0, n_frames - 2))
    anchor_inc = increment(j0)
    out = np.empty((len(steps), n_bins), dtype=complex)
    phase = None
    for i, s in enumerate(steps):
        j = int(s)
        frac = s - j
        mag = (1 - frac) * np.abs(padded[j]) + frac * np.abs(padded[j + 1])
        if s < j0 or phase is None:
            phase = np.angle(padded[j]) + anchor_inc * (i - j)
        out[i] = mag * np.exp(1j * phase)
        phase = phase + increment(j)
    return istft(out, int(round(len(x) / rate)), n_fft, hop)


def _resample_to(x: np.ndarray, n: int) -> np.ndarray:
    if n == len(x):
        return x.copy()
    return sps.resample(x, n)


def pitch_shift(wave: Waveform, factor: float, n_fft: int = N_FFT, hop: int = HOP) -> Waveform:
    """Scale every frequency by ``factor`` keeping the length: stretch by ``factor``, then resample back."""
    if not 0.5 <= factor <= 2.0:
        raise SignalError(f"pitch factor {factor} outside [0.5, 2]")
    x = wave.samples
    if len(x) < n_fft:
        raise SignalError(f"input of {len(x)} samples is shorter than one {n_fft}-sample window")
    stretched = time_stretch(x, 1.0 / factor, n_fft, hop)
    return _wave(_resample_to(stretched, len(x)), wave.sample_rate)


def _cepstral_smooth(logmag: np.ndarray, n_fft: int, n_lifter: int) -> np.ndarray:
    cep = np.fft.irfft(logmag, n=n_fft, axis=-1)
    lifter = np.zeros(n_fft)
    lifter[:n_lifter] = 1.0
    lifter[n_fft - n_lifter + 1 :] = 1.0
    return np.fft.rfft(cep * lifter, axis=-1).real


def spectral_envelope(mag: np.ndarray, n_fft: int, n_lifter: int, iterations: int = 40) -> np.ndarray:
    """Iterative cepstral ("true") envelope of each frame (rows of ``mag``).

    Starting from the log spectrum, each pass keeps the larger of the target
    and its smoothed version, so the envelope settles onto the harmonic
    peaks instead of averaging them with the valleys between.
    """
    target = np.log(np.maximum(mag, 1e-10))
    smooth = _cepstral_smooth(target, n_fft, n_lifter)
    for _ in range(iterations):
        target = np.maximum(target, smooth)
        smooth = _cepstral_smooth(target, n_fft, n_lifter)
    return np.exp(smooth)


def formant_shift(
    wave: Waveform, factor: float, n_fft: int = N_FFT, hop: int = HOP, lifter_ms: float = 1.5
) -> Waveform:
    """Scale the spectral envelope by ``factor`` while keeping harmonics (hence F0) in place.

    Each STFT frame is multiplied by ``env(f / factor) / env(f)``, where
    ``env`` is the frame's cepstral envelope keeping quefrencies below
    ``lifter_ms`` (below the shortest pitch period of interest).
    """
    if not 0.7 <= factor <= 1.4:
        raise SignalError(f"formant factor {factor} outside [0.7, 1.4]")
    x = wave.samples
    if len(x) < n_fft:
        raise SignalError(f"input of {len(x)} samples is shorter than one {n_fft}-sample window")
    spec = stft(x, n_fft, hop)
    n_lifter = max(2, int(lifter_ms * 1e-3 * wave.sample_rate))
    env = spectral_envelope(np.abs(spec), n_fft, n_lifter)
    bins = np.arange(spec.shape[1])
    src = bins / factor
    warped = np.stack([np.interp(src, bins, e) for e in env])
    gain = warped / np.maximum(env, 1e-12)
    return _wave(istft(spec * gain, len(x), n_fft, hop), wave.sample_rate)


# -- equaliser -----------------------------------------------------------------


def peaking_biquad(center: float, gain_db: float, q: float, sample_rate: int) -> tuple[np.ndarray, np.ndarray]:
    """Audio-EQ-cookbook peaking filter ``(b, a)``, normalised so ``a[0] = 1``.

    ``A = 10**(gain/40)``, ``w0 = 2 pi f0 / fs``, ``alpha = sin(w0) / 2Q``;
    ``b = [1 + alpha A, -2 cos w0, 1 - alpha A]``,
    ``a = [1 + alpha / A, -2 cos w0, 1 - alpha / A]``.
    """
    A = 10 ** (gain_db / 40)
    w0 = 2 * math.pi * center / sample_rate
    alpha = math.sin(w0) / (2 * q)
    b = np.array([1 + alpha * A, -2 * math.cos(w0), 1 - alpha * A])
    a = np.array([1 + alpha / A, -2 * math.cos(w0), 1 - alpha / A])
    return b / a[0], a / a[0]


@dataclass(frozen=True)
class EqBand:
    center: float
    gain_db: float
    q: float


def apply_eq(wave: Waveform, bands: list[EqBand]) -> Waveform:
    """Cascade of peaking sections; centres are clamped to 0.45 * sample_rate."""
    y = wave.samples
    for band in bands:
        if band.gain_db == 0.0:
            continue
        center = min(band.center, 0.45 * wave.sample_rate)
        b, a = peaking_biquad(center, band.gain_db, band.q, wave.sample_rate)
        y = sps.lfilter(b, a, y)
    return _wave(np.array(y, dtype=np.float64), wave.sample_rate)


@dataclass(frozen=True)
class EqConfig:
    n_bands: int = 3
    center_range: tuple[float, float] = (100.0, 6000.0)  # log-uniform, Hz
    gain_range: tuple[float, float] = (-6.0, 6.0)  # uniform, dB
    q_range: tuple[float, float] = (0.5, 2.0)  # uniform


def draw_eq_bands(config: EqConfig, rng: Rng) -> list[EqBand]:
    return [
        EqBand(
            center=float(rng.log_uniform(*config.center_range)),
            gain_db=float(rng.uniform(*config.gain_range)),
            q=float(rng.uniform(*config.q_range)),
        )
        for _ in range(config.n_bands)
    ]


def random_eq(wave: Waveform, rng: Rng, config: EqConfig = EqConfig()) -> tuple[Waveform, list[EqBand]]:
    if len(wave.samples) == 0:
        raise SignalError("empty waveform")
    bands = draw_eq_bands(config, rng)
    return apply_eq(wave, bands), bands


# -- pipeline --------------------------------------------------------------------


@dataclass(frozen=True)
class PerturbConfig:
    formant_factor_range: tuple[float, float] = (2**-0.25, 2**0.25)  # log-uniform
    f0_factor_range: tuple[float, float] = (2**-0.25, 2**0.25)  # log-uniform
    eq: EqConfig = field(default_factory=EqConfig)
    gate_threshold: float = 0.3

    def __post_init__(self):
        for lo, hi in (self.formant_factor_range, self.f0_factor_range):
            if not 0 < lo <= hi:
                raise ValueError(f"factor range ({lo}, {hi}) must be positive and ordered")
        if not 0.0 <= self.gate_threshold <= 1.0:
            raise ValueError("gate_threshold must lie in [0, 1]")


@dataclass
class PerturbOutcome:
    wave: Waveform
    applied: bool
    gamma: float
    formant_factor: float | None = None
    f0_factor: float | None = None
    eq_bands: list[EqBand] = field(default_factory=list)

    def params(self) -> dict:
        return {
            "gamma": self.gamma,
            "applied": self.applied,
            "formant_factor": self.formant_factor,
            "f0_factor": self.f0_factor,
            "eq_bands": [asdict(b) for b in self.eq_bands],
        }


def perturb(wave: Waveform, config: PerturbConfig, rng: Rng) -> PerturbOutcome:
    """Gate on ``gamma ~ U(0, 1)``, then formant shift, pitch shift and random EQ in that order."""
    gamma = float(rng.uniform())
    if gamma <= config.gate_threshold:
        return PerturbOutcome(wave, False, gamma)
    beta = float(rng.child("formant").log_uniform(*config.formant_factor_range))
    k = float(rng.child("f0").log_uniform(*config.f0_factor_range))
    out = formant_shift(wave, beta)
    out = pitch_shift(out, k)
    out, bands = random_eq(out, rng.child("eq"), config.eq)
    return PerturbOutcome(out, True, gamma, beta, k, bands)


# -- F0 estimation -----------------------------------------------------------------


@dataclass
class F0Track:
    times: np.ndarray
    f0: np.ndarray  # Hz, NaN where unvoiced
    voiced: np.ndarray

    def median(self) -> float:
        v = self.f0[self.voiced]
        return float(np.median(v)) if len(v) else float("nan")


def estimate_f0(
    wave: Waveform,
    fmin: float = 50.0,
    fmax: float = 500.0,
    frame_ms: float = 40.0,
    hop_ms: float = 10.0,
    voicing_threshold: float = 0.5,
) -> F0Track:
    """Normalised-autocorrelation pitch tracker.

    Picks the first lag whose correlation is within 90% of the frame's best
    peak (guards against period doubling), refined by parabolic
    interpolation. Frames whose best peak is below ``voicing_threshold`` are
    unvoiced.
    """
    if fmin >= fmax:
        raise ValueError(f"inverted F0 range [{fmin}, {fmax}]")
    sr = wave.sample_rate
    x = wave.samples
    if len(x) < 2 * sr / fmin:
        raise SignalError(f"signal shorter than two periods of {fmin} Hz")
    n = int(frame_ms * 1e-3 * sr)
    hop = int(hop_ms * 1e-3 * sr)
    lag_lo, lag_hi = int(math.floor(sr / fmax)), int(math.ceil(sr / fmin))
    lag_hi = min(lag_hi, n - 1)
    starts = range(0, max(1, len(x) - n + 1), hop)
    times, f0, voiced = [], [], []
    for s in starts:
        fr = x[s : s + n]
        if len(fr) < n:
            break
        fr = fr - fr.mean()
        r = np.zeros(lag_hi + 2)
        for lag in range(lag_lo - 1, lag_hi + 2):
            if lag >= n:
                break
            a, b = fr[: n - lag], fr[lag:]
            den = math.sqrt(float(a @ a) * float(b @ b))
            r[lag] = float(a @ b) / den if den > 1e-12 else 0.0
        seg = r[lag_lo : lag_hi + 1]
        best = float(seg.max()) if len(seg) else 0.0
        times.append((s + n / 2) / sr)
        if best < voicing_threshold:
            f0.append(np.nan)
            voiced.append(False)
            continue
        peaks = [
            lag
            for lag in range(lag_lo, lag_hi + 1)
            if r[lag] >= 0.9 * best and r[lag] >= r[lag - 1] and r[lag] >= r[lag + 1]
        ]
        lag = peaks[0] if peaks else lag_lo + int(seg.argmax())
        y0, y1, y2 = r[lag - 1], r[lag], r[lag + 1]
        den = y0 - 2 * y1 + y2
        shift = 0.5 * (y0 - y2) / den if den != 0 else 0.0
        f0.append(sr / (lag + max(-0.5, min(0.5, shift))))
        voiced.append(True)
    return F0Track(np.array(times), np.array(f0), np.array(voiced, dtype=bool))


# -- test signals -------------------------------------------------------------------


def sawtooth(f0: float, duration: float, sample_rate: int = 24000, amplitude: float = 0.5) -> Waveform:
    """Band-limited sawtooth (harmonics below Nyquist)."""
    t = np.arange(int(duration * sample_rate)) / sample_rate
    x = np.zeros_like(t)
    for h in range(1, int(sample_rate / 2 / f0) + 1):
        x += np.sin(2 * np.pi * h * f0 * t) / h
    return Waveform(amplitude * x / np.max(np.abs(x)), sample_rate)


def synthetic_vowel(
    f0: float, formant: float, bandwidth: float = 200.0, duration: float = 1.0, sample_rate: int = 24000
) -> Waveform:
    """Harmonic series weighted by a single two-pole resonance at ``formant`` Hz."""
    t = np.arange(int(duration * sample_rate)) / sample_rate
    r = math.exp(-math.pi * bandwidth / sample_rate)
    theta = 2 * math.pi * formant / sample_rate
    x = np.zeros_like(t)
    for h in range(1, int(sample_rate / 2 / f0)):
        w = 2 * math.pi * h * f0 / sample_rate
        z = np.exp(1j * w)
        gain = 1.0 / abs((1 - r * np.exp(1j * theta) / z) * (1 - r * np.exp(-1j * theta) / z))
        x += gain * np.sin(2 * np.pi * h * f0 * t)
    return Waveform(0.5 * x / np.max(np.abs(x)), sample_rate)
