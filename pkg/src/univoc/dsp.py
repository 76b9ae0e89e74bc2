"""Signal-processing front end: waveform I/O, mu-law companding, log-mel features.

Every function here is pure and deterministic: identical inputs produce
bit-identical outputs. The canonical configuration analyzes 24 kHz mono audio
into 80 natural-log mel bands between 50 Hz and 12 kHz, and represents
samples as 10-bit mu-law classes.
"""

from __future__ import annotations

import json
import wave
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, InputError, ShapeError

# 10-bit companding: 1024 classes, mu = n_classes - 1.
N_CLASSES = 1024

_MEL_FILE_VERSION = 1


@dataclass(frozen=True)
class AudioBuffer:
    """Mono waveform with samples normalized to [-1.0, 1.0].

    Parameters
    ----------
    samples : np.ndarray
        One-dimensional float array; every entry must lie in [-1.0, 1.0].
    sample_rate : int
        Sampling rate in Hz, strictly positive.
    """

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise ShapeError(f"audio must be 1-D, got shape {samples.shape}")
        if not isinstance(self.sample_rate, (int, np.integer)) or self.sample_rate <= 0:
            raise ConfigError(f"sample_rate must be a positive int, got {self.sample_rate!r}")
        if samples.size and (np.abs(samples).max() > 1.0 or not np.isfinite(samples).all()):
            raise InputError("audio samples must be finite and within [-1.0, 1.0]")
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "sample_rate", int(self.sample_rate))

    def __len__(self) -> int:
        return self.samples.shape[0]


@dataclass(frozen=True)
class MelConfig:
    """Parameters of the log-mel analysis.

    The defaults are the canonical full-scale values; tests shrink them.
    `win <= n_fft` and `fmin < fmax <= sample_rate / 2` are enforced.
    """

    sample_rate: int = 24000
    n_fft: int = 2048
    hop: int = 300
    win: int = 1200
    n_mels: int = 80
    fmin: float = 50.0
    fmax: float = 12000.0
    log_floor: float = 1e-5

    def __post_init__(self):
        if self.sample_rate <= 0 or self.n_fft <= 0 or self.hop <= 0 or self.win <= 0:
            raise ConfigError("sample_rate, n_fft, hop and win must be positive")
        if self.win > self.n_fft:
            raise ConfigError(f"win ({self.win}) must not exceed n_fft ({self.n_fft})")
        if self.n_mels <= 0:
            raise ConfigError("n_mels must be positive")
        if not (0.0 <= self.fmin < self.fmax):
            raise ConfigError(f"need 0 <= fmin < fmax, got [{self.fmin}, {self.fmax}]")
        if self.fmax > self.sample_rate / 2:
            raise ConfigError(f"fmax ({self.fmax}) above Nyquist ({self.sample_rate / 2})")
        if self.log_floor <= 0.0:
            raise ConfigError("log_floor must be strictly positive")


@dataclass(frozen=True)
class MelSpectrogram:
    """A (frames, n_mels) array of natural-log mel energies plus its config."""

    frames: np.ndarray
    config: MelConfig

    def __post_init__(self):
        frames = np.asarray(self.frames, dtype=np.float64)
        if frames.ndim != 2 or frames.shape[1] != self.config.n_mels:
            raise ShapeError(
                f"mel frames must be (T, {self.config.n_mels}), got {frames.shape}"
            )
        object.__setattr__(self, "frames", frames)

    def __len__(self) -> int:
        return self.frames.shape[0]


# ---------------------------------------------------------------------------
# mu-law companding


def mulaw_encode(x, n_classes: int = N_CLASSES):
    """Compand amplitudes in [-1, 1] to integer classes in [0, n_classes).

    The companded value sign(x) * ln(1 + mu*|x|) / ln(1 + mu) with
    mu = n_classes - 1 is quantized into n_classes uniform bins over [-1, 1].
    Accepts scalars or arrays; returns int64 of the same shape.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.size and (np.abs(x).max() > 1.0 or not np.isfinite(x).all()):
        raise InputError("amplitudes must be finite and within [-1.0, 1.0]")
    mu = float(n_classes - 1)
    companded = np.sign(x) * np.log1p(mu * np.abs(x)) / np.log1p(mu)
    classes = np.floor((companded + 1.0) / 2.0 * n_classes).astype(np.int64)
    classes = np.clip(classes, 0, n_classes - 1)
    return int(classes) if classes.ndim == 0 else classes


def mulaw_decode(classes, n_classes: int = N_CLASSES):
    """Map integer classes back to the amplitude at the center of their bin."""
    c = np.asarray(classes)
    if not np.issubdtype(c.dtype, np.integer):
        raise InputError(f"classes must be integers, got dtype {c.dtype}")
    if c.size and (c.min() < 0 or c.max() >= n_classes):
        raise InputError(f"classes must lie in [0, {n_classes - 1}]")
    mu = float(n_classes - 1)
    y = 2.0 * (c.astype(np.float64) + 0.5) / n_classes - 1.0
    x = np.sign(y) * (np.power(1.0 + mu, np.abs(y)) - 1.0) / mu
    return float(x) if x.ndim == 0 else x


# ---------------------------------------------------------------------------
# mel filterbank and spectrogram


def hz_to_mel(hz):
    """Convert Hz to mels: 2595 * log10(1 + hz / 700)."""
    return 2595.0 * np.log10(1.0 + np.asarray(hz, dtype=np.float64) / 700.0)


def mel_to_hz(mel):
    """Inverse of :func:`hz_to_mel`."""
    return 700.0 * (np.power(10.0, np.asarray(mel, dtype=np.float64) / 2595.0) - 1.0)


def mel_filter_centers(config: MelConfig) -> np.ndarray:
    """Center frequencies (Hz) of the triangular filters, one per band."""
    edges = np.linspace(hz_to_mel(config.fmin), hz_to_mel(config.fmax), config.n_mels + 2)
    return mel_to_hz(edges[1:-1])


def mel_filterbank(config: MelConfig) -> np.ndarray:
    """Triangular mel filterbank, shape (n_mels, n_fft // 2 + 1).

    Filter edges are uniformly spaced on the mel scale between fmin and fmax;
    each triangle is normalized to unit peak. A configuration whose filters
    have no FFT-bin support raises ConfigError.
    """
    n_bins = config.n_fft // 2 + 1
    fft_freqs = np.arange(n_bins, dtype=np.float64) * config.sample_rate / config.n_fft
    mel_edges = np.linspace(
        hz_to_mel(config.fmin), hz_to_mel(config.fmax), config.n_mels + 2
    )
    hz_edges = mel_to_hz(mel_edges)

    fb = np.zeros((config.n_mels, n_bins), dtype=np.float64)
    for m in range(config.n_mels):
        left, center, right = hz_edges[m], hz_edges[m + 1], hz_edges[m + 2]
        up = (fft_freqs - left) / (center - left)
        down = (right - fft_freqs) / (right - center)
        fb[m] = np.maximum(0.0, np.minimum(up, down))

    if (fb.max(axis=1) <= 0.0).any():
        dead = int(np.argmax(fb.max(axis=1) <= 0.0))
        raise ConfigError(
            f"mel filter {dead} has no FFT-bin support; "
            "increase n_fft or widen the frequency range"
        )
    return fb


def _hann_periodic(win: int) -> np.ndarray:
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(win) / win)


def frame_count(n_samples: int, hop: int) -> int:
    """Number of analysis frames for a centered STFT: floor(L / hop) + 1."""
    if n_samples <= 0:
        raise InputError("audio must be non-empty")
    return n_samples // hop + 1


def extract_mel(audio: AudioBuffer, config: MelConfig) -> MelSpectrogram:
    """Natural-log mel spectrogram of a waveform.

    The signal is reflection-padded by n_fft // 2 on both sides so frame t is
    centered on sample t * hop; each frame is windowed with a periodic Hann of
    length win (zero-padded to n_fft), transformed, reduced to its magnitude
    spectrum, projected through the filterbank, and floored before the log.

    Returns exactly floor(len(audio) / hop) + 1 frames.
    """
    if audio.sample_rate != config.sample_rate:
        raise ConfigError(
            f"audio is {audio.sample_rate} Hz but config expects {config.sample_rate} Hz; "
            "resampling is out of scope"
        )
    x = audio.samples
    n = x.shape[0]
    if n == 0:
        raise InputError("audio must be non-empty")
    pad = config.n_fft // 2
    if n < pad + 1:
        raise InputError(f"audio must be at least n_fft // 2 + 1 = {pad + 1} samples long")

    padded = np.pad(x, pad, mode="reflect")
    window = np.zeros(config.n_fft, dtype=np.float64)
    offset = (config.n_fft - config.win) // 2
    window[offset : offset + config.win] = _hann_periodic(config.win)

    n_frames = frame_count(n, config.hop)
    frames = np.empty((n_frames, config.n_fft), dtype=np.float64)
    for t in range(n_frames):
        start = t * config.hop
        frames[t] = padded[start : start + config.n_fft] * window

    magnitude = np.abs(np.fft.rfft(frames, axis=1))
    mel = magnitude @ mel_filterbank(config).T
    return MelSpectrogram(np.log(np.maximum(mel, config.log_floor)), config)


# ---------------------------------------------------------------------------
# waveform files (16-bit PCM mono WAV)


def load_wav(path) -> AudioBuffer:
    """Read a mono 16-bit PCM WAV file; samples are divided by 32768.0."""
    path = Path(path)
    with wave.open(str(path), "rb") as wf:
        if wf.getnchannels() != 1:
            raise InputError(f"{path}: expected mono audio, got {wf.getnchannels()} channels")
        if wf.getsampwidth() != 2:
            raise InputError(f"{path}: expected 16-bit PCM, got {8 * wf.getsampwidth()}-bit")
        if wf.getcomptype() != "NONE":
            raise InputError(f"{path}: compressed WAV not supported")
        rate = wf.getframerate()
        raw = wf.readframes(wf.getnframes())
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    return AudioBuffer(samples, rate)


def save_wav(path, audio: AudioBuffer) -> None:
    """Write a mono 16-bit PCM WAV file.

    Uses the same 1/32768 scale as :func:`load_wav` so a round trip moves a
    sample by at most half a quantization step (one full step at +1.0, which
    clips to the top PCM code).
    """
    pcm = np.clip(np.round(audio.samples * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(audio.sample_rate)
        wf.writeframes(pcm.tobytes())


# ---------------------------------------------------------------------------
# mel feature files: one JSON header line, then raw little-endian float32


def save_mel(path, mel: MelSpectrogram) -> None:
    """Serialize a mel spectrogram: JSON header line + row-major float32."""
    cfg = mel.config
    header = {
        "version": _MEL_FILE_VERSION,
        "n_mels": cfg.n_mels,
        "hop": cfg.hop,
        "win": cfg.win,
        "n_fft": cfg.n_fft,
        "sample_rate": cfg.sample_rate,
        "fmin": cfg.fmin,
        "fmax": cfg.fmax,
        "frames": mel.frames.shape[0],
    }
    with open(path, "wb") as f:
        f.write(json.dumps(header, sort_keys=True).encode("utf-8"))
        f.write(b"\n")
        f.write(np.ascontiguousarray(mel.frames, dtype="<f4").tobytes())


def load_mel(path, log_floor: float = MelConfig.log_floor) -> MelSpectrogram:
    """Read a mel feature file written by :func:`save_mel`.

    The header does not record the log floor, so callers may supply the one
    their pipeline uses; it defaults to the canonical value.
    """
    path = Path(path)
    with open(path, "rb") as f:
        header_line = f.readline()
        body = f.read()
    try:
        header = json.loads(header_line.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise InputError(f"{path}: malformed mel header: {exc}") from exc
    if header.get("version") != _MEL_FILE_VERSION:
        raise InputError(
            f"{path}: unknown mel file version {header.get('version')!r}; "
            f"this reader supports version {_MEL_FILE_VERSION}"
        )
    try:
        config = MelConfig(
            sample_rate=int(header["sample_rate"]),
            n_fft=int(header["n_fft"]),
            hop=int(header["hop"]),
            win=int(header["win"]),
            n_mels=int(header["n_mels"]),
            fmin=float(header["fmin"]),
            fmax=float(header["fmax"]),
            log_floor=log_floor,
        )
        n_frames = int(header["frames"])
    except KeyError as exc:
        raise InputError(f"{path}: mel header missing field {exc}") from exc
    expected = n_frames * config.n_mels * 4
    if len(body) != expected:
        raise InputError(
            f"{path}: mel payload is {len(body)} bytes, expected {expected} "
            f"({n_frames} frames x {config.n_mels} bands)"
        )
    frames = np.frombuffer(body, dtype="<f4").reshape(n_frames, config.n_mels)
    return MelSpectrogram(frames.astype(np.float64), config)
