"""Audio I/O, framing, mel spectrogram and frame energies.

All analysis shares one frame grid: frame ``t`` covers samples
``[t * shift, t * shift + length)`` and trailing partial frames are dropped,
so mel, energy and pitch tracks line up index for index.
"""
from __future__ import annotations

import struct
import wave
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.signal import get_window

from .errors import AudioTooShort, EmptyAudio, InvalidConfig, UnsupportedFormat

MEL_FLOOR = 1e-10
N_MELS = 80
MEL_MAGIC = b"PDYNMEL1"


@dataclass(frozen=True)
class AudioBuffer:
    samples: np.ndarray
    sample_rate_hz: int = 16000

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise UnsupportedFormat("audio must be mono (1-D samples)")
        if not np.all(np.isfinite(samples)):
            raise ValueError("audio contains non-finite samples")
        if self.sample_rate_hz <= 0:
            raise InvalidConfig("sample_rate_hz must be positive")
        samples.setflags(write=False)
        object.__setattr__(self, "samples", samples)

    def __len__(self):
        return len(self.samples)

    @property
    def duration_s(self) -> float:
        return len(self.samples) / self.sample_rate_hz

    def scaled(self, gain: float, clip: bool = False) -> "AudioBuffer":
        y = self.samples * gain
        if clip:
            y = np.clip(y, -1.0, 1.0)
        return AudioBuffer(y, self.sample_rate_hz)


@dataclass(frozen=True)
class FrameConfig:
    fft_size: int = 800
    frame_shift_s: float = 0.0125
    frame_length_s: float = 0.050
    window: str = "hann"
    preemphasis_coeff: float = 0.97

    def __post_init__(self):
        if not self.frame_length_s >= self.frame_shift_s > 0:
            raise InvalidConfig("need frame_length_s >= frame_shift_s > 0")
        if self.window != "hann":
            raise InvalidConfig(f"unsupported window {self.window!r}")
        if not 0 <= self.preemphasis_coeff < 1:
            raise InvalidConfig("preemphasis_coeff must lie in [0, 1)")
        if self.fft_size <= 0:
            raise InvalidConfig("fft_size must be positive")

    def shift_samples(self, sr: int) -> int:
        return int(round(self.frame_shift_s * sr))

    def length_samples(self, sr: int) -> int:
        return int(round(self.frame_length_s * sr))

    def validate_for(self, sr: int) -> None:
        if self.fft_size < self.length_samples(sr):
            raise InvalidConfig(
                f"fft_size {self.fft_size} shorter than frame of "
                f"{self.length_samples(sr)} samples at {sr} Hz")


@dataclass(frozen=True)
class MelSpectrogram:
    """``frames`` is T x n_mels; linear magnitudes unless ``is_log``."""

    frames: np.ndarray
    frame_shift_s: float = 0.0125
    is_log: bool = False

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def n_mels(self) -> int:
        return self.frames.shape[1]

    def to_log(self) -> "MelSpectrogram":
        if self.is_log:
            return self
        return MelSpectrogram(np.log(np.maximum(self.frames, MEL_FLOOR)),
                              self.frame_shift_s, is_log=True)

    def to_linear(self) -> "MelSpectrogram":
        if not self.is_log:
            return self
        return MelSpectrogram(np.exp(self.frames), self.frame_shift_s, is_log=False)


@dataclass(frozen=True)
class EnergyTrack:
    values: np.ndarray
    silence_mask: np.ndarray = field(default=None)

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        mask = (np.zeros(len(values), dtype=bool) if self.silence_mask is None
                else np.asarray(self.silence_mask, dtype=bool))
        if mask.shape != values.shape:
            raise ValueError("silence_mask length must equal values length")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "silence_mask", mask)


# ---------------------------------------------------------------------------
# WAV I/O
# ---------------------------------------------------------------------------

def load_wav(path) -> AudioBuffer:
    """Read a 16-bit PCM mono RIFF/WAVE file, scaling samples by 1/32768."""
    path = Path(path)
    try:
        with wave.open(str(path), "rb") as w:
            channels = w.getnchannels()
            width = w.getsampwidth()
            sr = w.getframerate()
            raw = w.readframes(w.getnframes())
    except wave.Error as exc:
        raise UnsupportedFormat(f"{exc}", tag=str(path)) from exc
    except EOFError as exc:
        raise UnsupportedFormat("truncated file", tag=str(path)) from exc
    if channels != 1:
        raise UnsupportedFormat(f"{channels} channels, expected mono", tag=str(path))
    if width != 2:
        raise UnsupportedFormat(f"{8 * width}-bit samples, expected 16-bit",
                                tag=str(path))
    pcm = np.frombuffer(raw, dtype="<i2")
    if pcm.size == 0:
        raise EmptyAudio("no samples", tag=str(path))
    return AudioBuffer(pcm.astype(np.float64) / 32768.0, sr)


def to_pcm16(samples: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(samples) * 32768.0), -32768, 32767).astype("<i2")


def write_wav(path, audio: AudioBuffer) -> None:
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(audio.sample_rate_hz)
        w.writeframes(to_pcm16(audio.samples).tobytes())


# ---------------------------------------------------------------------------
# framing
# ---------------------------------------------------------------------------

def n_frames(n_samples: int, frame_length: int, shift: int) -> int:
    if n_samples < frame_length:
        return 0
    return 1 + (n_samples - frame_length) // shift


def frame_signal(x: np.ndarray, frame_length: int, shift: int) -> np.ndarray:
    """Return a read-only (T, frame_length) view; partial trailing frames dropped."""
    T = n_frames(len(x), frame_length, shift)
    if T == 0:
        raise AudioTooShort(f"{len(x)} samples is shorter than one {frame_length}-sample frame")
    x = np.ascontiguousarray(x)
    return np.lib.stride_tricks.as_strided(
        x, shape=(T, frame_length), strides=(x.strides[0] * shift, x.strides[0]),
        writeable=False)


def audio_frames(audio: AudioBuffer, cfg: FrameConfig) -> np.ndarray:
    sr = audio.sample_rate_hz
    cfg.validate_for(sr)
    if len(audio) == 0:
        raise EmptyAudio("audio buffer is empty")
    return frame_signal(audio.samples, cfg.length_samples(sr), cfg.shift_samples(sr))


def preemphasis(x: np.ndarray, coeff: float = 0.97) -> np.ndarray:
    y = np.array(x, dtype=np.float64)
    y[1:] -= coeff * x[:-1]
    return y


# ---------------------------------------------------------------------------
# mel
# ---------------------------------------------------------------------------

def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_band_edges(sr: int, n_mels: int = N_MELS) -> np.ndarray:
    """n_mels + 2 edge frequencies in Hz, evenly spaced on the HTK mel scale."""
    return mel_to_hz(np.linspace(0.0, hz_to_mel(sr / 2.0), n_mels + 2))


def mel_band_centers(sr: int, n_mels: int = N_MELS) -> np.ndarray:
    return mel_band_edges(sr, n_mels)[1:-1]


def mel_filterbank(sr: int, n_fft: int, n_mels: int = N_MELS) -> np.ndarray:
    """Triangular (peak 1) HTK filterbank of shape (n_mels, n_fft // 2 + 1)."""
    fft_freqs = np.arange(n_fft // 2 + 1) * sr / n_fft
    edges = mel_band_edges(sr, n_mels)
    lower = edges[:-2, None]
    center = edges[1:-1, None]
    upper = edges[2:, None]
    rising = (fft_freqs[None, :] - lower) / (center - lower)
    falling = (upper - fft_freqs[None, :]) / (upper - center)
    return np.maximum(0.0, np.minimum(rising, falling))


def magnitude_spectrogram(audio: AudioBuffer, cfg: FrameConfig) -> np.ndarray:
    sr = audio.sample_rate_hz
    cfg.validate_for(sr)
    emphasized = preemphasis(audio.samples, cfg.preemphasis_coeff)
    frames = frame_signal(emphasized, cfg.length_samples(sr), cfg.shift_samples(sr))
    window = get_window(cfg.window, frames.shape[1], fftbins=True)
    return np.abs(np.fft.rfft(frames * window, n=cfg.fft_size, axis=1))


def mel_spectrogram(audio: AudioBuffer, cfg: FrameConfig = FrameConfig(),
                    n_mels: int = N_MELS) -> MelSpectrogram:
    """Linear-magnitude mel spectrogram (T x n_mels) of pre-emphasized audio."""
    mag = magnitude_spectrogram(audio, cfg)
    fb = mel_filterbank(audio.sample_rate_hz, cfg.fft_size, n_mels)
    return MelSpectrogram(mag @ fb.T, cfg.frame_shift_s, is_log=False)


def log_mel_spectrogram(audio: AudioBuffer, cfg: FrameConfig = FrameConfig()) -> np.ndarray:
    return mel_spectrogram(audio, cfg).to_log().frames


# ---------------------------------------------------------------------------
# energy
# ---------------------------------------------------------------------------

def energy_track(audio: AudioBuffer, cfg: FrameConfig = FrameConfig(),
                 silence_threshold_db: float = 40.0) -> EnergyTrack:
    """Frame RMS of the raw waveform plus a relative-to-peak silence mask."""
    frames = audio_frames(audio, cfg)
    rms = np.sqrt(np.mean(frames * frames, axis=1))
    peak = rms.max()
    if peak == 0.0:
        return EnergyTrack(rms, np.ones(len(rms), dtype=bool))
    with np.errstate(divide="ignore"):
        rel_db = 20.0 * np.log10(rms / peak)
    silent = (rms == 0.0) | (rel_db < -silence_threshold_db)
    return EnergyTrack(rms, silent)


# ---------------------------------------------------------------------------
# binary mel dump
# ---------------------------------------------------------------------------

def write_mel(path, mel: MelSpectrogram) -> None:
    frames = np.asarray(mel.frames, dtype="<f4")
    T, n = frames.shape
    with open(path, "wb") as fh:
        fh.write(MEL_MAGIC)
        fh.write(struct.pack("<II", T, n))
        fh.write(frames.tobytes(order="C"))


def read_mel(path, frame_shift_s: float = 0.0125, is_log: bool = False) -> MelSpectrogram:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != MEL_MAGIC:
        raise UnsupportedFormat(f"{path}: bad mel magic")
    T, n = struct.unpack_from("<II", data, 8)
    body = np.frombuffer(data, dtype="<f4", offset=16)
    if body.size != T * n:
        raise UnsupportedFormat(f"{path}: expected {T * n} floats, found {body.size}")
    return MelSpectrogram(body.reshape(T, n).astype(np.float64), frame_shift_s, is_log)
