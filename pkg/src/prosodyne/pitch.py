"""Frame-wise F0 estimation (YIN) on the shared dsp frame grid."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .dsp import AudioBuffer, FrameConfig, audio_frames
from .errors import InvalidConfig


@dataclass(frozen=True)
class PitchConfig:
    f0_min_hz: float = 60.0
    f0_max_hz: float = 500.0
    voicing_threshold: float = 0.15
    median_smoothing: int = 0  # odd window length; 0 disables

    def validate_for(self, sr: int, frame_length: int) -> None:
        if not 0 < self.f0_min_hz < self.f0_max_hz < sr / 2:
            raise InvalidConfig(
                f"need 0 < f0_min ({self.f0_min_hz}) < f0_max ({self.f0_max_hz}) < sr/2")
        if not 0 < self.voicing_threshold < 1:
            raise InvalidConfig("voicing_threshold must lie in (0, 1)")
        if self.median_smoothing < 0 or (self.median_smoothing and self.median_smoothing % 2 == 0):
            raise InvalidConfig("median_smoothing must be 0 or an odd window length")
        if self.max_lag(sr) >= frame_length:
            raise InvalidConfig(
                f"frame of {frame_length} samples cannot hold lag {self.max_lag(sr)}"
                f" (f0_min {self.f0_min_hz} Hz)")

    def min_lag(self, sr: int) -> int:
        return max(2, int(math.floor(sr / self.f0_max_hz)))

    def max_lag(self, sr: int) -> int:
        return int(math.ceil(sr / self.f0_min_hz))


@dataclass(frozen=True)
class PitchTrack:
    f0_hz: np.ndarray
    voiced: np.ndarray
    frame_shift_s: float = 0.0125

    def __post_init__(self):
        f0 = np.asarray(self.f0_hz, dtype=np.float64)
        voiced = np.asarray(self.voiced, dtype=bool)
        if f0.shape != voiced.shape:
            raise ValueError("f0_hz and voiced must have equal length")
        if np.any((f0 > 0) != voiced):
            raise ValueError("f0_hz must be positive exactly on voiced frames")
        object.__setattr__(self, "f0_hz", f0)
        object.__setattr__(self, "voiced", voiced)

    def __len__(self):
        return len(self.f0_hz)

    @classmethod
    def from_f0(cls, f0_hz, frame_shift_s: float = 0.0125) -> "PitchTrack":
        f0 = np.asarray(f0_hz, dtype=np.float64)
        return cls(np.where(f0 > 0, f0, 0.0), f0 > 0, frame_shift_s)


def difference_function(frames: np.ndarray, max_lag: int) -> np.ndarray:
    """YIN difference d(tau) for tau in [0, max_lag], computed for every frame.

    The integration window is the first ``L - max_lag`` samples of each frame,
    so every lag compares equal-length segments inside the frame.
    """
    T, L = frames.shape
    W = L - max_lag
    n_fft = 1 << int(math.ceil(math.log2(L + W)))
    head = frames[:, :W]
    # r[tau] = sum_j head[j] * frame[j + tau]
    spec = np.conj(np.fft.rfft(head, n_fft, axis=1)) * np.fft.rfft(frames, n_fft, axis=1)
    r = np.fft.irfft(spec, n_fft, axis=1)[:, :max_lag + 1]
    sq = frames * frames
    csum = np.concatenate([np.zeros((T, 1)), np.cumsum(sq, axis=1)], axis=1)
    energy_head = csum[:, W][:, None]
    taus = np.arange(max_lag + 1)
    energy_shifted = csum[:, taus + W] - csum[:, taus]
    d = energy_head + energy_shifted - 2.0 * r
    d[:, 0] = 0.0
    return np.maximum(d, 0.0)


def cmnd(d: np.ndarray) -> np.ndarray:
    """Cumulative-mean-normalized difference; 1 where the running mean is zero."""
    out = np.ones_like(d)
    taus = np.arange(1, d.shape[1])
    running = np.cumsum(d[:, 1:], axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        norm = d[:, 1:] * taus / running
    out[:, 1:] = np.where(running > 0, norm, 1.0)
    return out


def _pick_lag(curve: np.ndarray, lo: int, hi: int, threshold: float) -> float | None:
    """First dip below threshold in [lo, hi], walked down to its local minimum."""
    below = np.nonzero(curve[lo:hi + 1] < threshold)[0]
    if below.size == 0:
        return None
    tau = lo + int(below[0])
    while tau + 1 <= hi and curve[tau + 1] < curve[tau]:
        tau += 1
    if 0 < tau < len(curve) - 1:
        a, b, c = curve[tau - 1], curve[tau], curve[tau + 1]
        denom = a - 2.0 * b + c
        if denom > 0:
            shift = 0.5 * (a - c) / denom
            if abs(shift) <= 1.0:
                return tau + shift
    return float(tau)


def estimate_pitch(audio: AudioBuffer, pcfg: PitchConfig = PitchConfig(),
                   fcfg: FrameConfig = FrameConfig()) -> PitchTrack:
    sr = audio.sample_rate_hz
    frames = audio_frames(audio, fcfg)
    pcfg.validate_for(sr, frames.shape[1])
    lo, hi = pcfg.min_lag(sr), pcfg.max_lag(sr)
    curves = cmnd(difference_function(frames, hi))

    f0 = np.zeros(frames.shape[0])
    for t, curve in enumerate(curves):
        lag = _pick_lag(curve, lo, hi, pcfg.voicing_threshold)
        if lag is None or lag <= 0:
            continue
        freq = sr / lag
        if pcfg.f0_min_hz <= freq <= pcfg.f0_max_hz:
            f0[t] = freq

    if pcfg.median_smoothing > 1:
        f0 = median_smooth(f0, pcfg.median_smoothing)
    return PitchTrack.from_f0(f0, fcfg.frame_shift_s)


def median_smooth(f0: np.ndarray, width: int = 3) -> np.ndarray:
    """Median filter over voiced frames only; unvoiced frames stay at 0."""
    out = f0.copy()
    half = width // 2
    for t in np.nonzero(f0 > 0)[0]:
        seg = f0[max(0, t - half):t + half + 1]
        out[t] = np.median(seg[seg > 0])
    return out


def voiced_log_f0(track: PitchTrack) -> np.ndarray:
    return np.log(track.f0_hz[track.voiced])


def write_pitch_csv(path, track: PitchTrack) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["frame", "f0_hz", "voiced"])
        for t, (f, v) in enumerate(zip(track.f0_hz, track.voiced)):
            w.writerow([t, repr(float(f)), int(v)])


def read_pitch_csv(path, frame_shift_s: float = 0.0125) -> PitchTrack:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    f0 = np.array([float(r["f0_hz"]) for r in rows])
    voiced = np.array([r["voiced"] == "1" for r in rows], dtype=bool)
    return PitchTrack(f0, voiced, frame_shift_s)
