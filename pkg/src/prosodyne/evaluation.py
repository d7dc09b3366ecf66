"""Objective evaluation: MCCs, DTW alignment, MCD and F0 RMSE."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass
from functools import lru_cache
from typing import Sequence

import numpy as np
from scipy.fft import dct

from .dsp import (MEL_FLOOR, AudioBuffer, FrameConfig, MelSpectrogram, load_wav,
                  mel_spectrogram)
from .errors import (DimensionMismatch, EmptySequence, InvalidPath, NoVoicedOverlap,
                     ProsodyneError, UnsupportedFormat, retag)
from .pitch import PitchConfig, PitchTrack, estimate_pitch

N_MCC = 25
MCD_CONST = 10.0 / math.log(10.0) * math.sqrt(2.0)


@dataclass(frozen=True)
class MccSequence:
    frames: np.ndarray  # T x 25
    frame_shift_s: float = 0.0125

    def __post_init__(self):
        f = np.asarray(self.frames, dtype=np.float64)
        if f.ndim != 2 or f.shape[1] != N_MCC:
            raise DimensionMismatch(f"MCC frames must be T x {N_MCC}, got {f.shape}")
        object.__setattr__(self, "frames", f)

    def __len__(self):
        return self.frames.shape[0]


@dataclass(frozen=True)
class EvalReport:
    mcd_db: float
    f0_rmse_hz: float
    n_aligned_frames: int
    n_voiced_both: int


def mcc(spec: MelSpectrogram) -> MccSequence:
    """Orthonormal DCT-II of each log-mel frame, coefficients 0..24."""
    logmel = spec.frames if spec.is_log else np.log(np.maximum(spec.frames, MEL_FLOOR))
    if logmel.shape[1] < N_MCC:
        raise DimensionMismatch(f"need at least {N_MCC} mel bands")
    coeffs = dct(logmel, type=2, norm="ortho", axis=1)[:, :N_MCC]
    return MccSequence(coeffs, spec.frame_shift_s)


def _frames(x) -> np.ndarray:
    return x.frames if isinstance(x, MccSequence) else np.asarray(x, dtype=np.float64)


def frame_distances(a, b, exclude_c0: bool = True) -> np.ndarray:
    A, B = _frames(a), _frames(b)
    if exclude_c0:
        A, B = A[:, 1:], B[:, 1:]
    diff = A[:, None, :] - B[None, :, :]
    return np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))


def dtw(a, b, exclude_c0: bool = True, band: int | None = None):
    """Optimal monotone alignment with steps (1,0), (0,1), (1,1).

    Returns ``(path, total_cost)`` where cost sums frame distances along the
    path. On ties the traceback prefers the diagonal, then a step in ``a``.
    ``band`` optionally restricts |i - j * T1/T2| to a Sakoe-Chiba width.
    """
    A, B = _frames(a), _frames(b)
    if len(A) == 0 or len(B) == 0:
        raise EmptySequence("dtw needs two non-empty sequences")
    cost = frame_distances(A, B, exclude_c0)
    n, m = cost.shape
    if band is not None:
        ii, jj = np.indices((n, m))
        centre = jj * (n - 1) / max(m - 1, 1)
        cost = np.where(np.abs(ii - centre) <= max(band, abs(n - m)), cost, np.inf)
    inf = math.inf
    rows = [[0.0] + [inf] * m]
    for i in range(1, n + 1):
        prev = rows[-1]
        c = cost[i - 1].tolist()
        row = [inf] * (m + 1)
        left = inf
        for j in range(1, m + 1):
            best = prev[j - 1]
            if prev[j] < best:
                best = prev[j]
            if left < best:
                best = left
            left = row[j] = c[j - 1] + best
        rows.append(row)
    acc = np.array(rows)
    total = float(acc[n, m])
    if not math.isfinite(total):
        raise InvalidPath("no admissible path inside the band")

    path = [(n - 1, m - 1)]
    i, j = n, m
    while (i, j) != (1, 1):
        cands = ((acc[i - 1, j - 1], i - 1, j - 1),
                 (acc[i - 1, j], i - 1, j),
                 (acc[i, j - 1], i, j - 1))
        best = min(c[0] for c in cands)
        for val, pi, pj in cands:
            if val == best:
                i, j = pi, pj
                break
        path.append((i - 1, j - 1))
    path.reverse()
    return path, total


def path_cost(a, b, path, exclude_c0: bool = True) -> float:
    A, B = _frames(a), _frames(b)
    sl = slice(1, None) if exclude_c0 else slice(None)
    return float(sum(np.linalg.norm(A[i, sl] - B[j, sl]) for i, j in path))


def validate_path(path, n: int, m: int) -> None:
    if not path:
        raise InvalidPath("empty path")
    if tuple(path[0]) != (0, 0) or tuple(path[-1]) != (n - 1, m - 1):
        raise InvalidPath(f"path must run from (0, 0) to ({n - 1}, {m - 1})")
    for (i0, j0), (i1, j1) in zip(path, path[1:]):
        if (i1 - i0, j1 - j0) not in ((1, 0), (0, 1), (1, 1)):
            raise InvalidPath(f"illegal step ({i0}, {j0}) -> ({i1}, {j1})")


def mcd(a, b, path, include_c0: bool = False) -> float:
    """Mel-cepstral distortion in dB, averaged over the path."""
    A, B = _frames(a), _frames(b)
    validate_path(path, len(A), len(B))
    idx = np.asarray(path)
    sl = slice(None) if include_c0 else slice(1, None)
    diff = A[idx[:, 0], sl] - B[idx[:, 1], sl]
    return MCD_CONST * float(np.mean(np.sqrt(np.sum(diff * diff, axis=1))))


def f0_rmse_stats(ta: PitchTrack, tb: PitchTrack, path) -> tuple[float, int]:
    validate_path(path, len(ta), len(tb))
    idx = np.asarray(path)
    both = ta.voiced[idx[:, 0]] & tb.voiced[idx[:, 1]]
    if not both.any():
        raise NoVoicedOverlap("no aligned frame pair is voiced in both tracks")
    err = ta.f0_hz[idx[both, 0]] - tb.f0_hz[idx[both, 1]]
    return float(np.sqrt(np.mean(err * err))), int(both.sum())


def f0_rmse(ta: PitchTrack, tb: PitchTrack, path) -> float:
    return f0_rmse_stats(ta, tb, path)[0]


def compare(mel_a: MelSpectrogram, mel_b: MelSpectrogram, track_a: PitchTrack,
            track_b: PitchTrack, include_c0: bool = False,
            band: int | None = None) -> EvalReport:
    """MCC -> DTW -> MCD + F0 RMSE for two analysed signals."""
    ma, mb = mcc(mel_a), mcc(mel_b)
    path, _ = dtw(ma, mb, exclude_c0=not include_c0, band=band)
    dist = mcd(ma, mb, path, include_c0=include_c0)
    rmse, n_both = f0_rmse_stats(track_a, track_b, path)
    return EvalReport(dist, rmse, len(path), n_both)


def evaluate_audio(ref: AudioBuffer, syn: AudioBuffer, fcfg: FrameConfig = FrameConfig(),
                   pcfg: PitchConfig = PitchConfig(), include_c0: bool = False,
                   band: int | None = None) -> EvalReport:
    return compare(mel_spectrogram(ref, fcfg), mel_spectrogram(syn, fcfg),
                   estimate_pitch(ref, pcfg, fcfg), estimate_pitch(syn, pcfg, fcfg),
                   include_c0=include_c0, band=band)


def evaluate_pair(ref_wav, syn_wav, fcfg: FrameConfig = FrameConfig(),
                  pcfg: PitchConfig = PitchConfig(), include_c0: bool = False,
                  band: int | None = None) -> EvalReport:
    audio = []
    for path in (ref_wav, syn_wav):
        try:
            audio.append(load_wav(path))
        except OSError as exc:
            raise UnsupportedFormat(f"{path}: {exc.strerror or exc}", tag=f"load:{path}") from exc
        except ProsodyneError as exc:
            raise type(exc)(Exception.__str__(exc), tag=f"load:{path}") from exc
    try:
        return evaluate_audio(audio[0], audio[1], fcfg, pcfg, include_c0, band)
    except ProsodyneError as exc:
        raise retag(exc, f"analysis:{syn_wav}") from exc


# ---------------------------------------------------------------------------
# F0 from a (predicted) mel spectrogram
# ---------------------------------------------------------------------------

@lru_cache(maxsize=8)
def _harmonic_templates(sr: int, fcfg: FrameConfig, f0_min: float, f0_max: float,
                        steps_per_octave: int, max_band: int):
    from .dsp import mel_filterbank, preemphasis
    from scipy.signal import get_window

    n_oct = math.log2(f0_max / f0_min)
    grid = f0_min * 2.0 ** (np.arange(int(n_oct * steps_per_octave) + 1) / steps_per_octave)
    L = fcfg.length_samples(sr)
    t = np.arange(L + 1) / sr
    window = get_window(fcfg.window, L, fftbins=True)
    fb = mel_filterbank(sr, fcfg.fft_size)
    templates = []
    for f0 in grid:
        k = np.arange(1, int((sr / 2) // f0) + 1)
        x = np.cos(2 * np.pi * np.outer(k, t) * f0).sum(axis=0) / np.sqrt(len(k))
        x = preemphasis(x, fcfg.preemphasis_coeff)[1:]
        mag = np.abs(np.fft.rfft(x * window, fcfg.fft_size))
        templates.append(np.log(np.maximum(fb @ mag, MEL_FLOOR))[:max_band])
    T = np.array(templates)
    T -= T.mean(axis=1, keepdims=True)
    T /= np.linalg.norm(T, axis=1, keepdims=True)
    return grid, T


def mel_f0(spec: MelSpectrogram, sr: int = 16000, fcfg: FrameConfig = FrameConfig(),
           f0_min: float = 60.0, f0_max: float = 500.0, voicing_threshold: float = 0.3,
           steps_per_octave: int = 96, max_band: int = 40) -> PitchTrack:
    """Harmonic-template F0 estimate from a mel spectrogram.

    Each frame's low-band log-mel profile is correlated against mel-projected
    harmonic combs on a log-frequency grid; the best candidate is refined by
    parabolic interpolation. Frames whose best correlation is below
    ``voicing_threshold`` are unvoiced.
    """
    grid, templates = _harmonic_templates(sr, fcfg, float(f0_min), float(f0_max),
                                          steps_per_octave, max_band)
    logmel = spec.to_log().frames[:, :max_band]
    centred = logmel - logmel.mean(axis=1, keepdims=True)
    norms = np.linalg.norm(centred, axis=1)
    safe = np.where(norms > 0, norms, 1.0)
    corr = (centred / safe[:, None]) @ templates.T
    best = np.argmax(corr, axis=1)
    f0 = np.zeros(len(best))
    log_grid = np.log(grid)
    for t, k in enumerate(best):
        if norms[t] == 0 or corr[t, k] < voicing_threshold:
            continue
        lg = log_grid[k]
        if 0 < k < len(grid) - 1:
            a, b, c = corr[t, k - 1], corr[t, k], corr[t, k + 1]
            denom = a - 2 * b + c
            if denom < 0:
                lg += 0.5 * (a - c) / denom * (log_grid[1] - log_grid[0])
        f0[t] = math.exp(lg)
    return PitchTrack.from_f0(f0, spec.frame_shift_s)


# ---------------------------------------------------------------------------
# report files
# ---------------------------------------------------------------------------

REPORT_FIELDS = ("utterance_id", "mcd_db", "f0_rmse_hz", "n_aligned", "n_voiced_both")


def _row(utt: str, rep: EvalReport) -> dict:
    return {"utterance_id": utt, "mcd_db": rep.mcd_db, "f0_rmse_hz": rep.f0_rmse_hz,
            "n_aligned": rep.n_aligned_frames, "n_voiced_both": rep.n_voiced_both}


def summarize(reports: Sequence[tuple[str, EvalReport]]) -> dict:
    if not reports:
        return {"mcd_db": float("nan"), "f0_rmse_hz": float("nan"),
                "n_aligned": 0.0, "n_voiced_both": 0.0}
    return {
        "mcd_db": float(np.mean([r.mcd_db for _, r in reports])),
        "f0_rmse_hz": float(np.mean([r.f0_rmse_hz for _, r in reports])),
        "n_aligned": float(np.mean([r.n_aligned_frames for _, r in reports])),
        "n_voiced_both": float(np.mean([r.n_voiced_both for _, r in reports])),
    }


def write_report_csv(path, reports: Sequence[tuple[str, EvalReport]],
                     failed: Sequence[tuple[str, str]] = ()) -> None:
    reports = sorted(reports, key=lambda r: r[0])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([*REPORT_FIELDS, "status"])
        for utt, rep in reports:
            row = _row(utt, rep)
            w.writerow([utt, repr(row["mcd_db"]), repr(row["f0_rmse_hz"]),
                        row["n_aligned"], row["n_voiced_both"], "ok"])
        for utt, msg in sorted(failed):
            w.writerow([utt, "", "", "", "", "failed: " + msg.replace("\n", " ")])
        s = summarize(reports)
        w.writerow(["__mean__", repr(s["mcd_db"]), repr(s["f0_rmse_hz"]),
                    repr(s["n_aligned"]), repr(s["n_voiced_both"]), "summary"])


def write_report_json(path, reports: Sequence[tuple[str, EvalReport]],
                      failed: Sequence[tuple[str, str]] = ()) -> None:
    reports = sorted(reports, key=lambda r: r[0])
    doc = {
        "pairs": [_row(u, r) for u, r in reports],
        "failed": [{"utterance_id": u, "error": m} for u, m in sorted(failed)],
        "summary": summarize(reports),
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def report_as_dict(rep: EvalReport) -> dict:
    return asdict(rep)
