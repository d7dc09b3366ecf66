"""Utterance- and speaker-level intuitive prosodic features.

A prosody vector is ``(pitch, pitch_range, speech_rate, energy)``:

* pitch        -- mean natural-log F0 over voiced frames
* pitch_range  -- spread of voiced log-F0 after trimming 5 % at each end
* speech_rate  -- mean phone duration in seconds (silence excluded)
* energy       -- mean frame RMS over non-silent frames
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .dsp import AudioBuffer, EnergyTrack, FrameConfig, energy_track
from .errors import (AllSilent, EmptyList, NoPhones, NoVoicedFrames, ParseError,
                     ProsodyneError, retag)
from .pitch import PitchConfig, PitchTrack, estimate_pitch, voiced_log_f0

FEATURE_NAMES = ("pitch", "pitch_range", "speech_rate", "energy")
DEFAULT_SILENCE_LABELS = frozenset({"sil", "sp", "spn", ""})


@dataclass(frozen=True)
class Alignment:
    entries: tuple  # of (label, start_s, end_s)
    silence_labels: frozenset = DEFAULT_SILENCE_LABELS

    def __post_init__(self):
        entries = tuple((str(lab), float(s), float(e)) for lab, s, e in self.entries)
        for i, (lab, s, e) in enumerate(entries):
            if not e > s:
                raise ParseError(f"entry {i} ({lab!r}) has end {e} <= start {s}")
            if i and entries[i - 1][2] > s + 1e-9:
                raise ParseError(f"entry {i} ({lab!r}) overlaps its predecessor")
        object.__setattr__(self, "entries", entries)
        object.__setattr__(self, "silence_labels", frozenset(self.silence_labels))

    def __len__(self):
        return len(self.entries)

    def phones(self) -> list[tuple[str, float, float]]:
        return [e for e in self.entries if e[0].strip().lower() not in self.silence_labels]


def read_alignment(path, silence_labels: Iterable[str] = DEFAULT_SILENCE_LABELS) -> Alignment:
    """Parse ``phone<TAB>start_s<TAB>end_s`` lines; ``#`` lines are comments."""
    entries = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\r\n")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise ParseError(f"{path}:{lineno}: expected 3 tab-separated fields")
            try:
                entries.append((parts[0], float(parts[1]), float(parts[2])))
            except ValueError as exc:
                raise ParseError(f"{path}:{lineno}: {exc}") from exc
    return Alignment(tuple(entries), frozenset(silence_labels))


def write_alignment(path, align: Alignment) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for lab, s, e in align.entries:
            fh.write(f"{lab}\t{s!r}\t{e!r}\n")


@dataclass(frozen=True)
class ProsodyVector:
    pitch: float
    pitch_range: float
    speech_rate: float
    energy: float

    def __post_init__(self):
        if not all(math.isfinite(v) for v in self.as_tuple()):
            raise ValueError(f"non-finite prosody vector {self.as_tuple()}")

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.pitch, self.pitch_range, self.speech_rate, self.energy)

    def as_array(self) -> np.ndarray:
        return np.array(self.as_tuple(), dtype=np.float64)

    @classmethod
    def from_array(cls, values) -> "ProsodyVector":
        values = [float(v) for v in values]
        if len(values) != 4:
            raise ValueError("a prosody vector has exactly 4 components")
        return cls(*values)


@dataclass(frozen=True)
class SpeakerProsody:
    speaker_id: str
    vector: ProsodyVector
    n_utterances: int = field(default=1)


@dataclass(frozen=True)
class ExtractionConfig:
    frame: FrameConfig = FrameConfig()
    pitch: PitchConfig = PitchConfig()
    trim_fraction: float = 0.05
    silence_threshold_db: float = 40.0


# ---------------------------------------------------------------------------
# the four features
# ---------------------------------------------------------------------------

def utterance_pitch(track: PitchTrack) -> float:
    logs = voiced_log_f0(track)
    if logs.size == 0:
        raise NoVoicedFrames("pitch track has no voiced frames")
    return float(np.mean(logs))


def trim_count(n: int, trim_fraction: float) -> int:
    # the epsilon keeps e.g. 0.05 * 60 from flooring to 2 on representation error
    return int(math.floor(trim_fraction * n + 1e-9))


def utterance_pitch_range(track: PitchTrack, trim_fraction: float = 0.05) -> float:
    logs = np.sort(voiced_log_f0(track))
    n = logs.size
    if n == 0:
        raise NoVoicedFrames("pitch track has no voiced frames")
    if not 0 <= trim_fraction < 0.5:
        raise ValueError("trim_fraction must lie in [0, 0.5)")
    k = trim_count(n, trim_fraction)
    if n <= 2 * k + 1:
        return 0.0
    return float(logs[n - 1 - k] - logs[k])


def utterance_speech_rate(align: Alignment) -> float:
    phones = align.phones()
    if not phones:
        raise NoPhones("alignment contains no non-silence phones")
    return float(np.mean([e - s for _, s, e in phones]))


def utterance_energy(etrack: EnergyTrack) -> float:
    keep = ~etrack.silence_mask
    if not keep.any():
        raise AllSilent("every frame is below the silence threshold")
    return float(np.mean(etrack.values[keep]))


def extract_utterance_prosody(audio: AudioBuffer, align: Alignment,
                              cfg: ExtractionConfig = ExtractionConfig(),
                              track: PitchTrack | None = None,
                              etrack: EnergyTrack | None = None) -> ProsodyVector:
    """Compute all four features. Errors are re-raised tagged with the failing feature."""
    if track is None:
        track = estimate_pitch(audio, cfg.pitch, cfg.frame)
    if etrack is None:
        etrack = energy_track(audio, cfg.frame, cfg.silence_threshold_db)
    steps = (
        ("pitch", lambda: utterance_pitch(track)),
        ("pitch_range", lambda: utterance_pitch_range(track, cfg.trim_fraction)),
        ("speech_rate", lambda: utterance_speech_rate(align)),
        ("energy", lambda: utterance_energy(etrack)),
    )
    values = []
    for name, fn in steps:
        try:
            values.append(fn())
        except ProsodyneError as exc:
            raise retag(exc, name) from exc
    return ProsodyVector(*values)


# ---------------------------------------------------------------------------
# speaker level
# ---------------------------------------------------------------------------

def _canonical_mean(rows: np.ndarray) -> np.ndarray:
    """Mean of rows that is exact for identical rows and order-free.

    Rows are shifted by the first row; ``math.fsum`` makes the sum of the
    deviations independent of summation order.
    """
    ref = rows[0]
    dev = rows - ref
    n = rows.shape[0]
    return np.array([ref[c] + math.fsum(dev[:, c]) / n for c in range(rows.shape[1])])


def aggregate_speaker_prosody(vectors: Sequence[ProsodyVector], speaker_id: str,
                              utterance_ids: Sequence[str] | None = None) -> SpeakerProsody:
    """Componentwise mean of utterance vectors, reduced in canonical order."""
    if not vectors:
        raise EmptyList(f"speaker {speaker_id!r} has no utterance vectors")
    if utterance_ids is not None and len(utterance_ids) != len(vectors):
        raise ValueError("utterance_ids must match vectors one-to-one")
    ids = utterance_ids if utterance_ids is not None else [""] * len(vectors)
    order = sorted(range(len(vectors)), key=lambda i: (ids[i], vectors[i].as_tuple()))
    rows = np.array([vectors[i].as_tuple() for i in order], dtype=np.float64)
    return SpeakerProsody(speaker_id, ProsodyVector.from_array(_canonical_mean(rows)),
                          len(vectors))


# ---------------------------------------------------------------------------
# CSV I/O
# ---------------------------------------------------------------------------

def _fmt(v: float) -> str:
    return repr(float(v))


def write_prosody_csv(path, rows: Iterable[tuple[str, ProsodyVector]]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["utterance_id", *FEATURE_NAMES])
        for utt, vec in rows:
            w.writerow([utt, *map(_fmt, vec.as_tuple())])


def read_prosody_csv(path) -> dict[str, ProsodyVector]:
    out = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or list(reader.fieldnames[:5]) != ["utterance_id", *FEATURE_NAMES]:
            raise ParseError(f"{path}: unexpected header {reader.fieldnames}")
        for row in reader:
            out[row["utterance_id"]] = ProsodyVector(*(float(row[k]) for k in FEATURE_NAMES))
    return out


def write_speaker_csv(path, speakers: Iterable[SpeakerProsody]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["speaker_id", *FEATURE_NAMES, "n_utterances"])
        for sp in speakers:
            w.writerow([sp.speaker_id, *map(_fmt, sp.vector.as_tuple()), sp.n_utterances])


def read_speaker_csv(path) -> dict[str, SpeakerProsody]:
    out = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            vec = ProsodyVector(*(float(row[k]) for k in FEATURE_NAMES))
            out[row["speaker_id"]] = SpeakerProsody(row["speaker_id"], vec,
                                                    int(row["n_utterances"]))
    return out
