"""Decoder-input assembly: ``D_in = [E_out; S_tiled; P_tiled]``.

Speaker vectors come either from a file of per-utterance encoder outputs
("encoded") or from a trainable per-speaker table ("embedded").
"""
from __future__ import annotations

import enum
import itertools
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import DimensionMismatch, EmptyList, InvalidLength, ParseError, ZeroVector
from .prosody import FEATURE_NAMES, ProsodyVector


class SpeakerSource(enum.Enum):
    ENCODED = "encoded"
    EMBEDDED = "embedded"


@dataclass(frozen=True)
class SpeakerVector:
    values: np.ndarray
    source: SpeakerSource = SpeakerSource.ENCODED

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 1 or v.size == 0:
            raise DimensionMismatch("speaker vector must be a non-empty 1-D array")
        if not np.all(np.isfinite(v)):
            raise ValueError("speaker vector has non-finite entries")
        object.__setattr__(self, "values", v)

    @property
    def dim(self) -> int:
        return self.values.size


@dataclass(frozen=True)
class FeatureMask:
    keep_pitch: bool = True
    keep_pitch_range: bool = True
    keep_speech_rate: bool = True
    keep_energy: bool = True

    def as_tuple(self) -> tuple[bool, bool, bool, bool]:
        return (self.keep_pitch, self.keep_pitch_range, self.keep_speech_rate, self.keep_energy)

    @property
    def n_kept(self) -> int:
        return sum(self.as_tuple())

    def indices(self) -> np.ndarray:
        return np.nonzero(self.as_tuple())[0]

    def apply(self, p) -> np.ndarray:
        return np.asarray(p, dtype=np.float64)[self.indices()]

    @classmethod
    def all(cls) -> "FeatureMask":
        return cls(True, True, True, True)

    @classmethod
    def none(cls) -> "FeatureMask":
        return cls(False, False, False, False)

    @classmethod
    def without(cls, feature: str) -> "FeatureMask":
        if feature not in FEATURE_NAMES:
            raise ValueError(f"unknown prosodic feature {feature!r}")
        return cls(*(name != feature for name in FEATURE_NAMES))

    @classmethod
    def every(cls) -> list["FeatureMask"]:
        return [cls(*bits) for bits in itertools.product((False, True), repeat=4)]

    def label(self) -> str:
        if self.n_kept == 4:
            return "all"
        if self.n_kept == 0:
            return "none"
        return "+".join(n for n, k in zip(FEATURE_NAMES, self.as_tuple()) if k)

    @classmethod
    def parse(cls, text: str) -> "FeatureMask":
        text = text.strip().lower()
        if text == "all":
            return cls.all()
        if text == "none":
            return cls.none()
        names = {t.strip().replace("-", "_") for t in text.replace(",", "+").split("+")}
        unknown = names - set(FEATURE_NAMES)
        if unknown:
            raise ValueError(f"unknown prosodic feature(s) {sorted(unknown)}")
        return cls(*(n in names for n in FEATURE_NAMES))


def l2_normalize(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    norm = np.linalg.norm(v)
    if not norm > 0:
        raise ZeroVector("cannot L2-normalize a zero vector")
    return v / norm


def tile(v, n: int) -> np.ndarray:
    """Repeat column vector ``v`` ``n`` times: shape (len(v), n)."""
    if n < 1:
        raise InvalidLength(f"tile length must be >= 1, got {n}")
    v = np.asarray(v, dtype=np.float64)
    return np.repeat(v[:, None], n, axis=1)


def prepare_prosody(p, mask: FeatureMask, normalize: bool) -> np.ndarray:
    """Drop masked dimensions, then optionally L2-normalize what is left."""
    arr = p.as_array() if isinstance(p, ProsodyVector) else np.asarray(p, dtype=np.float64)
    if arr.size != 4:
        raise DimensionMismatch(f"prosody vector must have 4 entries, got {arr.size}")
    kept = mask.apply(arr)
    if normalize and kept.size:
        kept = l2_normalize(kept)
    return kept


def assemble(enc: np.ndarray, s, p, mask: FeatureMask = FeatureMask(),
             normalize: bool = True, normalize_speaker: bool | None = None) -> np.ndarray:
    """Stack ``[enc; tile(s); tile(mask(p))]`` into a (d_e + d_s + d_p_eff) x N matrix.

    ``normalize`` applies to both vectors unless ``normalize_speaker`` overrides
    the speaker side.
    """
    enc = np.asarray(enc, dtype=np.float64)
    if enc.ndim != 2 or enc.shape[1] < 1:
        raise DimensionMismatch(f"encoder output must be d_e x N with N >= 1, got {enc.shape}")
    s_vals = s.values if isinstance(s, SpeakerVector) else np.asarray(s, dtype=np.float64)
    if s_vals.ndim != 1:
        raise DimensionMismatch("speaker vector must be 1-D")
    norm_s = normalize if normalize_speaker is None else normalize_speaker
    if norm_s:
        s_vals = l2_normalize(s_vals)
    p_vals = prepare_prosody(p, mask, normalize)
    n = enc.shape[1]
    return np.vstack([enc, tile(s_vals, n), tile(p_vals, n) if p_vals.size else
                      np.empty((0, n))])


def mean_vector(vectors: Sequence) -> np.ndarray:
    rows = np.array([v.values if isinstance(v, SpeakerVector) else
                     (v.as_array() if isinstance(v, ProsodyVector) else v)
                     for v in vectors], dtype=np.float64)
    return rows.mean(axis=0)


def inference_condition(speaker_vectors: Sequence, prosody_vectors: Sequence,
                        mask: FeatureMask = FeatureMask(), normalize: bool = True,
                        normalize_after_average: bool = True):
    """Average the adaptation-set vectors into one conditioning pair.

    Returns ``(s, p)`` as arrays; ``p`` already has masked dimensions removed.
    With ``normalize_after_average`` False the vectors are normalized one by
    one and then averaged.
    """
    if not speaker_vectors or not prosody_vectors:
        raise EmptyList("inference conditioning needs non-empty adaptation lists")
    s_rows = [v.values if isinstance(v, SpeakerVector) else np.asarray(v, dtype=np.float64)
              for v in speaker_vectors]
    p_rows = [prepare_prosody(p, mask, False) for p in prosody_vectors]
    if normalize and not normalize_after_average:
        s_rows = [l2_normalize(v) for v in s_rows]
        p_rows = [l2_normalize(v) if v.size else v for v in p_rows]
    s_mean = np.mean(s_rows, axis=0)
    p_mean = np.mean(p_rows, axis=0) if p_rows[0].size else np.empty(0)
    if normalize and normalize_after_average:
        s_mean = l2_normalize(s_mean)
        if p_mean.size:
            p_mean = l2_normalize(p_mean)
    return s_mean, p_mean


@dataclass
class ProsodyScaler:
    """Per-feature standardization fitted on training vectors."""

    mean: np.ndarray
    scale: np.ndarray

    @classmethod
    def fit(cls, vectors: Iterable[ProsodyVector]) -> "ProsodyScaler":
        rows = np.array([v.as_array() for v in vectors])
        if rows.size == 0:
            raise EmptyList("cannot fit a scaler on no vectors")
        scale = rows.std(axis=0)
        scale[scale == 0] = 1.0
        return cls(rows.mean(axis=0), scale)

    @classmethod
    def identity(cls) -> "ProsodyScaler":
        return cls(np.zeros(4), np.ones(4))

    def transform(self, p) -> np.ndarray:
        arr = p.as_array() if isinstance(p, ProsodyVector) else np.asarray(p, dtype=np.float64)
        return (arr - self.mean) / self.scale


# ---------------------------------------------------------------------------
# speaker-vector files and the embedding table
# ---------------------------------------------------------------------------

def read_vector_file(path) -> dict[str, np.ndarray]:
    """Parse ``dim <d>`` then ``<key> v1 ... vd`` lines."""
    with open(path, encoding="utf-8") as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    if not lines:
        raise ParseError(f"{path}: empty vector file")
    head = lines[0].split()
    if len(head) != 2 or head[0] != "dim":
        raise ParseError(f"{path}: first line must be 'dim <d>'")
    try:
        dim = int(head[1])
    except ValueError as exc:
        raise ParseError(f"{path}: bad dimension {head[1]!r}") from exc
    out = {}
    for lineno, line in enumerate(lines[1:], 2):
        key, *vals = line.split()
        if len(vals) != dim:
            raise DimensionMismatch(f"{path}:{lineno}: {key} has {len(vals)} values, expected {dim}")
        try:
            out[key] = np.array([float(v) for v in vals])
        except ValueError as exc:
            raise ParseError(f"{path}:{lineno}: {exc}") from exc
    return out


def write_vector_file(path, vectors: dict, dim: int | None = None) -> None:
    if dim is None:
        if not vectors:
            raise EmptyList("need dim for an empty vector file")
        dim = len(next(iter(vectors.values())))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"dim {dim}\n")
        for key in sorted(vectors):
            vals = np.asarray(vectors[key].values if isinstance(vectors[key], SpeakerVector)
                              else vectors[key], dtype=np.float64)
            if vals.size != dim:
                raise DimensionMismatch(f"{key} has {vals.size} values, expected {dim}")
            fh.write(key + " " + " ".join(repr(float(v)) for v in vals) + "\n")


def load_speaker_vectors(path) -> dict[str, SpeakerVector]:
    return {k: SpeakerVector(v, SpeakerSource.ENCODED) for k, v in read_vector_file(path).items()}


class EmbeddingTable:
    """Trainable speaker_id -> vector map. Owned by one trainer at a time."""

    def __init__(self, dim: int, vectors: dict[str, np.ndarray] | None = None):
        self.dim = dim
        self._vectors: dict[str, np.ndarray] = {}
        for k, v in (vectors or {}).items():
            self[k] = v

    @classmethod
    def random(cls, speaker_ids: Iterable[str], dim: int, rng: np.random.Generator,
               scale: float = 0.1) -> "EmbeddingTable":
        ids = sorted(speaker_ids)
        return cls(dim, {sid: rng.normal(0.0, scale, dim) for sid in ids})

    def __getitem__(self, speaker_id: str) -> np.ndarray:
        return self._vectors[speaker_id]

    def __setitem__(self, speaker_id: str, value) -> None:
        v = np.array(value, dtype=np.float64)
        if v.shape != (self.dim,):
            raise DimensionMismatch(f"embedding for {speaker_id} has shape {v.shape}")
        self._vectors[speaker_id] = v

    def __contains__(self, speaker_id) -> bool:
        return speaker_id in self._vectors

    def __len__(self):
        return len(self._vectors)

    def ids(self) -> list[str]:
        return sorted(self._vectors)

    def vector(self, speaker_id: str) -> SpeakerVector:
        return SpeakerVector(self._vectors[speaker_id], SpeakerSource.EMBEDDED)

    def mean(self) -> np.ndarray:
        return np.mean([self._vectors[k] for k in self.ids()], axis=0)

    def copy(self) -> "EmbeddingTable":
        return EmbeddingTable(self.dim, {k: v.copy() for k, v in self._vectors.items()})

    def save(self, path) -> None:
        write_vector_file(path, self._vectors, self.dim)

    @classmethod
    def load(cls, path) -> "EmbeddingTable":
        vecs = read_vector_file(path)
        with open(path, encoding="utf-8") as fh:
            dim = int(fh.readline().split()[1])
        return cls(dim, vecs)
