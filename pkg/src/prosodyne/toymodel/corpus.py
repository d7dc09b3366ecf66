"""Synthetic multi-speaker corpus.

Each utterance is ``sil, token, ..., token, sil``. A token is a harmonic
segment whose F0 follows a per-token tone contour scaled by the speaker's
pitch spread, and whose spectral envelope has two formants that undershoot
toward a neutral vowel when the phone is short. Speakers differ in base F0,
F0 spread, phone duration and amplitude, so all four prosodic features vary
across speakers and are audible in the mel spectrogram.
"""
from __future__ import annotations

import zlib
from dataclasses import dataclass, field

import numpy as np

from ..dsp import AudioBuffer
from ..errors import InvalidSpec
from ..prosody import Alignment

SIL = "sil"
NEUTRAL_FORMANTS = (500.0, 1500.0)
FORMANT_BANDWIDTHS = (90.0, 130.0)
UNDERSHOOT_TIME_S = 0.06
MAX_HARMONIC_HZ = 7600.0

# tone contours over normalized token time u in [0, 1], in units of the spread
TONES = (
    lambda u: np.ones_like(u),            # high level
    lambda u: -0.6 + 1.6 * u,             # rising
    lambda u: -np.sin(np.pi * u),         # dipping
    lambda u: 1.0 - 2.0 * u,              # falling
)


def rng_stream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for a named stage, derived from one seed."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(zlib.crc32(name.encode()),))
    return np.random.default_rng(ss)


@dataclass(frozen=True)
class SpeakerParams:
    speaker_id: str
    base_f0_hz: float
    f0_spread: float    # log-F0 excursion of the tone contours
    phone_dur_s: float
    amplitude: float


@dataclass(frozen=True)
class ToyCorpusSpec:
    n_speakers: int = 10
    utterances_per_speaker: int = 44
    vocab_size: int = 12                       # including the silence token
    tokens_per_utterance: tuple = (5, 9)       # inclusive range
    sample_rate_hz: int = 16000
    speaker_dim: int = 256
    seed: int = 0
    base_f0_range: tuple = (100.0, 300.0)
    f0_spread_range: tuple = (0.05, 0.25)
    phone_dur_range: tuple = (0.08, 0.20)
    amplitude_range: tuple = (0.05, 0.40)
    edge_silence_s: float = 0.1               # 0 drops the edge silences
    f0_jitter_sigma: float = 0.04              # per-utterance, log domain
    amplitude_jitter_sigma: float = 0.15
    duration_jitter_sigma: float = 0.08
    phone_jitter: float = 0.2                  # per-phone uniform +-fraction
    aspiration: float = 0.15                   # noise relative to the voiced part
    undershoot_time_s: float = 0.06
    speaker_vector_prosody_weight: float = 0.5
    speaker_vector_noise: float = 0.3
    speakers: tuple = field(default=())        # explicit SpeakerParams override

    def validate(self) -> None:
        if self.n_speakers < 1 or self.utterances_per_speaker < 1:
            raise InvalidSpec("n_speakers and utterances_per_speaker must be >= 1")
        if self.vocab_size < 2:
            raise InvalidSpec("vocab_size must leave at least one non-silence token")
        lo, hi = self.tokens_per_utterance
        if not 1 <= lo <= hi:
            raise InvalidSpec("tokens_per_utterance must be a range with 1 <= lo <= hi")
        if self.speakers and len(self.speakers) != self.n_speakers:
            raise InvalidSpec("explicit speakers must match n_speakers")
        for name in ("base_f0_range", "f0_spread_range", "phone_dur_range", "amplitude_range"):
            a, b = getattr(self, name)
            if not 0 < a <= b:
                raise InvalidSpec(f"{name} must satisfy 0 < lo <= hi")
        f0_lo = self.base_f0_range[0] * np.exp(-self.f0_spread_range[1] * 1.2)
        f0_hi = self.base_f0_range[1] * np.exp(self.f0_spread_range[1] * 1.2)
        if f0_lo < 60.0 or f0_hi > 500.0:
            raise InvalidSpec("generated F0 would leave the 60-500 Hz pitch search range")
        if self.amplitude_range[1] * 1.6 > 1.0:
            raise InvalidSpec("amplitude range would clip")

    @property
    def vocab(self) -> list[str]:
        return [SIL] + [f"t{v:02d}" for v in range(1, self.vocab_size)]


@dataclass(frozen=True)
class TokenSpec:
    tone: int
    formants: tuple


@dataclass(frozen=True)
class Utterance:
    utterance_id: str
    speaker_id: str
    tokens: np.ndarray          # vocab ids, one per alignment entry
    alignment: Alignment
    audio: AudioBuffer
    speaker_vector: np.ndarray


@dataclass(frozen=True)
class ToyCorpus:
    spec: ToyCorpusSpec
    speakers: tuple
    token_specs: tuple
    utterances: tuple

    @property
    def vocab(self) -> list[str]:
        return self.spec.vocab

    def by_speaker(self, speaker_id: str) -> list[Utterance]:
        return [u for u in self.utterances if u.speaker_id == speaker_id]

    def speaker(self, speaker_id: str) -> SpeakerParams:
        return next(s for s in self.speakers if s.speaker_id == speaker_id)


def _latin_hypercube(rng: np.random.Generator, n: int, lo: float, hi: float) -> np.ndarray:
    strata = (rng.permutation(n) + rng.uniform(0.0, 1.0, n)) / n
    return lo + (hi - lo) * strata


def draw_speakers(spec: ToyCorpusSpec) -> tuple:
    if spec.speakers:
        return tuple(spec.speakers)
    rng = rng_stream(spec.seed, "speakers")
    n = spec.n_speakers
    f0 = np.exp(_latin_hypercube(rng, n, *np.log(spec.base_f0_range)))
    spread = _latin_hypercube(rng, n, *spec.f0_spread_range)
    dur = _latin_hypercube(rng, n, *spec.phone_dur_range)
    amp = np.exp(_latin_hypercube(rng, n, *np.log(spec.amplitude_range)))
    return tuple(SpeakerParams(f"spk{i:02d}", float(f0[i]), float(spread[i]),
                               float(dur[i]), float(amp[i])) for i in range(n))


def draw_tokens(spec: ToyCorpusSpec) -> tuple:
    rng = rng_stream(spec.seed, "tokens")
    out = [TokenSpec(-1, NEUTRAL_FORMANTS)]
    for v in range(1, spec.vocab_size):
        f1 = rng.uniform(300.0, 850.0)
        f2 = rng.uniform(max(900.0, f1 + 400.0), 2500.0)
        out.append(TokenSpec(v % len(TONES), (float(f1), float(f2))))
    return tuple(out)


def _resonance(f: np.ndarray, centre: np.ndarray, bw: float) -> np.ndarray:
    c2 = centre * centre
    return c2 / np.sqrt((c2 - f * f) ** 2 + (f * bw) ** 2)


def undershoot(target: float, neutral: float, dur_s: float,
               time_s: float = UNDERSHOOT_TIME_S) -> float:
    return neutral + (target - neutral) * (1.0 - np.exp(-dur_s / time_s))


def synthesize(tokens, durations, token_specs, base_f0: float, spread: float,
               amplitude: float, sr: int, rng: np.random.Generator,
               aspiration: float = 0.15, undershoot_s: float = UNDERSHOOT_TIME_S) -> np.ndarray:
    """Render a token sequence (silence token 0 renders as background noise)."""
    bounds = np.round(np.concatenate([[0.0], np.cumsum(durations)]) * sr).astype(int)
    n = bounds[-1]
    f0 = np.empty(n)
    form = np.empty((2, n))
    gain = np.zeros(n)
    last_f0 = base_f0
    for tok, a, b in zip(tokens, bounds[:-1], bounds[1:]):
        ts = token_specs[tok]
        if tok == 0:
            f0[a:b] = last_f0
            form[:, a:b] = np.array(NEUTRAL_FORMANTS)[:, None]
            continue
        u = (np.arange(b - a) + 0.5) / (b - a)
        f0[a:b] = base_f0 * np.exp(spread * TONES[ts.tone](u))
        last_f0 = f0[b - 1]
        dur = (b - a) / sr
        for k in range(2):
            form[k, a:b] = undershoot(ts.formants[k], NEUTRAL_FORMANTS[k], dur, undershoot_s)
        gain[a:b] = amplitude
    # 10 ms raised-cosine ramps wherever voicing switches on or off
    ramp = int(0.01 * sr)
    edges = np.nonzero(np.diff((gain > 0).astype(int)))[0] + 1
    win = 0.5 - 0.5 * np.cos(np.pi * (np.arange(ramp) + 0.5) / ramp)
    for e in edges:
        if gain[e] > 0:
            seg = slice(e, min(e + ramp, n))
            gain[seg] *= win[:seg.stop - seg.start]
        else:
            seg = slice(max(e - ramp, 0), e)
            gain[seg] *= win[::-1][ramp - (seg.stop - seg.start):]

    phase = 2.0 * np.pi * np.cumsum(f0) / sr
    n_harm = int(MAX_HARMONIC_HZ // f0.min())
    # sin(k phase) by the Chebyshev recurrence, one harmonic at a time
    # harmonic amplitudes evaluated on a 0.5 ms grid and held in between
    hop = max(1, sr // 2000)
    coarse = slice(None, None, hop)
    k_all = np.arange(1, n_harm + 1)[:, None]
    freqs = k_all * f0[coarse][None, :]
    amps = (_resonance(freqs, form[0][coarse][None, :], FORMANT_BANDWIDTHS[0])
            * _resonance(freqs, form[1][coarse][None, :], FORMANT_BANDWIDTHS[1]) / k_all)
    amps[freqs > MAX_HARMONIC_HZ] = 0.0
    norm = np.repeat(np.sqrt(0.5 * np.sum(amps * amps, axis=0)), hop)[:n]
    two_cos = 2.0 * np.cos(phase)
    s_prev, s_cur = np.zeros(n), np.sin(phase)
    acc = np.zeros(n)
    for k in range(n_harm):
        acc += np.repeat(amps[k], hop)[:n] * s_cur
        s_prev, s_cur = s_cur, two_cos * s_cur - s_prev
    voiced = acc / norm
    signal = gain * (voiced + aspiration * rng.standard_normal(n))
    signal += 2e-4 * rng.standard_normal(n)
    return signal


def generate_corpus(spec: ToyCorpusSpec = ToyCorpusSpec()) -> ToyCorpus:
    """Deterministic under ``spec.seed``; every stage draws from its own stream."""
    spec.validate()
    speakers = draw_speakers(spec)
    token_specs = draw_tokens(spec)
    sr = spec.sample_rate_hz

    vec_rng = rng_stream(spec.seed, "speaker-vectors")
    d = spec.speaker_dim
    projection = vec_rng.standard_normal((d, 4)) / np.sqrt(d)
    identity = {s.speaker_id: vec_rng.standard_normal(d) / np.sqrt(d) for s in speakers}

    def unit(x, rng_):
        lo, hi = rng_
        return 2.0 * (x - lo) / (hi - lo) - 1.0

    utterances = []
    for sp in speakers:
        rng = rng_stream(spec.seed, f"utterances/{sp.speaker_id}")
        z = np.array([unit(np.log(sp.base_f0_hz), np.log(spec.base_f0_range)),
                      unit(sp.f0_spread, spec.f0_spread_range),
                      unit(sp.phone_dur_s, spec.phone_dur_range),
                      unit(np.log(sp.amplitude), np.log(spec.amplitude_range))])
        centre = identity[sp.speaker_id] + spec.speaker_vector_prosody_weight * projection @ z
        for j in range(spec.utterances_per_speaker):
            n_tok = int(rng.integers(spec.tokens_per_utterance[0], spec.tokens_per_utterance[1] + 1))
            body = rng.integers(1, spec.vocab_size, n_tok)
            f0 = sp.base_f0_hz * np.exp(rng.normal(0.0, spec.f0_jitter_sigma))
            amp = sp.amplitude * np.exp(rng.normal(0.0, spec.amplitude_jitter_sigma))
            amp = min(amp, spec.amplitude_range[1] * 1.5)
            dur = sp.phone_dur_s * np.exp(rng.normal(0.0, spec.duration_jitter_sigma))
            phone = dur * rng.uniform(1.0 - spec.phone_jitter, 1.0 + spec.phone_jitter, n_tok)
            if spec.edge_silence_s > 0:
                tokens = np.concatenate([[0], body, [0]]).astype(np.int64)
                durations = np.concatenate([[spec.edge_silence_s], phone, [spec.edge_silence_s]])
            else:
                tokens, durations = body.astype(np.int64), phone
            samples = synthesize(tokens, durations, token_specs, f0, sp.f0_spread, amp, sr, rng,
                                 spec.aspiration, spec.undershoot_time_s)
            samples = np.clip(samples, -1.0, 1.0)
            bounds = np.round(np.concatenate([[0.0], np.cumsum(durations)]) * sr) / sr
            labels = spec.vocab
            align = Alignment(tuple((labels[t], float(a), float(b))
                                    for t, a, b in zip(tokens, bounds[:-1], bounds[1:])))
            svec = centre + spec.speaker_vector_noise / np.sqrt(d) * rng.standard_normal(d)
            utterances.append(Utterance(f"{sp.speaker_id}_u{j:03d}", sp.speaker_id, tokens,
                                        align, AudioBuffer(samples, sr), svec))
    return ToyCorpus(spec, speakers, token_specs, tuple(utterances))


def alignment_durations(align: Alignment, n_frames: int, frame_shift_s: float,
                        frame_length_s: float) -> np.ndarray:
    """Frames per alignment entry, assigning each frame by its centre time.

    Frames centred past the last entry go to the last entry, so the counts
    always sum to ``n_frames``.
    """
    centres = np.arange(n_frames) * frame_shift_s + frame_length_s / 2.0
    ends = np.array([e for _, _, e in align.entries])
    idx = np.minimum(np.searchsorted(ends, centres, side="right"), len(ends) - 1)
    return np.bincount(idx, minlength=len(ends)).astype(np.int64)


def token_ids(align: Alignment, vocab: list[str]) -> np.ndarray:
    lookup = {lab: i for i, lab in enumerate(vocab)}
    return np.array([lookup[lab] for lab, _, _ in align.entries], dtype=np.int64)
