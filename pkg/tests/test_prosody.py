import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from prosodyne.dsp import AudioBuffer, EnergyTrack, energy_track
from prosodyne.errors import AllSilent, EmptyList, NoPhones, NoVoicedFrames, ParseError
from prosodyne.pitch import PitchTrack
from prosodyne.prosody import (Alignment, ProsodyVector, SpeakerProsody, aggregate_speaker_prosody,
                               extract_utterance_prosody, read_alignment, read_prosody_csv,
                               read_speaker_csv, trim_count, utterance_energy, utterance_pitch,
                               utterance_pitch_range, utterance_speech_rate, write_alignment,
                               write_prosody_csv, write_speaker_csv)

from conftest import SR, tone


def etrack(values, mask):
    return EnergyTrack(np.asarray(values, float), np.asarray(mask, bool))


# -- oracles --------------------------------------------------------------------

def oracle_pitch_range(f0, frac):
    logs = sorted(math.log(f) for f in f0 if f > 0)
    n = len(logs)
    k = int(frac * n + 1e-9)
    return 0.0 if n <= 2 * k + 1 else logs[n - 1 - k] - logs[k]


def two_pass_mean(xs):
    xs = list(xs)
    m = sum(xs) / len(xs)
    return m + sum(x - m for x in xs) / len(xs)


def test_pitch_examples():
    assert utterance_pitch(PitchTrack.from_f0(np.full(40, 220.0))) == pytest.approx(5.3936, abs=1e-4)
    half = PitchTrack.from_f0(np.array([100.0] * 10 + [400.0] * 10))
    assert abs(utterance_pitch(half) - math.log(200)) <= 1e-12
    with pytest.raises(NoVoicedFrames):
        utterance_pitch(PitchTrack.from_f0(np.zeros(4)))


def test_pitch_range_examples():
    ramp = PitchTrack.from_f0(np.exp(np.arange(1, 101, dtype=float)))
    assert utterance_pitch_range(ramp, 0.05) == pytest.approx(89.0, abs=1e-9)
    track20 = PitchTrack.from_f0(np.exp(np.arange(1, 21, dtype=float)))
    assert utterance_pitch_range(track20, 0.05) == pytest.approx(19.0 - 2.0, abs=1e-9)
    assert utterance_pitch_range(PitchTrack.from_f0(np.full(33, 150.0))) == 0.0
    assert utterance_pitch_range(ramp, 0.0) == pytest.approx(99.0, abs=1e-9)


@pytest.mark.parametrize("n,frac,k", [(100, 0.05, 5), (60, 0.05, 3), (19, 0.05, 0),
                                      (20, 0.05, 1), (10, 0.1, 1), (3, 0.3, 0)])
def test_trim_count(n, frac, k):
    assert trim_count(n, frac) == k


def test_speech_rate_examples():
    a = Alignment((("a", 0.0, 0.1), ("b", 0.1, 0.3), ("c", 0.3, 0.6)))
    assert utterance_speech_rate(a) == pytest.approx(0.2, abs=1e-12)
    b = Alignment((("sil", 0.0, 2.0), ("x", 2.0, 2.15)))
    assert utterance_speech_rate(b) == pytest.approx(0.15, abs=1e-12)
    with pytest.raises(NoPhones):
        utterance_speech_rate(Alignment((("sil", 0.0, 1.0), ("sp", 1.0, 1.2))))


def test_energy_examples():
    assert utterance_energy(etrack([0.5] * 5, [False] * 5)) == 0.5
    assert utterance_energy(etrack([0.5, 0.0, 0.5], [False, True, False])) == 0.5
    with pytest.raises(AllSilent):
        utterance_energy(etrack([0.0, 0.0], [True, True]))


def test_random_tracks_match_oracles():
    rng = np.random.default_rng(2024)
    for _ in range(100):
        n = int(rng.integers(1, 300))
        f0 = np.where(rng.random(n) < 0.7, rng.uniform(60, 500, n), 0.0)
        f0[rng.integers(n)] = rng.uniform(60, 500)
        track = PitchTrack.from_f0(f0)
        voiced_logs = [math.log(f) for f in f0 if f > 0]
        assert abs(utterance_pitch(track) - two_pass_mean(voiced_logs)) <= 1e-12
        assert abs(utterance_pitch_range(track) - oracle_pitch_range(f0, 0.05)) <= 1e-12

        durs = rng.uniform(0.05, 0.3, int(rng.integers(1, 60)))
        ends = np.cumsum(durs)
        align = Alignment(tuple((f"p{i}", e - d, e) for i, (d, e) in enumerate(zip(durs, ends))))
        expect = two_pass_mean(e - s for _, s, e in align.entries)
        assert abs(utterance_speech_rate(align) - expect) <= 1e-12

        vals = rng.uniform(0, 1, n)
        mask = rng.random(n) < 0.3
        mask[0] = False
        assert abs(utterance_energy(etrack(vals, mask)) - two_pass_mean(vals[~mask])) <= 1e-12


@given(st.lists(st.floats(60, 500), min_size=1, max_size=80), st.floats(0, 0.49))
def test_pitch_range_nonnegative_and_bounded(f0, frac):
    track = PitchTrack.from_f0(np.array(f0))
    r = utterance_pitch_range(track, frac)
    logs = np.log(f0)
    assert 0.0 <= r <= logs.max() - logs.min() + 1e-12


# -- end to end -------------------------------------------------------------------

def test_tone_end_to_end():
    audio = tone(220.0, 3.0, amp=0.5)
    vec = extract_utterance_prosody(audio, Alignment((("a", 0.0, 3.0),)))
    assert abs(vec.pitch - math.log(220)) < 0.01
    assert 0 <= vec.pitch_range <= 0.05
    assert vec.speech_rate == pytest.approx(3.0)
    assert abs(vec.energy - 0.5 / math.sqrt(2)) <= 1e-3


def test_chirp_end_to_end_pitch():
    f1, f2, dur = 150.0, 250.0, 3.0
    t = np.arange(int(dur * SR)) / SR
    rate = (f2 - f1) / dur
    audio = AudioBuffer(0.5 * np.sin(2 * np.pi * (f1 * t + 0.5 * rate * t * t)), SR)
    vec = extract_utterance_prosody(audio, Alignment((("a", 0.0, dur),)))
    # mean of ln f over a linear sweep: [f ln f - f] / (f2 - f1)
    expect = ((f2 * math.log(f2) - f2) - (f1 * math.log(f1) - f1)) / (f2 - f1)
    assert abs(vec.pitch - expect) <= 0.02


def test_half_tone_half_silence_energy():
    x = np.concatenate([tone(250.0, 1.0, amp=0.6).samples, np.zeros(SR)])
    audio = AudioBuffer(x, SR)
    vec = extract_utterance_prosody(audio, Alignment((("a", 0.0, 1.0),)))
    et = energy_track(audio)
    inside = (np.arange(len(et.values)) * 200 + 800) <= SR
    assert abs(et.values[inside].mean() - 0.6 / math.sqrt(2)) <= 1e-3
    # frames straddling the edge are quieter but still above the threshold
    assert vec.energy == pytest.approx(two_pass_mean(et.values[~et.silence_mask]), abs=1e-12)
    assert vec.energy < 0.6 / math.sqrt(2)


def test_low_vs_high_voice_pitch_gap():
    a = extract_utterance_prosody(tone(120.0, 2.0), Alignment((("a", 0.0, 2.0),)))
    b = extract_utterance_prosody(tone(300.0, 2.0), Alignment((("a", 0.0, 2.0),)))
    assert abs((b.pitch - a.pitch) - math.log(300 / 120)) <= 0.01


@pytest.mark.parametrize("gain", [0.25, 0.5, 1.8])
def test_gain_invariance_of_pitch_features(gain):
    base = tone(180.0, 2.0, amp=0.5)
    align = Alignment((("a", 0.0, 2.0),))
    a = extract_utterance_prosody(base, align)
    b = extract_utterance_prosody(base.scaled(gain), align)
    assert abs(a.pitch - b.pitch) <= 1e-3
    assert abs(a.pitch_range - b.pitch_range) <= 1e-3
    assert b.energy == pytest.approx(gain * a.energy, rel=1e-9)


def test_zero_signal_errors_are_tagged():
    with pytest.raises((AllSilent, NoVoicedFrames)) as info:
        extract_utterance_prosody(AudioBuffer(np.zeros(SR), SR), Alignment((("a", 0.0, 1.0),)))
    assert info.value.tag == "pitch"
    with pytest.raises(NoPhones) as info:
        extract_utterance_prosody(tone(200.0), Alignment((("sil", 0.0, 1.0),)))
    assert info.value.tag == "speech_rate"


# -- aggregation ----------------------------------------------------------------

def test_aggregate_examples():
    v = ProsodyVector(5.0, 0.3, 0.12, 0.2)
    assert aggregate_speaker_prosody([v], "s").vector == v
    pair = aggregate_speaker_prosody([ProsodyVector(1, 2, 3, 4), ProsodyVector(3, 4, 5, 6)], "s")
    assert pair.vector.as_tuple() == (2, 3, 4, 5) and pair.n_utterances == 2
    with pytest.raises(EmptyList):
        aggregate_speaker_prosody([], "s")


def test_aggregate_80_random_matches_two_pass(rng):
    rows = rng.uniform(0, 6, (80, 4))
    got = aggregate_speaker_prosody([ProsodyVector(*r) for r in rows], "s").vector.as_array()
    for c in range(4):
        assert abs(got[c] - two_pass_mean(rows[:, c])) <= 1e-12


finite = st.floats(-1e3, 1e3, allow_nan=False)
vectors = st.lists(st.tuples(finite, finite, finite, finite), min_size=1, max_size=25)


@given(st.tuples(finite, finite, finite, finite), st.integers(1, 200))
def test_identical_vectors_aggregate_exactly(row, n):
    v = ProsodyVector(*row)
    assert aggregate_speaker_prosody([v] * n, "s").vector.as_tuple() == v.as_tuple()


@given(vectors, st.randoms(use_true_random=False))
def test_aggregate_permutation_invariant(rows, rnd):
    vecs = [ProsodyVector(*r) for r in rows]
    ids = [f"u{i:03d}" for i in range(len(vecs))]
    order = list(range(len(vecs)))
    rnd.shuffle(order)
    a = aggregate_speaker_prosody(vecs, "s", ids)
    b = aggregate_speaker_prosody([vecs[i] for i in order], "s", [ids[i] for i in order])
    assert a.vector.as_tuple() == b.vector.as_tuple()
    c = aggregate_speaker_prosody(vecs, "s")
    d = aggregate_speaker_prosody([vecs[i] for i in order], "s")
    assert c.vector.as_tuple() == d.vector.as_tuple()


# -- file formats -------------------------------------------------------------------

def test_alignment_round_trip_and_comments(tmp_path):
    path = tmp_path / "a.tsv"
    path.write_text("# header\nsil\t0.0\t0.2\n\nn\t0.2\t0.31\ni\t0.31\t0.5\n", encoding="utf-8")
    align = read_alignment(path)
    assert len(align) == 3 and [e[0] for e in align.phones()] == ["n", "i"]
    write_alignment(tmp_path / "b.tsv", align)
    assert read_alignment(tmp_path / "b.tsv").entries == align.entries


@pytest.mark.parametrize("body", ["a\t0.0\n", "a\t0.0\tx\n", "a\t0.5\t0.2\n",
                                  "a\t0.0\t0.5\nb\t0.4\t0.6\n"])
def test_alignment_parse_errors(tmp_path, body):
    path = tmp_path / "bad.tsv"
    path.write_text(body, encoding="utf-8")
    with pytest.raises(ParseError):
        read_alignment(path)


def test_prosody_csv_round_trips(tmp_path, rng):
    rows = [(f"u{i}", ProsodyVector(*rng.uniform(0, 5, 4))) for i in range(10)]
    write_prosody_csv(tmp_path / "p.csv", rows)
    assert read_prosody_csv(tmp_path / "p.csv") == dict(rows)
    assert (tmp_path / "p.csv").read_text().splitlines()[0] == \
        "utterance_id,pitch,pitch_range,speech_rate,energy"
    spk = [SpeakerProsody("a", rows[0][1], 3), SpeakerProsody("b", rows[1][1], 1)]
    write_speaker_csv(tmp_path / "s.csv", spk)
    assert list(read_speaker_csv(tmp_path / "s.csv").values()) == spk


def test_prosody_csv_rejects_bad_header(tmp_path):
    (tmp_path / "p.csv").write_text("id,a,b\nx,1,2\n")
    with pytest.raises(ParseError):
        read_prosody_csv(tmp_path / "p.csv")


def test_prosody_vector_rejects_non_finite():
    with pytest.raises(ValueError):
        ProsodyVector(float("nan"), 0, 0, 0)
