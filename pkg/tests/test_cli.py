import csv
import json
import math
from pathlib import Path

import numpy as np
import pytest

from prosodyne.cli import main, read_manifest
from prosodyne.conditioning import read_vector_file
from prosodyne.dsp import AudioBuffer, write_wav
from prosodyne.errors import ManifestError
from prosodyne.prosody import read_prosody_csv
from prosodyne.toymodel.checkpoint import load_checkpoint

from conftest import tone

SMALL_CFG = Path(__file__).with_name("small.cfg")


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture
def corpus_dir(tmp_path):
    """Three tone utterances from two speakers with alignments and speaker vectors."""
    d = tmp_path / "data"
    (d / "wav").mkdir(parents=True)
    specs = [("u1", "A", 120.0, 0.3), ("u2", "A", 130.0, 0.2), ("u3", "B", 250.0, 0.4)]
    lines = []
    for utt, spk, f0, amp in specs:
        write_wav(d / "wav" / f"{utt}.wav", tone(f0, 1.0, amp=amp))
        (d / "wav" / f"{utt}.lab").write_text(f"sil\t0.0\t0.1\na\t0.1\t0.5\nb\t0.5\t1.0\n")
        lines.append(f"{utt}\t{spk}\twav/{utt}.wav\twav/{utt}.lab")
    (d / "manifest.tsv").write_text("\n".join(lines) + "\n")
    (d / "vectors.txt").write_text("dim 3\nu1 1 0 0\nu2 0 1 0\nu3 0 0 2\n")
    return d


def run(*argv):
    return main([str(a) for a in argv])


def test_extract(corpus_dir, tmp_path):
    out = tmp_path / "out"
    assert run("extract", corpus_dir / "manifest.tsv", "--out", out) == 0
    rows = read_csv(out / "prosody.csv")
    assert [r["utterance_id"] for r in rows] == ["u1", "u2", "u3"]
    assert list(rows[0]) == ["utterance_id", "pitch", "pitch_range", "speech_rate", "energy"]
    for r in rows:
        assert all(math.isfinite(float(r[k])) for k in list(r)[1:])
    assert float(rows[0]["speech_rate"]) == pytest.approx(0.45)
    assert abs(float(rows[2]["pitch"]) - math.log(250)) < 0.01
    pitch = read_csv(out / "pitch" / "u1.csv")
    energy = read_csv(out / "energy" / "u1.csv")
    assert len(pitch) == len(energy) == 77
    assert list(pitch[0]) == ["frame", "f0_hz", "voiced"]
    assert list(energy[0]) == ["frame", "rms", "silent"]


def test_extract_partial_failure(corpus_dir, tmp_path, capsys):
    (corpus_dir / "wav" / "u2.wav").write_bytes(b"garbage")
    out = tmp_path / "out"
    assert run("extract", corpus_dir / "manifest.tsv", "--out", out) == 0
    assert [r["utterance_id"] for r in read_csv(out / "prosody.csv")] == ["u1", "u3"]
    err = capsys.readouterr().err
    assert "skipping u2" in err and "u2.wav" in err


def test_extract_total_failure_and_empty_manifest(corpus_dir, tmp_path):
    for utt in ("u1", "u2", "u3"):
        (corpus_dir / "wav" / f"{utt}.wav").unlink()
    assert run("extract", corpus_dir / "manifest.tsv", "--out", tmp_path / "o") == 2
    (corpus_dir / "empty.tsv").write_text("# nothing\n")
    assert run("extract", corpus_dir / "empty.tsv", "--out", tmp_path / "o") == 2
    with pytest.raises(ManifestError):
        read_manifest(corpus_dir / "empty.tsv")


def test_manifest_validation(tmp_path):
    (tmp_path / "m.tsv").write_text("u1\tA\ta.wav\ta.lab\nu1\tA\tb.wav\tb.lab\n")
    with pytest.raises(ManifestError):
        read_manifest(tmp_path / "m.tsv")
    (tmp_path / "m.tsv").write_text("u1\tA\ta.wav\n")
    with pytest.raises(ManifestError):
        read_manifest(tmp_path / "m.tsv")
    (tmp_path / "m.tsv").write_text("u1\tA\tx/a.wav\ta.lab\tvec7\n")
    row = read_manifest(tmp_path / "m.tsv")[0]
    assert row.wav_path == tmp_path / "x" / "a.wav" and row.vector_id == "vec7"


def test_aggregate(corpus_dir, tmp_path):
    out = tmp_path / "out"
    assert run("extract", corpus_dir / "manifest.tsv", "--out", out) == 0
    assert run("aggregate", out / "prosody.csv", corpus_dir / "manifest.tsv", "--out", out) == 0
    utt = read_prosody_csv(out / "prosody.csv")
    rows = {r["speaker_id"]: r for r in read_csv(out / "speakers.csv")}
    assert rows["A"]["n_utterances"] == "2" and rows["B"]["n_utterances"] == "1"
    for k in ("pitch", "energy"):
        expect = (getattr(utt["u1"], k) + getattr(utt["u2"], k)) / 2
        assert float(rows["A"][k]) == pytest.approx(expect, abs=1e-12)
        assert float(rows["B"][k]) == getattr(utt["u3"], k)


def test_aggregate_many_speakers_matches_oracle(tmp_path):
    rng = np.random.default_rng(166)
    manifest, prosody = [], ["utterance_id,pitch,pitch_range,speech_rate,energy"]
    sums = {}
    for s in range(166):
        for j in range(int(rng.integers(1, 5))):
            vals = rng.uniform(0.01, 6.0, 4)
            utt = f"s{s:03d}_{j}"
            manifest.append(f"{utt}\ts{s:03d}\tx.wav\tx.lab")
            prosody.append(utt + "," + ",".join(repr(float(v)) for v in vals))
            sums.setdefault(f"s{s:03d}", []).append(vals)
    (tmp_path / "m.tsv").write_text("\n".join(manifest) + "\n")
    (tmp_path / "p.csv").write_text("\n".join(prosody) + "\n")
    assert run("aggregate", tmp_path / "p.csv", tmp_path / "m.tsv", "--out", tmp_path) == 0
    rows = read_csv(tmp_path / "speakers.csv")
    assert len(rows) == 166
    for r in rows:
        vals = np.array(sums[r["speaker_id"]])
        for c, k in enumerate(("pitch", "pitch_range", "speech_rate", "energy")):
            assert abs(float(r[k]) - sum(vals[:, c]) / len(vals)) <= 1e-12


def test_aggregate_join_error(corpus_dir, tmp_path):
    (tmp_path / "p.csv").write_text("utterance_id,pitch,pitch_range,speech_rate,energy\n"
                                    "zz,5,0.1,0.1,0.1\n")
    assert run("aggregate", tmp_path / "p.csv", corpus_dir / "manifest.tsv",
               "--out", tmp_path) == 2


def test_condition(corpus_dir, tmp_path):
    out = tmp_path / "out"
    run("extract", corpus_dir / "manifest.tsv", "--out", out)
    cfg = tmp_path / "c.cfg"
    cfg.write_text("mask = pitch+energy\nprosody_standardize = false\n")
    assert run("--config", cfg, "condition", corpus_dir / "manifest.tsv", "--vectors",
               corpus_dir / "vectors.txt", "--prosody", out / "prosody.csv", "--out", out) == 0
    vecs = read_vector_file(out / "condition.txt")
    assert sorted(vecs) == ["u1", "u2", "u3"]
    assert vecs["u3"][:3].tolist() == [0.0, 0.0, 1.0]
    assert abs(np.linalg.norm(vecs["u1"][3:]) - 1.0) <= 1e-12 and vecs["u1"].size == 5
    assert run("--config", cfg, "condition", corpus_dir / "manifest.tsv", "--vectors",
               corpus_dir / "vectors.txt", "--prosody", out / "prosody.csv", "--average",
               "--out", tmp_path / "avg") == 0
    avg = read_vector_file(tmp_path / "avg" / "condition.txt")
    assert sorted(avg) == ["A", "B"]
    assert np.allclose(avg["A"][:3], [math.sqrt(0.5), math.sqrt(0.5), 0.0])


def test_eval(tmp_path):
    write_wav(tmp_path / "a.wav", tone(200.0, 0.6))
    write_wav(tmp_path / "b.wav", tone(210.0, 0.6))
    (tmp_path / "pairs.tsv").write_text("p1\ta.wav\ta.wav\np2\ta.wav\tb.wav\np3\ta.wav\tnope.wav\n")
    assert run("eval", tmp_path / "pairs.tsv", "--out", tmp_path / "o") == 0
    rows = read_csv(tmp_path / "o" / "eval.csv")
    by = {r["utterance_id"]: r for r in rows}
    assert float(by["p1"]["mcd_db"]) == 0.0 and by["p1"]["status"] == "ok"
    assert abs(float(by["p2"]["f0_rmse_hz"]) - 10.0) <= 2.0
    assert by["p3"]["status"].startswith("failed")
    assert float(by["__mean__"]["mcd_db"]) == pytest.approx(
        (float(by["p1"]["mcd_db"]) + float(by["p2"]["mcd_db"])) / 2, abs=1e-12)
    doc = json.loads((tmp_path / "o" / "eval.json").read_text())
    assert [p["utterance_id"] for p in doc["pairs"]] == ["p1", "p2"]
    (tmp_path / "bad.tsv").write_text("p1\tx.wav\ty.wav\n")
    assert run("eval", tmp_path / "bad.tsv", "--out", tmp_path / "o2") == 2


def test_usage_and_config_exit_codes(tmp_path, capsys):
    assert run("frobnicate") == 1
    assert run() == 1
    assert run("extract") == 1
    (tmp_path / "c.cfg").write_text("nonsense_key = 3\n")
    assert run("--config", tmp_path / "c.cfg", "extract", "m.tsv") == 1
    assert run("--config", tmp_path / "missing.cfg", "extract", "m.tsv") == 1


def test_repeat_runs_are_byte_identical(corpus_dir, tmp_path):
    for name in ("a", "b"):
        assert run("--jobs", 3 if name == "a" else 1, "extract", corpus_dir / "manifest.tsv",
                   "--out", tmp_path / name) == 0
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*")
                   if p.is_file())
    assert len(files) == 7
    for f in files:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_train_and_adapt(tmp_path):
    out = tmp_path / "run"
    assert run("--config", SMALL_CFG, "--jobs", 1, "train", "--out", out) == 0
    info = json.loads((out / "train.json").read_text())
    params, table, extra = load_checkpoint(out / "model.ckpt")
    assert table is None and extra["seed"] == 0
    assert len(read_csv(out / "loss.csv")) == 30
    sid = info["heldout"][0]
    assert run("--config", SMALL_CFG, "adapt", out / "model.ckpt", "--speaker", sid,
               "--out", out) == 0
    adapted, _, _ = load_checkpoint(out / f"adapted_{sid}.ckpt")
    assert np.array_equal(adapted.token_emb, params.token_emb)
    assert not np.array_equal(adapted.w2, params.w2)
    report = json.loads((out / f"adapt_{sid}.json").read_text())
    assert report["val_mse_post"] < report["val_mse_pre"]
    assert run("--config", SMALL_CFG, "adapt", out / "model.ckpt", "--speaker", "nobody",
               "--out", out) == 1


def test_train_embedded_mode_seed_flag(tmp_path):
    cfg = tmp_path / "c.cfg"
    cfg.write_text(SMALL_CFG.read_text() + "mode = embedded\nmask = none\n")
    assert run("--config", cfg, "--seed", 3, "train", "--out", tmp_path) == 0
    params, table, extra = load_checkpoint(tmp_path / "model.ckpt")
    assert extra["seed"] == 3 and params.mask.n_kept == 0 and len(table) == 3
