"""Four-system comparison and feature ablation on the synthetic corpus.

generate -> extract -> pre-train -> adapt per held-out speaker -> evaluate.
Systems: Baseline-Enc, Baseline-Emb, UPF-Enc (utterance-level prosody with
encoded speakers) and SPF-Emb (speaker-level prosody with embedded speakers),
plus every single-feature ablation and the all-removed variant of the two
prosody systems.
"""
from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .conditioning import (FeatureMask, ProsodyScaler, inference_condition, l2_normalize,
                           prepare_prosody)
from .config import RunConfig
from .dsp import MelSpectrogram, energy_track, mel_spectrogram
from .errors import NoVoicedOverlap
from .evaluation import dtw, mcc, mcd, f0_rmse_stats, mel_f0
from .pitch import PitchTrack, estimate_pitch
from .prosody import (FEATURE_NAMES, ProsodyVector, aggregate_speaker_prosody,
                      extract_utterance_prosody, write_prosody_csv)
from .toymodel.corpus import (ToyCorpus, Utterance, alignment_durations, generate_corpus,
                              rng_stream)
from .toymodel.model import SpeakerMode, TrainItem, predict_frames
from .toymodel.train import TrainResult, adapt, evaluate_loss, pretrain, write_trace_csv

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class UtteranceFeatures:
    utterance: Utterance
    log_mel: np.ndarray          # T x 80
    pitch: PitchTrack
    prosody: ProsodyVector
    durations: np.ndarray        # frames per alignment entry


@dataclass(frozen=True)
class System:
    name: str
    mode: SpeakerMode
    mask: FeatureMask
    level: str                   # "utterance" or "speaker"


@dataclass
class Split:
    seen: list
    heldout: list
    train: list = field(default_factory=list)
    dev: list = field(default_factory=list)
    adapt: dict = field(default_factory=dict)
    val: dict = field(default_factory=dict)
    test: dict = field(default_factory=dict)


def default_systems() -> list[System]:
    enc, emb = SpeakerMode.ENCODED, SpeakerMode.EMBEDDED
    systems = [
        System("Baseline-Enc", enc, FeatureMask.none(), "utterance"),
        System("Baseline-Emb", emb, FeatureMask.none(), "speaker"),
        System("UPF-Enc", enc, FeatureMask.all(), "utterance"),
        System("SPF-Emb", emb, FeatureMask.all(), "speaker"),
    ]
    for base, mode, level in (("UPF-Enc", enc, "utterance"), ("SPF-Emb", emb, "speaker")):
        for feat in FEATURE_NAMES:
            systems.append(System(f"{base}-{feat.replace('_', ' ')}", mode,
                                  FeatureMask.without(feat), level))
        systems.append(System(f"{base}-all", mode, FeatureMask.none(), level))
    return systems


# ---------------------------------------------------------------------------
# corpus analysis
# ---------------------------------------------------------------------------

def analyse(utt: Utterance, cfg: RunConfig) -> UtteranceFeatures:
    fcfg = cfg.frame_config()
    mel = mel_spectrogram(utt.audio, fcfg)
    track = estimate_pitch(utt.audio, cfg.pitch_config(), fcfg)
    etrack = energy_track(utt.audio, fcfg, cfg.silence_threshold_db)
    vec = extract_utterance_prosody(utt.audio, utt.alignment, cfg.extraction_config(),
                                    track=track, etrack=etrack)
    durations = alignment_durations(utt.alignment, mel.n_frames, fcfg.frame_shift_s,
                                    fcfg.frame_length_s)
    return UtteranceFeatures(utt, mel.to_log().frames, track, vec, durations)


def analyse_corpus(corpus: ToyCorpus, cfg: RunConfig, jobs: int = 1) -> dict[str, UtteranceFeatures]:
    utts = list(corpus.utterances)
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            feats = list(pool.map(lambda u: analyse(u, cfg), utts))
    else:
        feats = [analyse(u, cfg) for u in utts]
    return {f.utterance.utterance_id: f for f in feats}


def make_split(corpus: ToyCorpus, cfg: RunConfig) -> Split:
    """Seeded speaker/utterance splits.

    Held-out speakers are drawn from those not holding the extreme value of
    any latent parameter, so adaptation targets sit inside the range seen in
    pre-training.
    """
    rng = rng_stream(cfg.seed, "split")
    speakers = sorted(s.speaker_id for s in corpus.speakers)
    extreme = set()
    for attr in ("base_f0_hz", "f0_spread", "phone_dur_s", "amplitude"):
        vals = sorted(corpus.speakers, key=lambda s: getattr(s, attr))
        extreme.update({vals[0].speaker_id, vals[-1].speaker_id})
    pool = [s for s in speakers if s not in extreme]
    if len(pool) < cfg.n_heldout:
        pool = speakers
    heldout = sorted(rng.choice(pool, size=cfg.n_heldout, replace=False).tolist())
    split = Split(seen=[s for s in speakers if s not in heldout], heldout=heldout)
    for sid in split.seen:
        ids = sorted(u.utterance_id for u in corpus.by_speaker(sid))
        perm = rng.permutation(len(ids))
        n_dev = max(1, round(len(ids) / 20))
        split.dev += [ids[i] for i in perm[:n_dev]]
        split.train += [ids[i] for i in perm[n_dev:]]
    for sid in heldout:
        ids = sorted(u.utterance_id for u in corpus.by_speaker(sid))
        perm = rng.permutation(len(ids))
        n_val = max(1, round(len(ids) * 10 / 110))
        n_test = max(1, round(len(ids) * 20 / 110))
        split.val[sid] = sorted(ids[i] for i in perm[:n_val])
        split.test[sid] = sorted(ids[i] for i in perm[n_val:n_val + n_test])
        split.adapt[sid] = sorted(ids[i] for i in perm[n_val + n_test:])
    split.train.sort()
    split.dev.sort()
    return split


# ---------------------------------------------------------------------------
# conditioning per system
# ---------------------------------------------------------------------------

class Conditioner:
    """Turns raw speaker vectors and prosody vectors into decoder-input tails."""

    def __init__(self, cfg: RunConfig, scaler: ProsodyScaler):
        self.cfg = cfg
        self.scaler = scaler

    def p(self, vec: ProsodyVector, mask: FeatureMask) -> np.ndarray:
        return prepare_prosody(self.scaler.transform(vec), mask, self.cfg.normalize)

    def s(self, vec: np.ndarray) -> np.ndarray:
        return l2_normalize(vec) if self.cfg.normalize_speaker else np.asarray(vec)

    def encoded(self, s_vec, p_vec, mask) -> np.ndarray:
        return np.concatenate([self.s(s_vec), self.p(p_vec, mask)])

    def encoded_inference(self, s_list, p_list, mask) -> np.ndarray:
        s, _ = inference_condition(s_list, [self.scaler.transform(p) for p in p_list],
                                   FeatureMask.none(), normalize=self.cfg.normalize_speaker,
                                   normalize_after_average=self.cfg.normalize_after_average)
        _, p = inference_condition(s_list, [self.scaler.transform(p) for p in p_list],
                                   mask, normalize=self.cfg.normalize,
                                   normalize_after_average=self.cfg.normalize_after_average)
        return np.concatenate([s, p])


def build_items(ids, feats, system: System, cond: Conditioner, speaker_prosody: dict,
                override_cond: np.ndarray | None = None) -> list[TrainItem]:
    items = []
    for uid in ids:
        f = feats[uid]
        u = f.utterance
        if override_cond is not None:
            c = override_cond
        elif system.mode is SpeakerMode.ENCODED:
            c = cond.encoded(u.speaker_vector, f.prosody, system.mask)
        else:
            c = cond.p(speaker_prosody[u.speaker_id], system.mask)
        items.append(TrainItem.build(uid, u.speaker_id, u.tokens, f.durations, f.log_mel, c))
    return items


# ---------------------------------------------------------------------------
# running
# ---------------------------------------------------------------------------

def _mean(xs) -> float:
    xs = [x for x in xs if not math.isnan(x)]
    return float(np.mean(xs)) if xs else float("nan")


def evaluate_items(result: TrainResult, items: list[TrainItem], feats, cfg: RunConfig) -> dict:
    """Held-out MSE plus MCD / F0 RMSE of predicted vs. reference mel."""
    fcfg = cfg.frame_config()
    mses, mcds, rmses = [], [], []
    for it in items:
        f = feats[it.utterance_id]
        pred = predict_frames(result.params, f.utterance.tokens, f.durations, it.cond,
                              result.table, it.speaker_id).T
        diff = pred - f.log_mel
        mses.append(float(np.mean(diff * diff)))
        ref_mel = MelSpectrogram(f.log_mel, fcfg.frame_shift_s, is_log=True)
        syn_mel = MelSpectrogram(pred, fcfg.frame_shift_s, is_log=True)
        a, b = mcc(ref_mel), mcc(syn_mel)
        path, _ = dtw(a, b, exclude_c0=not cfg.include_c0, band=cfg.dtw_band or None)
        mcds.append(mcd(a, b, path, include_c0=cfg.include_c0))
        sr = f.utterance.audio.sample_rate_hz
        try:
            rmse, _ = f0_rmse_stats(mel_f0(ref_mel, sr, fcfg), mel_f0(syn_mel, sr, fcfg), path)
        except NoVoicedOverlap:
            rmse = float("nan")
        rmses.append(rmse)
    return {"mse": _mean(mses), "mcd_db": _mean(mcds), "f0_rmse_hz": _mean(rmses),
            "n_utterances": len(items)}


def run_system(system: System, corpus: ToyCorpus, feats, split: Split, cfg: RunConfig,
               cond: Conditioner, out_dir: Path | None = None) -> dict:
    tcfg = cfg.train_config()
    spk_prosody = {}
    for sid in split.seen:
        ids = [u for u in split.train if feats[u].utterance.speaker_id == sid]
        spk_prosody[sid] = aggregate_speaker_prosody([feats[u].prosody for u in ids], sid, ids).vector
    for sid in split.heldout:
        ids = split.adapt[sid]
        spk_prosody[sid] = aggregate_speaker_prosody([feats[u].prosody for u in ids], sid, ids).vector

    train_items = build_items(split.train, feats, system, cond, spk_prosody)
    dev_items = build_items(split.dev, feats, system, cond, spk_prosody)
    pre = pretrain(train_items, system.mode, system.mask, tcfg, len(corpus.vocab),
                   corpus.spec.speaker_dim)
    out = {"system": system.name, "mode": system.mode.value, "mask": system.mask.label(),
           "level": system.level, "pretrain_final_loss": pre.trace[-1][1],
           "dev_mse": evaluate_loss(pre, dev_items), "speakers": {}}
    if out_dir is not None:
        write_trace_csv(out_dir / f"loss_{_slug(system.name)}.csv", pre.trace)

    for sid in split.heldout:
        adapt_items = build_items(split.adapt[sid], feats, system, cond, spk_prosody)
        if system.mode is SpeakerMode.ENCODED:
            s_list = [feats[u].utterance.speaker_vector for u in split.adapt[sid]]
            p_list = [feats[u].prosody for u in split.adapt[sid]]
            infer = cond.encoded_inference(s_list, p_list, system.mask)
        else:
            infer = cond.p(spk_prosody[sid], system.mask)
        val_items = build_items(split.val[sid], feats, system, cond, spk_prosody, infer)
        test_items = build_items(split.test[sid], feats, system, cond, spk_prosody, infer)

        before = adapt(pre, adapt_items, sid, dataclasses.replace(tcfg, adapt_steps=0))
        post = adapt(pre, adapt_items, sid, tcfg)
        metrics = evaluate_items(post, test_items, feats, cfg)
        metrics["val_mse_pre"] = evaluate_loss(before, val_items)
        metrics["val_mse_post"] = evaluate_loss(post, val_items)
        metrics["test_mse_pre"] = evaluate_loss(before, test_items)
        out["speakers"][sid] = metrics
        out.setdefault("_results", {})[sid] = post

    out["mean"] = {k: _mean([m[k] for m in out["speakers"].values()])
                   for k in ("mse", "mcd_db", "f0_rmse_hz", "val_mse_pre", "val_mse_post",
                             "test_mse_pre")}
    out["_pretrained"] = pre
    return out


def _slug(name: str) -> str:
    return name.replace(" ", "_").replace("/", "_")


def _results_equal(a: dict, b: dict) -> bool:
    pa, pb = a["_pretrained"], b["_pretrained"]
    if not pa.params.equals(pb.params):
        return False
    if (pa.table is None) != (pb.table is None):
        return False
    if pa.table is not None and any(not np.array_equal(pa.table[k], pb.table[k])
                                    for k in pa.table.ids()):
        return False
    for sid, ra in a["_results"].items():
        if not ra.params.equals(b["_results"][sid].params):
            return False
    return True


def run_experiment(cfg: RunConfig = RunConfig(), out_dir=None,
                   systems: list[System] | None = None, jobs: int | None = None) -> dict:
    """Run every system and write reports into ``out_dir`` (if given)."""
    jobs = cfg.jobs if jobs is None else jobs
    jobs = jobs or (os.cpu_count() or 1)
    systems = default_systems() if systems is None else systems
    out_path = Path(out_dir) if out_dir is not None else None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)

    corpus = generate_corpus(cfg.corpus_spec())
    feats = analyse_corpus(corpus, cfg, jobs)
    split = make_split(corpus, cfg)
    scaler = (ProsodyScaler.fit(feats[u].prosody for u in split.train)
              if cfg.prosody_standardize else ProsodyScaler.identity())
    cond = Conditioner(cfg, scaler)

    results = {}
    for system in systems:
        log.info("running %s", system.name)
        results[system.name] = run_system(system, corpus, feats, split, cfg, cond, out_path)

    summary = summarize(results, split, cfg)
    if out_path is not None:
        write_reports(out_path, summary, results, feats, split, cfg)
    summary["_results"] = results
    return summary


def summarize(results: dict, split: Split, cfg: RunConfig) -> dict:
    public = {name: {k: v for k, v in r.items() if not k.startswith("_")}
              for name, r in results.items()}
    # worker count never changes results, so reports leave it out
    summary = {"config": {k: v for k, v in sorted(vars(cfg).items()) if k != "jobs"},
               "split": {"seen": split.seen, "heldout": split.heldout,
                         "n_train": len(split.train), "n_dev": len(split.dev),
                         "n_adapt": {k: len(v) for k, v in split.adapt.items()},
                         "n_val": {k: len(v) for k, v in split.val.items()},
                         "n_test": {k: len(v) for k, v in split.test.items()}},
               "systems": public}

    def improvement(base, prop, key="mse"):
        if base in public and prop in public:
            b, p = public[base]["mean"][key], public[prop]["mean"][key]
            return (b - p) / b
        return None

    summary["comparisons"] = {
        "UPF-Enc_vs_Baseline-Enc": {k: improvement("Baseline-Enc", "UPF-Enc", k)
                                    for k in ("mse", "mcd_db", "f0_rmse_hz")},
        "SPF-Emb_vs_Baseline-Emb": {k: improvement("Baseline-Emb", "SPF-Emb", k)
                                    for k in ("mse", "mcd_db", "f0_rmse_hz")},
    }
    checks = {}
    for full, base in (("UPF-Enc", "Baseline-Enc"), ("SPF-Emb", "Baseline-Emb")):
        if f"{full}-all" in results and base in results:
            checks[f"{full}-all_equals_{base}"] = _results_equal(results[f"{full}-all"],
                                                                 results[base])
    summary["checks"] = checks
    return summary


def write_reports(out: Path, summary: dict, results: dict, feats, split: Split,
                  cfg: RunConfig) -> None:
    with open(out / "summary.json", "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")
    with open(out / "systems.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["system", "mode", "mask", "speaker_id", "mse", "mcd_db", "f0_rmse_hz",
                    "val_mse_pre", "val_mse_post"])
        for name, r in results.items():
            for sid in sorted(r["speakers"]):
                m = r["speakers"][sid]
                w.writerow([name, r["mode"], r["mask"], sid, *(repr(m[k]) for k in
                            ("mse", "mcd_db", "f0_rmse_hz", "val_mse_pre", "val_mse_post"))])
            m = r["mean"]
            w.writerow([name, r["mode"], r["mask"], "__mean__", *(repr(m[k]) for k in
                        ("mse", "mcd_db", "f0_rmse_hz", "val_mse_pre", "val_mse_post"))])
    with open(out / "ablation.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["level", "system", "mask", "mse", "mcd_db", "f0_rmse_hz"])
        for name, r in results.items():
            if name.startswith(("UPF-Enc", "SPF-Emb")):
                m = r["mean"]
                w.writerow([r["level"], name, r["mask"],
                            *(repr(m[k]) for k in ("mse", "mcd_db", "f0_rmse_hz"))])
    ids = sorted(feats)
    write_prosody_csv(out / "prosody.csv", [(u, feats[u].prosody) for u in ids])
    (out / "config.txt").write_text(cfg.to_text(exclude=("jobs",)))


def _json_default(obj):
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, np.bool_):
        return bool(obj)
    raise TypeError(f"not serializable: {type(obj)}")
