"""Command-line front-end.

Exit codes: 0 success (possibly with per-item warnings), 1 usage or
configuration error, 2 total processing failure.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .conditioning import (ProsodyScaler, inference_condition, prepare_prosody, l2_normalize,
                           read_vector_file, write_vector_file)
from .config import RunConfig, load_config
from .dsp import energy_track, load_wav
from .errors import InvalidConfig, JoinError, ManifestError, ProsodyneError
from .evaluation import evaluate_pair, write_report_csv, write_report_json
from .pitch import estimate_pitch, write_pitch_csv
from .prosody import (aggregate_speaker_prosody, extract_utterance_prosody, read_alignment,
                      read_prosody_csv, read_speaker_csv, write_prosody_csv, write_speaker_csv)

log = logging.getLogger("prosodyne")

LOG_LEVELS = {"error": logging.ERROR, "warn": logging.WARNING, "warning": logging.WARNING,
              "info": logging.INFO, "debug": logging.DEBUG}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ManifestRow:
    utterance_id: str
    speaker_id: str
    wav_path: Path
    alignment_path: Path
    vector_id: str | None = None


def _tsv_rows(path: Path):
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ManifestError(f"cannot read manifest {path}: {exc}") from exc
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        yield lineno, line.rstrip("\r").split("\t")


def read_manifest(path) -> list[ManifestRow]:
    """``utt<TAB>spk<TAB>wav<TAB>align[<TAB>vector_id]``, paths relative to the manifest."""
    path = Path(path)
    base = path.parent
    rows, seen = [], set()
    for lineno, fields in _tsv_rows(path):
        if len(fields) not in (4, 5):
            raise ManifestError(f"{path}:{lineno}: expected 4 or 5 tab-separated fields")
        utt, spk, wav, ali = fields[:4]
        if utt in seen:
            raise ManifestError(f"{path}:{lineno}: duplicate utterance id {utt!r}")
        seen.add(utt)
        vid = fields[4] if len(fields) == 5 and fields[4] else None
        rows.append(ManifestRow(utt, spk, base / wav, base / ali, vid))
    if not rows:
        raise ManifestError(f"{path}: manifest is empty")
    return rows


def read_pairs(path) -> list[tuple[str, Path, Path]]:
    """``pair_id<TAB>ref_wav<TAB>syn_wav``, paths relative to the file."""
    path = Path(path)
    pairs, seen = [], set()
    for lineno, fields in _tsv_rows(path):
        if len(fields) != 3:
            raise ManifestError(f"{path}:{lineno}: expected 3 tab-separated fields")
        if fields[0] in seen:
            raise ManifestError(f"{path}:{lineno}: duplicate pair id {fields[0]!r}")
        seen.add(fields[0])
        pairs.append((fields[0], path.parent / fields[1], path.parent / fields[2]))
    if not pairs:
        raise ManifestError(f"{path}: pair list is empty")
    return pairs


def _pool_map(fn, items, jobs: int):
    if jobs > 1 and len(items) > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(fn, items))
    return [fn(x) for x in items]


def _jobs(cfg: RunConfig) -> int:
    return cfg.jobs or (os.cpu_count() or 1)


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_extract(args, cfg: RunConfig) -> int:
    rows = read_manifest(args.manifest)
    out = _out(args)
    (out / "pitch").mkdir(exist_ok=True)
    (out / "energy").mkdir(exist_ok=True)
    ecfg = cfg.extraction_config()

    def work(row: ManifestRow):
        try:
            audio = load_wav(row.wav_path)
            align = read_alignment(row.alignment_path)
            track = estimate_pitch(audio, ecfg.pitch, ecfg.frame)
            etrack = energy_track(audio, ecfg.frame, ecfg.silence_threshold_db)
            vec = extract_utterance_prosody(audio, align, ecfg, track=track, etrack=etrack)
            return row, vec, track, etrack, None
        except (ProsodyneError, OSError, ValueError) as exc:
            return row, None, None, None, exc

    ok = []
    for row, vec, track, etrack, err in _pool_map(work, rows, _jobs(cfg)):
        if err is not None:
            log.warning("skipping %s: %s", row.utterance_id, err)
            continue
        write_pitch_csv(out / "pitch" / f"{row.utterance_id}.csv", track)
        _write_energy_csv(out / "energy" / f"{row.utterance_id}.csv", etrack)
        ok.append((row.utterance_id, vec))
    if not ok:
        log.error("no utterance could be processed")
        return 2
    write_prosody_csv(out / "prosody.csv", sorted(ok, key=lambda r: r[0]))
    log.info("extracted %d of %d utterances", len(ok), len(rows))
    return 0


def _write_energy_csv(path, etrack) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["frame", "rms", "silent"])
        for i, (v, s) in enumerate(zip(etrack.values, etrack.silence_mask)):
            w.writerow([i, repr(float(v)), int(bool(s))])


def cmd_aggregate(args, cfg: RunConfig) -> int:
    rows = read_manifest(args.manifest)
    speaker_of = {r.utterance_id: r.speaker_id for r in rows}
    vectors = read_prosody_csv(args.prosody)
    by_speaker: dict[str, list[str]] = {}
    for utt in vectors:
        if utt not in speaker_of:
            raise JoinError(f"utterance {utt!r} is not in the manifest")
        by_speaker.setdefault(speaker_of[utt], []).append(utt)
    out = _out(args)
    result = []
    for spk in sorted(by_speaker):
        ids = sorted(by_speaker[spk])
        result.append(aggregate_speaker_prosody([vectors[u] for u in ids], spk, ids))
    write_speaker_csv(out / "speakers.csv", result)
    return 0


def cmd_condition(args, cfg: RunConfig) -> int:
    """Write prepared conditioning tails ``[s; p_masked]`` as a vector file.

    With ``--average`` one row per speaker is written, built from the
    averaged speaker and prosody vectors of that speaker's utterances.
    """
    rows = read_manifest(args.manifest)
    mask = cfg.feature_mask()
    prosody = read_prosody_csv(args.prosody)
    speakers = read_speaker_csv(args.speakers) if args.speakers else None
    svecs = read_vector_file(args.vectors)
    scaler = (ProsodyScaler.fit(prosody[u] for u in sorted(prosody))
              if cfg.prosody_standardize else ProsodyScaler.identity())

    def s_of(row):
        key = row.vector_id or row.utterance_id
        if key not in svecs:
            raise JoinError(f"no speaker vector {key!r} for {row.utterance_id}")
        return svecs[key]

    def p_of(row):
        if speakers is not None:
            if row.speaker_id not in speakers:
                raise JoinError(f"speaker {row.speaker_id!r} missing from {args.speakers}")
            return speakers[row.speaker_id].vector
        if row.utterance_id not in prosody:
            raise JoinError(f"utterance {row.utterance_id!r} missing from {args.prosody}")
        return prosody[row.utterance_id]

    out_rows = {}
    if args.average:
        groups: dict[str, list[ManifestRow]] = {}
        for r in rows:
            groups.setdefault(r.speaker_id, []).append(r)
        for spk, members in groups.items():
            members = sorted(members, key=lambda r: r.utterance_id)
            s, _ = inference_condition([s_of(r) for r in members],
                                       [scaler.transform(p_of(r)) for r in members],
                                       mask, normalize=cfg.normalize_speaker,
                                       normalize_after_average=cfg.normalize_after_average)
            _, p = inference_condition([s_of(r) for r in members],
                                       [scaler.transform(p_of(r)) for r in members],
                                       mask, normalize=cfg.normalize,
                                       normalize_after_average=cfg.normalize_after_average)
            out_rows[spk] = np.concatenate([s, p])
    else:
        for r in rows:
            s = s_of(r)
            s = l2_normalize(s) if cfg.normalize_speaker else np.asarray(s)
            p = prepare_prosody(scaler.transform(p_of(r)), mask, cfg.normalize)
            out_rows[r.utterance_id] = np.concatenate([s, p])
    out = _out(args)
    write_vector_file(out / "condition.txt", out_rows)
    return 0


def _system_from_config(cfg: RunConfig):
    from .experiment import System
    from .toymodel.model import SpeakerMode
    mode = cfg.speaker_mode()
    mask = cfg.feature_mask()
    level = "utterance" if mode is SpeakerMode.ENCODED else "speaker"
    return System(f"{mode.value}/{mask.label()}", mode, mask, level)


def _prepare(cfg: RunConfig, jobs: int):
    from .experiment import Conditioner, analyse_corpus, make_split
    from .toymodel.corpus import generate_corpus
    corpus = generate_corpus(cfg.corpus_spec())
    feats = analyse_corpus(corpus, cfg, jobs)
    split = make_split(corpus, cfg)
    scaler = (ProsodyScaler.fit(feats[u].prosody for u in split.train)
              if cfg.prosody_standardize else ProsodyScaler.identity())
    return corpus, feats, split, Conditioner(cfg, scaler)


def _speaker_prosody(feats, split):
    out = {}
    for sid in split.seen:
        ids = [u for u in split.train if feats[u].utterance.speaker_id == sid]
        out[sid] = aggregate_speaker_prosody([feats[u].prosody for u in ids], sid, ids).vector
    for sid in split.heldout:
        ids = split.adapt[sid]
        out[sid] = aggregate_speaker_prosody([feats[u].prosody for u in ids], sid, ids).vector
    return out


def cmd_train(args, cfg: RunConfig) -> int:
    from .experiment import build_items
    from .toymodel.checkpoint import save_checkpoint
    from .toymodel.train import evaluate_loss, pretrain, write_trace_csv
    corpus, feats, split, cond = _prepare(cfg, _jobs(cfg))
    system = _system_from_config(cfg)
    spk = _speaker_prosody(feats, split)
    items = build_items(split.train, feats, system, cond, spk)
    result = pretrain(items, system.mode, system.mask, cfg.train_config(), len(corpus.vocab),
                      corpus.spec.speaker_dim)
    out = _out(args)
    dev = evaluate_loss(result, build_items(split.dev, feats, system, cond, spk))
    save_checkpoint(out / "model.ckpt", result.params, result.table,
                    extra={"seed": cfg.seed, "dev_mse": dev})
    write_trace_csv(out / "loss.csv", result.trace)
    _write_json(out / "train.json", {"system": system.name, "dev_mse": dev,
                                     "final_loss": result.trace[-1][1],
                                     "heldout": split.heldout})
    return 0


def cmd_adapt(args, cfg: RunConfig) -> int:
    from .experiment import build_items
    from .toymodel.checkpoint import load_checkpoint, save_checkpoint
    from .toymodel.model import SpeakerMode
    from .toymodel.train import TrainResult, adapt, evaluate_loss, write_trace_csv
    params, table, _ = load_checkpoint(args.checkpoint)
    cfg = cfg.replace(mode=params.mode.value, mask=params.mask.label())
    corpus, feats, split, cond = _prepare(cfg, _jobs(cfg))
    if args.speaker not in split.heldout:
        raise UsageError(f"--speaker must be one of the held-out speakers {split.heldout}")
    system = _system_from_config(cfg)
    spk = _speaker_prosody(feats, split)
    sid = args.speaker
    adapt_ids = split.adapt[sid]
    if system.mode is SpeakerMode.ENCODED:
        infer = cond.encoded_inference([feats[u].utterance.speaker_vector for u in adapt_ids],
                                       [feats[u].prosody for u in adapt_ids], system.mask)
    else:
        infer = cond.p(spk[sid], system.mask)
    adapt_items = build_items(adapt_ids, feats, system, cond, spk)
    val_items = build_items(split.val[sid], feats, system, cond, spk, infer)
    test_items = build_items(split.test[sid], feats, system, cond, spk, infer)
    tcfg = cfg.train_config()
    before = adapt(TrainResult(params, table), adapt_items, sid,
                   dataclasses.replace(tcfg, adapt_steps=0))
    post = adapt(TrainResult(params, table), adapt_items, sid, tcfg)
    out = _out(args)
    save_checkpoint(out / f"adapted_{sid}.ckpt", post.params, post.table,
                    extra={"seed": cfg.seed, "speaker": sid})
    write_trace_csv(out / f"adapt_loss_{sid}.csv", post.trace)
    _write_json(out / f"adapt_{sid}.json", {
        "speaker": sid,
        "val_mse_pre": evaluate_loss(before, val_items),
        "val_mse_post": evaluate_loss(post, val_items),
        "test_mse_post": evaluate_loss(post, test_items),
    })
    return 0


def cmd_experiment(args, cfg: RunConfig) -> int:
    from .experiment import run_experiment
    summary = run_experiment(cfg, out_dir=_out(args), jobs=_jobs(cfg))
    for name, cmp in summary["comparisons"].items():
        log.info("%s: mse improvement %.3f", name, cmp["mse"])
    return 0


def cmd_ablate(args, cfg: RunConfig) -> int:
    """Baseline, full system and every single-feature ablation for one mode."""
    from .experiment import default_systems, run_experiment
    prefix = "UPF-Enc" if cfg.speaker_mode().value == "encoded" else "SPF-Emb"
    base = "Baseline-Enc" if prefix == "UPF-Enc" else "Baseline-Emb"
    systems = [s for s in default_systems() if s.name == base or s.name.startswith(prefix)]
    run_experiment(cfg, out_dir=_out(args), systems=systems, jobs=_jobs(cfg))
    return 0


def cmd_eval(args, cfg: RunConfig) -> int:
    pairs = read_pairs(args.pairs)
    fcfg, pcfg = cfg.frame_config(), cfg.pitch_config()

    def work(pair):
        pid, ref, syn = pair
        try:
            return pid, evaluate_pair(ref, syn, fcfg, pcfg, cfg.include_c0,
                                      cfg.dtw_band or None), None
        except (ProsodyneError, OSError, ValueError) as exc:
            return pid, None, str(exc)

    reports, failed = [], []
    for pid, rep, err in _pool_map(work, pairs, _jobs(cfg)):
        if err is not None:
            log.warning("pair %s failed: %s", pid, err)
            failed.append((pid, err))
        else:
            reports.append((pid, rep))
    out = _out(args)
    write_report_csv(out / "eval.csv", reports, failed)
    write_report_json(out / "eval.json", reports, failed)
    if not reports:
        log.error("every pair failed")
        return 2
    return 0


def _write_json(path, doc) -> None:
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

COMMANDS = {
    "extract": cmd_extract, "aggregate": cmd_aggregate, "condition": cmd_condition,
    "train": cmd_train, "adapt": cmd_adapt, "experiment": cmd_experiment,
    "eval": cmd_eval, "ablate": cmd_ablate,
}


def _add_globals(p: argparse.ArgumentParser, suppress: bool) -> None:
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    p.add_argument("--config", default=d(None), help="key = value run configuration file")
    p.add_argument("--seed", type=int, default=d(None), help="override the config seed")
    p.add_argument("--jobs", type=int, default=d(None), help="worker threads (0 = all cores)")
    p.add_argument("--out", default=d("out"), help="output directory (default: ./out)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="prosodyne", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    _add_globals(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    sub.required = True

    def add(name, help_):
        p = sub.add_parser(name, help=help_)
        _add_globals(p, suppress=True)
        return p

    p = add("extract", "utterance-level prosodic features, pitch and energy dumps")
    p.add_argument("manifest")
    p = add("aggregate", "speaker-level means of an utterance prosody CSV")
    p.add_argument("prosody")
    p.add_argument("manifest")
    p = add("condition", "prepared [speaker; prosody] conditioning vectors")
    p.add_argument("manifest")
    p.add_argument("--vectors", required=True, help="speaker-vector file")
    p.add_argument("--prosody", required=True, help="utterance prosody CSV")
    p.add_argument("--speakers", help="speaker prosody CSV (speaker-level features)")
    p.add_argument("--average", action="store_true",
                   help="one averaged row per speaker (inference-time conditioning)")
    add("train", "pre-train the toy model on the synthetic corpus")
    p = add("adapt", "adapt a pre-trained checkpoint to one held-out speaker")
    p.add_argument("checkpoint")
    p.add_argument("--speaker", required=True)
    add("experiment", "four-system comparison plus ablations")
    add("ablate", "ablation sweep for the configured speaker mode")
    p = add("eval", "MCD and F0 RMSE for reference/synthesis wav pairs")
    p.add_argument("pairs")
    return parser


def _setup_logging() -> None:
    level = LOG_LEVELS.get(os.environ.get("PROSODYNE_LOG", "warn").lower(), logging.WARNING)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s",
                        stream=sys.stderr, force=True)


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"prosodyne: error: {exc}", file=sys.stderr)
        return 1
    try:
        cfg = load_config(args.config) if args.config else RunConfig()
        if args.seed is not None:
            cfg = cfg.replace(seed=args.seed)
        if args.jobs is not None:
            cfg = cfg.replace(jobs=args.jobs)
    except (InvalidConfig, OSError) as exc:
        print(f"prosodyne: configuration error: {exc}", file=sys.stderr)
        return 1
    try:
        return COMMANDS[args.command](args, cfg)
    except UsageError as exc:
        print(f"prosodyne: error: {exc}", file=sys.stderr)
        return 1
    except InvalidConfig as exc:
        print(f"prosodyne: configuration error: {exc}", file=sys.stderr)
        return 1
    except (ProsodyneError, OSError) as exc:
        log.error("%s", exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
