"""Line-oriented ``key = value`` run configuration."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields

from .conditioning import FeatureMask
from .dsp import FrameConfig
from .errors import InvalidConfig
from .pitch import PitchConfig
from .prosody import ExtractionConfig
from .toymodel.corpus import ToyCorpusSpec
from .toymodel.model import SpeakerMode
from .toymodel.train import TrainConfig


@dataclass(frozen=True)
class RunConfig:
    # analysis
    fft_size: int = 800
    frame_shift_s: float = 0.0125
    frame_length_s: float = 0.050
    preemphasis_coeff: float = 0.97
    f0_min_hz: float = 60.0
    f0_max_hz: float = 500.0
    voicing_threshold: float = 0.15
    median_smoothing: int = 0
    trim_fraction: float = 0.05
    silence_threshold_db: float = 40.0
    # conditioning
    mask: str = "all"
    mode: str = "encoded"
    normalize: bool = True
    normalize_speaker: bool = True
    normalize_after_average: bool = True
    prosody_standardize: bool = True
    # evaluation
    include_c0: bool = False
    dtw_band: int = 0
    # training
    pretrain_steps: int = 700
    decay_step: int = 500
    pretrain_lr: float = 1e-3
    decayed_lr: float = 1e-5
    adapt_steps: int = 60
    adapt_lr: float = 1e-5
    pretrain_batch: int = 40
    adapt_batch: int = 20
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-6
    d_e: int = 16
    hidden: int = 64
    # synthetic corpus
    n_speakers: int = 10
    n_heldout: int = 2
    utterances_per_speaker: int = 44
    vocab_size: int = 12
    speaker_dim: int = 256
    # misc
    seed: int = 0
    jobs: int = 0

    def __post_init__(self):
        try:
            self.frame_config().validate_for(16000)
            self.pitch_config().validate_for(16000, self.frame_config().length_samples(16000))
            self.feature_mask()
            self.speaker_mode()
            self.train_config().validate()
        except (ValueError, InvalidConfig) as exc:
            raise InvalidConfig(str(exc)) from exc
        if not 0 <= self.trim_fraction < 0.5:
            raise InvalidConfig("trim_fraction must lie in [0, 0.5)")
        if self.silence_threshold_db <= 0:
            raise InvalidConfig("silence_threshold_db must be positive")
        if not 1 <= self.n_heldout < self.n_speakers - 1:
            raise InvalidConfig("need 1 <= n_heldout and at least two seen speakers")
        if self.seed < 0 or self.seed >= 2 ** 64:
            raise InvalidConfig("seed must be an unsigned 64-bit integer")
        if self.jobs < 0 or self.dtw_band < 0:
            raise InvalidConfig("jobs and dtw_band must be non-negative")

    # -- derived objects ---------------------------------------------------
    def frame_config(self) -> FrameConfig:
        return FrameConfig(self.fft_size, self.frame_shift_s, self.frame_length_s, "hann",
                           self.preemphasis_coeff)

    def pitch_config(self) -> PitchConfig:
        return PitchConfig(self.f0_min_hz, self.f0_max_hz, self.voicing_threshold,
                           self.median_smoothing)

    def extraction_config(self) -> ExtractionConfig:
        return ExtractionConfig(self.frame_config(), self.pitch_config(), self.trim_fraction,
                                self.silence_threshold_db)

    def feature_mask(self) -> FeatureMask:
        return FeatureMask.parse(self.mask)

    def speaker_mode(self) -> SpeakerMode:
        return SpeakerMode(self.mode)

    def train_config(self) -> TrainConfig:
        return TrainConfig(self.beta1, self.beta2, self.adam_eps, self.pretrain_steps,
                           self.decay_step, self.pretrain_lr, self.decayed_lr, self.adapt_steps,
                           self.adapt_lr, self.pretrain_batch, self.adapt_batch, self.d_e,
                           self.hidden, seed=self.seed)

    def corpus_spec(self) -> ToyCorpusSpec:
        return ToyCorpusSpec(n_speakers=self.n_speakers,
                             utterances_per_speaker=self.utterances_per_speaker,
                             vocab_size=self.vocab_size, speaker_dim=self.speaker_dim,
                             seed=self.seed)

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def to_text(self, exclude=()) -> str:
        lines = []
        for f in fields(self):
            if f.name in exclude:
                continue
            v = getattr(self, f.name)
            lines.append(f"{f.name} = {str(v).lower() if isinstance(v, bool) else v}")
        return "\n".join(lines) + "\n"


_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _coerce(name: str, typ: str, text: str):
    try:
        if typ == "bool":
            low = text.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(f"not a boolean: {text!r}")
        if typ == "int":
            return int(text, 0)
        if typ == "float":
            return float(text)
        return text
    except ValueError as exc:
        raise InvalidConfig(f"{name}: {exc}") from exc


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    types = {f.name: f.type for f in fields(RunConfig)}
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InvalidConfig(f"line {lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in types:
            raise InvalidConfig(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise InvalidConfig(f"line {lineno}: duplicate key {key!r}")
        values[key] = _coerce(key, types[key], value)
    return dataclasses.replace(base or RunConfig(), **values)


def load_config(path) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())
