"""Duration-upsampled frame regressor conditioned on speaker and prosody.

Token embeddings play the text-encoder role; the decoder is
``W2 tanh(W1 d + b1) + b2`` applied to every column ``d`` of the upsampled
decoder input. Because every frame of a token sees the same input column,
training works on one row per token weighted by its duration, which gives
exactly the frame-level loss and gradient.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from ..conditioning import FeatureMask, assemble
from ..errors import DimensionMismatch

N_MELS = 80
PARAM_NAMES = ("token_emb", "w1", "b1", "w2", "b2")
DECODER_PARAMS = ("w1", "b1", "w2", "b2")


class SpeakerMode(enum.Enum):
    ENCODED = "encoded"
    EMBEDDED = "embedded"


@dataclass
class ToyModelParams:
    token_emb: np.ndarray   # V x d_e
    w1: np.ndarray          # H x (d_e + d_s + d_p_eff)
    b1: np.ndarray          # H
    w2: np.ndarray          # 80 x H
    b2: np.ndarray          # 80
    d_s: int
    mask: FeatureMask = field(default_factory=FeatureMask)
    mode: SpeakerMode = SpeakerMode.ENCODED

    @property
    def d_e(self) -> int:
        return self.token_emb.shape[1]

    @property
    def d_in(self) -> int:
        return self.w1.shape[1]

    @property
    def hidden(self) -> int:
        return self.w1.shape[0]

    def check(self) -> None:
        expect = self.d_e + self.d_s + self.mask.n_kept
        if self.w1.shape[1] != expect:
            raise DimensionMismatch(f"w1 has {self.w1.shape[1]} inputs, expected {expect}")
        if self.w2.shape != (N_MELS, self.hidden) or self.b1.shape != (self.hidden,):
            raise DimensionMismatch("decoder layer shapes are inconsistent")
        if self.b2.shape != (N_MELS,):
            raise DimensionMismatch("b2 must have 80 entries")

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: getattr(self, k) for k in PARAM_NAMES}

    def copy(self) -> "ToyModelParams":
        return ToyModelParams(**{k: v.copy() for k, v in self.arrays().items()},
                              d_s=self.d_s, mask=self.mask, mode=self.mode)

    def equals(self, other: "ToyModelParams") -> bool:
        return all(np.array_equal(a, b) for a, b in
                   zip(self.arrays().values(), other.arrays().values()))


def init_params(vocab_size: int, d_e: int, d_s: int, hidden: int, mask: FeatureMask,
                mode: SpeakerMode, rng: np.random.Generator,
                output_bias: np.ndarray | None = None) -> ToyModelParams:
    """Random init. W1 is drawn at full prosody width and masked columns dropped,
    so systems that differ only in the mask share every other initial weight."""
    full = d_e + d_s + 4
    token_emb = rng.normal(0.0, 0.3, (vocab_size, d_e))
    w1_full = rng.normal(0.0, 1.0 / np.sqrt(full), (hidden, full))
    keep = np.concatenate([np.arange(d_e + d_s), d_e + d_s + mask.indices()])
    w2 = rng.normal(0.0, 1.0 / np.sqrt(hidden), (N_MELS, hidden))
    b2 = np.zeros(N_MELS) if output_bias is None else np.array(output_bias, dtype=np.float64)
    params = ToyModelParams(token_emb, w1_full[:, keep].copy(), np.zeros(hidden), w2, b2,
                            d_s=d_s, mask=mask, mode=mode)
    params.check()
    return params


def upsample(matrix: np.ndarray, durations) -> np.ndarray:
    """Repeat column i of ``matrix`` durations[i] times."""
    durations = np.asarray(durations, dtype=np.int64)
    if durations.shape != (matrix.shape[1],):
        raise DimensionMismatch("one duration per column required")
    if np.any(durations < 0):
        raise ValueError("durations must be non-negative")
    return np.repeat(matrix, durations, axis=1)


def forward(params: ToyModelParams, tokens, durations, s, p, mask: FeatureMask | None = None,
            normalize: bool = False, normalize_speaker: bool | None = None) -> np.ndarray:
    """Predicted mel (80 x T) for one utterance, T = sum(durations)."""
    mask = params.mask if mask is None else mask
    if mask != params.mask:
        raise DimensionMismatch("mask differs from the one the model was built with")
    tokens = np.asarray(tokens, dtype=np.int64)
    enc = params.token_emb[tokens].T
    d_in = assemble(enc, s, p, mask, normalize=normalize, normalize_speaker=normalize_speaker)
    if d_in.shape[0] != params.d_in:
        raise DimensionMismatch(f"decoder input has {d_in.shape[0]} rows, model expects {params.d_in}")
    frames = upsample(d_in, durations)
    hidden = np.tanh(params.w1 @ frames + params.b1[:, None])
    return params.w2 @ hidden + params.b2[:, None]


def loss(predicted, target) -> float:
    predicted = np.asarray(predicted, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if predicted.shape != target.shape:
        raise DimensionMismatch(f"shape mismatch {predicted.shape} vs {target.shape}")
    diff = predicted - target
    return float(np.mean(diff * diff))


# ---------------------------------------------------------------------------
# token-level batches
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainItem:
    """One utterance reduced to per-token statistics.

    ``cond`` holds the prepared conditioning tail ``[s; p_masked]`` for
    encoded mode, or just ``p_masked`` for embedded mode, where the speaker
    part is looked up from the table at ``speaker_id``.
    """

    utterance_id: str
    speaker_id: str
    tokens: np.ndarray
    durations: np.ndarray
    seg_means: np.ndarray   # n_tokens x 80 mean target frame per token
    seg_sse: float          # sum of squared deviations from the token means
    n_frames: int
    cond: np.ndarray

    @classmethod
    def build(cls, utterance_id, speaker_id, tokens, durations, target, cond) -> "TrainItem":
        """``target`` is T x 80 (frames as rows)."""
        durations = np.asarray(durations, dtype=np.int64)
        target = np.asarray(target, dtype=np.float64)
        if durations.sum() != target.shape[0]:
            raise DimensionMismatch(f"durations sum to {durations.sum()}, target has {target.shape[0]} frames")
        keep = durations > 0
        bounds = np.concatenate([[0], np.cumsum(durations)])
        means, sse = [], 0.0
        for a, b in zip(bounds[:-1][keep], bounds[1:][keep]):
            seg = target[a:b]
            mu = seg.mean(axis=0)
            means.append(mu)
            sse += float(np.sum((seg - mu) ** 2))
        return cls(utterance_id, speaker_id, np.asarray(tokens, dtype=np.int64)[keep],
                   durations[keep], np.array(means).reshape(-1, N_MELS), sse,
                   int(durations.sum()), np.asarray(cond, dtype=np.float64))


@dataclass
class Batch:
    tokens: np.ndarray
    weights: np.ndarray     # durations
    means: np.ndarray
    cond: np.ndarray
    speaker_index: np.ndarray
    speaker_ids: list
    const_sse: float
    n_frames: int


def make_batch(items) -> Batch:
    if not items:
        raise ValueError("empty batch")
    speaker_ids = sorted({it.speaker_id for it in items})
    lookup = {s: i for i, s in enumerate(speaker_ids)}
    reps = [len(it.tokens) for it in items]
    return Batch(
        tokens=np.concatenate([it.tokens for it in items]),
        weights=np.concatenate([it.durations for it in items]).astype(np.float64),
        means=np.concatenate([it.seg_means for it in items]),
        cond=np.repeat(np.array([it.cond for it in items]), reps, axis=0),
        speaker_index=np.repeat([lookup[it.speaker_id] for it in items], reps),
        speaker_ids=speaker_ids,
        const_sse=float(sum(it.seg_sse for it in items)),
        n_frames=int(sum(it.n_frames for it in items)),
    )


def _inputs(params: ToyModelParams, batch: Batch, table=None) -> np.ndarray:
    parts = [params.token_emb[batch.tokens]]
    if params.mode is SpeakerMode.EMBEDDED:
        if table is None:
            raise ValueError("embedded mode needs an embedding table")
        spk = np.array([table[s] for s in batch.speaker_ids])
        parts.append(spk[batch.speaker_index])
    parts.append(batch.cond)
    x = np.concatenate(parts, axis=1)
    if x.shape[1] != params.d_in:
        raise DimensionMismatch(f"batch inputs have width {x.shape[1]}, model expects {params.d_in}")
    return x


def batch_loss(params: ToyModelParams, batch: Batch, table=None) -> float:
    x = _inputs(params, batch, table)
    out = np.tanh(x @ params.w1.T + params.b1) @ params.w2.T + params.b2
    resid = out - batch.means
    sse = float(np.sum(batch.weights * np.sum(resid * resid, axis=1)))
    return (sse + batch.const_sse) / (N_MELS * batch.n_frames)


def grad(params: ToyModelParams, batch: Batch, table=None):
    """Loss and analytic gradients.

    Returns ``(loss, grads, speaker_grads)``; ``speaker_grads`` maps speaker id
    to the gradient of its embedding (empty in encoded mode).
    """
    x = _inputs(params, batch, table)
    h = np.tanh(x @ params.w1.T + params.b1)
    out = h @ params.w2.T + params.b2
    resid = out - batch.means
    scale = 1.0 / (N_MELS * batch.n_frames)
    sse = float(np.sum(batch.weights * np.sum(resid * resid, axis=1)))
    value = (sse + batch.const_sse) * scale

    g_out = (2.0 * scale) * batch.weights[:, None] * resid
    g_w2 = g_out.T @ h
    g_b2 = g_out.sum(axis=0)
    g_z = (g_out @ params.w2) * (1.0 - h * h)
    g_w1 = g_z.T @ x
    g_b1 = g_z.sum(axis=0)
    g_x = g_z @ params.w1

    d_e = params.d_e
    g_emb = np.zeros_like(params.token_emb)
    np.add.at(g_emb, batch.tokens, g_x[:, :d_e])
    grads = {"token_emb": g_emb, "w1": g_w1, "b1": g_b1, "w2": g_w2, "b2": g_b2}

    speaker_grads = {}
    if params.mode is SpeakerMode.EMBEDDED:
        g_spk = np.zeros((len(batch.speaker_ids), params.d_s))
        np.add.at(g_spk, batch.speaker_index, g_x[:, d_e:d_e + params.d_s])
        speaker_grads = {sid: g_spk[i] for i, sid in enumerate(batch.speaker_ids)}
    return value, grads, speaker_grads


def predict_frames(params: ToyModelParams, tokens, durations, cond, table=None,
                   speaker_id: str | None = None) -> np.ndarray:
    """Predicted mel (80 x T) from a prepared conditioning tail (see TrainItem)."""
    tokens = np.asarray(tokens, dtype=np.int64)
    parts = [params.token_emb[tokens].T]
    if params.mode is SpeakerMode.EMBEDDED:
        parts.append(np.repeat(table[speaker_id][:, None], len(tokens), axis=1))
    parts.append(np.repeat(np.asarray(cond, dtype=np.float64)[:, None], len(tokens), axis=1))
    d_in = np.vstack(parts)
    if d_in.shape[0] != params.d_in:
        raise DimensionMismatch(f"decoder input has {d_in.shape[0]} rows, model expects {params.d_in}")
    frames = upsample(d_in, durations)
    return params.w2 @ np.tanh(params.w1 @ frames + params.b1[:, None]) + params.b2[:, None]
