"""Small random model instances shared by the toy-model and acceptance tests."""
import numpy as np

from prosodyne.conditioning import EmbeddingTable, FeatureMask
from prosodyne.toymodel.model import (PARAM_NAMES, SpeakerMode, TrainItem, batch_loss, grad,
                                      init_params, make_batch)


def random_instance(seed, mode=SpeakerMode.ENCODED, mask=None, vocab=5, d_e=3, d_s=4,
                    hidden=6, n_items=4, scale=1.0):
    rng = np.random.default_rng(seed)
    if mask is None:
        mask = FeatureMask(*rng.random(4) < 0.5)
    params = init_params(vocab, d_e, d_s, hidden, mask, mode, rng, rng.normal(size=80))
    params.b1 = rng.normal(0.0, 0.3, hidden)
    params.w2 *= scale
    speakers = ["a", "b", "c"]
    items = []
    for i in range(n_items):
        n_tok = int(rng.integers(1, 5))
        durations = rng.integers(0, 4, n_tok)
        durations[0] = max(durations[0], 1)
        target = rng.normal(size=(int(durations.sum()), 80))
        p = rng.normal(size=mask.n_kept)
        cond = p if mode is SpeakerMode.EMBEDDED else np.concatenate([rng.normal(size=d_s), p])
        items.append(TrainItem.build(f"u{i}", speakers[i % 3], rng.integers(0, vocab, n_tok),
                                     durations, target, cond))
    table = None
    if mode is SpeakerMode.EMBEDDED:
        table = EmbeddingTable.random(speakers, d_s, rng, 0.5)
    return params, items, table


def numeric_grads(params, batch, table, h=1e-4):
    out = {}
    for name in PARAM_NAMES:
        arr = getattr(params, name)
        g = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            old = arr[idx]
            arr[idx] = old + h
            up = batch_loss(params, batch, table)
            arr[idx] = old - h
            down = batch_loss(params, batch, table)
            arr[idx] = old
            g[idx] = (up - down) / (2 * h)
        out[name] = g
    spk = {}
    if table is not None:
        for sid in batch.speaker_ids:
            vec = table[sid]
            g = np.zeros_like(vec)
            for k in range(vec.size):
                old = vec[k]
                vec[k] = old + h
                up = batch_loss(params, batch, table)
                vec[k] = old - h
                down = batch_loss(params, batch, table)
                vec[k] = old
                g[k] = (up - down) / (2 * h)
            spk[sid] = g
    return out, spk


def max_relative_error(analytic, numeric, floor=1e-6):
    """max |a - n| / max(|a|, |n|, floor) over every entry."""
    a, n = np.ravel(analytic), np.ravel(numeric)
    return float(np.max(np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)))


def gradient_check(seed, mode):
    params, items, table = random_instance(seed, mode)
    batch = make_batch(items)
    _, grads, spk = grad(params, batch, table)
    num, num_spk = numeric_grads(params, batch, table)
    errs = [max_relative_error(grads[k], num[k]) for k in PARAM_NAMES]
    errs += [max_relative_error(spk[s], num_spk[s]) for s in num_spk]
    return max(errs)
