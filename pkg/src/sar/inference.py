"""Decoding: greedy, beam search, rotation ensembling and lexicon matching."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .backbone import FeatureMap
from .data import make_batch, resize_policy
from .model import SAR, DecoderState
from .tensor import Tensor, no_grad

ORIENTATIONS = (0, 90, -90)


@dataclass
class Hypothesis:
    tokens: list[int]
    logprob: float
    state: DecoderState | None = None
    finished: bool = False
    steps: list[float] = field(default_factory=list)   # per-step ln p, END included
    attention: list[np.ndarray] = field(default_factory=list)


@dataclass
class Recognition:
    text: str
    score: float                     # mean per-step log-probability
    logprob: float                   # accumulated log-probability
    attention: list[np.ndarray]      # one H' x W' map per emitted step (END included)
    orientation: int = 0
    finished: bool = True
    candidates: list["Recognition"] = field(default_factory=list)


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def _finish(model: SAR, hyp: Hypothesis, orientation: int = 0) -> Recognition:
    text = model.charset.decode(hyp.tokens)
    n = max(1, len(hyp.steps))
    return Recognition(text, hyp.logprob / n, hyp.logprob, list(hyp.attention), orientation, hyp.finished)


def greedy_decode(model: SAR, fmap: FeatureMap, max_len: int | None = None) -> list[Recognition]:
    """Argmax decoding for every sample of a (batched) feature map."""
    cs = model.charset
    max_len = max_len or model.config.max_len
    with no_grad():
        state, ctx = model.start(fmap)
        n = fmap.values.shape[0]
        hyps = [Hypothesis([], 0.0) for _ in range(n)]
        inputs = np.full(n, cs.START, dtype=np.int64)
        for _ in range(max_len):
            logits, state, alpha = model.step(inputs, state, ctx)
            lp = _log_softmax(logits.data.astype(np.float64))
            best = lp.argmax(axis=1)
            for i, h in enumerate(hyps):
                if h.finished:
                    continue
                k = int(best[i])
                h.tokens.append(k)
                h.logprob += float(lp[i, k])
                h.steps.append(float(lp[i, k]))
                h.attention.append(alpha.data[i].copy())
                h.finished = k == cs.END
            if all(h.finished for h in hyps):
                break
            inputs = np.where(best < len(cs), best, cs.START)
    return [_finish(model, h) for h in hyps]


def beam_search(model: SAR, fmap: FeatureMap, k: int = 5, max_len: int | None = None) -> Recognition:
    """Beam search for one sample, ranking by accumulated log-probability.

    Each step keeps the ``k - len(completed)`` best extensions of the live
    beam; extensions ending in END move to the completed pool. Search stops
    when ``k`` hypotheses are complete or after ``max_len`` steps. Returns
    the best completed hypothesis, or the best live one if none completed.
    """
    if k < 1:
        raise ValueError("beam width must be >= 1")
    if fmap.values.shape[0] != 1:
        raise ValueError("beam_search decodes one sample at a time")
    cs = model.charset
    max_len = max_len or model.config.max_len
    with no_grad():
        state, ctx0 = model.start(fmap)
        live = [Hypothesis([], 0.0, state)]
        done: list[Hypothesis] = []
        for _ in range(max_len):
            # each hypothesis is stepped on its own, so its score never depends on
            # the rest of the beam (batched matmuls round differently in float32)
            lp, states, alphas = [], [], []
            for h in live:
                inp = np.array([h.tokens[-1] if h.tokens else cs.START], dtype=np.int64)
                logits, st, alpha = model.step(inp, h.state, ctx0)
                lp.append(_log_softmax(logits.data.astype(np.float64))[0])
                states.append(st)
                alphas.append(alpha.data[0])
            lp = np.stack(lp)
            total = np.array([h.logprob for h in live])[:, None] + lp
            budget = k - len(done)
            flat = total.reshape(-1)
            # stable sort keeps ties in (hypothesis, class) order
            order = np.argsort(-flat, kind="stable")[:budget]
            nxt = []
            for f in order:
                row, tok = divmod(int(f), lp.shape[1])
                parent = live[row]
                hyp = Hypothesis(parent.tokens + [tok], float(flat[f]), None, tok == cs.END,
                                 parent.steps + [float(lp[row, tok])],
                                 parent.attention + [alphas[row].copy()])
                if hyp.finished:
                    done.append(hyp)
                else:
                    hyp.state = states[row]
                    nxt.append(hyp)
            live = nxt
            if len(done) >= k or not live:
                break
        pool = done if done else live
        best = max(pool, key=lambda h: h.logprob)
    return _finish(model, best)


def _features_for(model: SAR, img: np.ndarray) -> FeatureMap:
    resized, cw = resize_policy(img, height=model.config.backbone.input_height)
    batch, widths = make_batch([(resized, cw)], dtype=model.store.dtype)
    with no_grad():
        return model.features(Tensor(batch), widths)


def rotate_image(img: np.ndarray, orientation: int) -> np.ndarray:
    """+90 turns the image anticlockwise, -90 clockwise."""
    if orientation == 0:
        return img
    return np.ascontiguousarray(np.rot90(img, k=1 if orientation == 90 else -1, axes=(0, 1)))


def recognize(model: SAR, img: np.ndarray, beam: int = 5, rotate: bool = False) -> Recognition:
    """Recognize a raw image; with ``rotate``, images taller than wide are also
    decoded turned by +/-90 degrees and the best length-normalized score wins."""
    orientations = ORIENTATIONS if rotate and img.shape[0] > img.shape[1] else (0,)
    cands = []
    for o in orientations:
        fmap = _features_for(model, rotate_image(img, o))
        if beam > 1:
            rec = beam_search(model, fmap, beam)
        else:
            rec = greedy_decode(model, fmap)[0]
        rec.orientation = o
        cands.append(rec)
    best = max(cands, key=lambda r: r.score)
    best.candidates = cands
    return best


def recognize_with_rotation(model: SAR, img: np.ndarray, beam: int = 5) -> Recognition:
    return recognize(model, img, beam=beam, rotate=True)


# ---------------------------------------------------------------- lexicon


def levenshtein(a: str, b: str) -> int:
    """Unit-cost edit distance, two-row dynamic programming."""
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, 1):
        cur = [i]
        for j, cb in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]


def lexicon_match(prediction: str, lexicon: list[str], ignore_case: bool = False) -> str:
    """Lexicon word closest to ``prediction``; ties go to the earliest entry."""
    if not lexicon:
        raise ValueError("empty lexicon")
    p = prediction.lower() if ignore_case else prediction
    best, best_d = lexicon[0], math.inf
    for word in lexicon:
        d = levenshtein(p, word.lower() if ignore_case else word)
        if d < best_d:
            best, best_d = word, d
            if d == 0:
                break
    return best


# ---------------------------------------------------------------- evaluation


def sequence_accuracy(predictions: list[str], labels: list[str]) -> float:
    """Fraction of exact matches."""
    if len(predictions) != len(labels):
        raise ValueError("predictions and labels differ in length")
    if not labels:
        raise ValueError("nothing to evaluate")
    return sum(p == t for p, t in zip(predictions, labels)) / len(labels)


def lexicon_accuracy(predictions: list[str], labels: list[str], lexicon: list[str],
                     ignore_case: bool = False) -> float:
    """Exact-match accuracy after snapping each prediction to its nearest lexicon word."""
    snapped = [lexicon_match(p, lexicon, ignore_case) for p in predictions]
    if ignore_case:
        return sequence_accuracy([s.lower() for s in snapped], [t.lower() for t in labels])
    return sequence_accuracy(snapped, labels)


def predict_batch(model: SAR, images: list[np.ndarray], batch_size: int = 32) -> list[str]:
    """Greedy transcriptions of raw images, decoded in batches."""
    out: list[str] = []
    h = model.config.backbone.input_height
    for i in range(0, len(images), batch_size):
        chunk = [resize_policy(img, height=h) for img in images[i:i + batch_size]]
        x, widths = make_batch(chunk, dtype=model.store.dtype)
        with no_grad():
            fmap = model.features(Tensor(x), widths)
        out += [r.text for r in greedy_decode(model, fmap)]
    return out
