"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The learning checks train real models on one core and take a while; the
trained toy model is shared by the overfit, beam and rotation checks.
"""

import itertools
import math
import random
import time
from fractions import Fraction

import numpy as np
import pytest
from threadpoolctl import threadpool_limits

from sar import attention as A
from sar import verify
from sar.backbone import BackboneConfig, FeatureMap, extract_features
from sar.charset import CharSet
from sar.inference import (beam_search, greedy_decode, levenshtein, lexicon_match, predict_batch, recognize,
                           sequence_accuracy, _features_for)
from sar.model import SAR, ModelConfig
from sar.params import ParamStore
from sar.synth import SynthSpec, synth_generate
from sar.tensor import Tensor, no_grad
from sar.toy import toy_model_config, toy_spec
from sar.train import Checkpoint, GroupSampler, TrainConfig, lr_at, prepare_samples, train_loop

from conftest import loop_attention, rescore

pytestmark = pytest.mark.slow

TOY_BATCH = 8
TOY_TIME_LIMIT = 30 * 60


def report(capsys, number, ok, detail):
    with capsys.disabled():
        print(f"\ncriterion {number}: {'PASS' if ok else 'FAIL'}  {detail}", flush=True)


def fit(model, samples, max_iterations, check_every, target, time_limit=None, seed=0):
    """Train on ``samples`` until greedy training accuracy reaches ``target``.

    Returns (iterations, training accuracy, seconds). Evaluation time counts
    towards the clock.
    """
    n = len(samples)
    epochs = -(-max_iterations * TOY_BATCH // n) + 1
    cfg = TrainConfig(batch_size=TOY_BATCH, group_sizes=[n], epochs_per_group=epochs, groups=1,
                      max_iterations=max_iterations, seed=seed)
    sampler = GroupSampler([n], [n], TOY_BATCH, epochs=epochs, groups=1, seed=seed)
    images, labels = [s.image for s in samples], [s.label for s in samples]
    state = {"acc": 0.0}
    t0 = time.perf_counter()

    def should_stop(it):
        if it % check_every:
            return time_limit is not None and time.perf_counter() - t0 > time_limit
        state["acc"] = sequence_accuracy(predict_batch(model, images), labels)
        return state["acc"] >= target or (time_limit is not None and time.perf_counter() - t0 > time_limit)

    ckpt, _ = train_loop(model, cfg, sampler, [prepare_samples(samples)], should_stop=should_stop)
    if ckpt.iteration % check_every:
        state["acc"] = sequence_accuracy(predict_batch(model, images), labels)
    return ckpt.iteration, state["acc"], time.perf_counter() - t0


@pytest.fixture(scope="module")
def toy():
    """The toy model after the overfit run, with its training record."""
    samples = synth_generate(toy_spec(seed=1), 64)
    model = SAR(toy_model_config(), seed=0)
    iterations, acc, seconds = fit(model, samples, 5000, 250, 0.95, TOY_TIME_LIMIT)
    return model, samples, iterations, acc, seconds


# 1 -----------------------------------------------------------------------


def test_gradient_fidelity(capsys):
    t0 = time.perf_counter()
    ops = verify.check_ops()
    model = verify.check_model("proposed2d")
    seconds = time.perf_counter() - t0
    worst = max(r.max_rel_error for r in ops + [model])
    missing = set(verify.op_names()) - {r.name[3:] for r in ops}
    ok = worst <= 1e-5 and seconds < 120 and not missing
    report(capsys, 1, ok, f"{len(ops)} ops + micro model, max rel err {worst:.2e} "
                          f"(model {model.max_rel_error:.2e}), {seconds:.0f}s")
    assert not missing
    assert worst <= 1e-5
    assert seconds < 120


# 2 -----------------------------------------------------------------------


def test_attention_matches_loop_oracle(capsys):
    worst = 0.0
    for seed in range(20):
        r = np.random.default_rng(1000 + seed)
        H, W, D, dh, da = int(r.integers(1, 4)), int(r.integers(2, 7)), 4, 3, 5
        valid = int(r.integers(1, W + 1))
        p = A.make_variant("proposed2d", D, dh, da, seed=seed)
        p.store = p.store.astype(np.float64)
        p.conv_bias.data[...] = r.standard_normal(da)
        V = r.standard_normal((H, W, D))
        h = r.standard_normal(dh)
        g, alpha = A.attend(p, FeatureMap(Tensor(V[None]), np.array([valid])), Tensor(h[None]))
        g_ref, a_ref = loop_attention(V, h, p.conv_weight.data, p.conv_bias.data, p.w_h.data, p.w_e.data, valid)
        worst = max(worst, np.max(np.abs(alpha.data[0] - a_ref)), np.max(np.abs(g.data[0] - g_ref)))
    ok = worst <= 1e-10
    report(capsys, 2, ok, f"20 instances, max abs diff {worst:.1e}")
    assert ok


# 3 -----------------------------------------------------------------------


def test_shape_contract(capsys):
    cfg = BackboneConfig()
    store = ParamStore(np.float32)
    from sar.backbone import build_backbone

    build_backbone(store, cfg, seed=0)
    bad = []
    with no_grad():
        first = extract_features(store, cfg, np.zeros((48, 160, 1), np.float32)).values.shape
        for w in range(48, 161):
            shape = extract_features(store, cfg, np.zeros((48, w, 1), np.float32)).values.shape
            if shape != (1, 6, math.ceil(w / 4), 512):
                bad.append((w, shape))
    ok = first == (1, 6, 40, 512) and not bad
    report(capsys, 3, ok, f"48x160 -> {first[1:]}, {113 - len(bad)}/113 widths give 6 x ceil(W/4) x 512")
    assert first == (1, 6, 40, 512)
    assert not bad


# 4 -----------------------------------------------------------------------


def test_toy_overfit(toy, capsys):
    _, _, iterations, acc, seconds = toy
    ok = acc >= 0.95 and iterations <= 5000 and seconds < TOY_TIME_LIMIT
    report(capsys, 4, ok, f"training accuracy {acc:.1%} after {iterations} iterations, {seconds / 60:.1f} min")
    assert acc >= 0.95
    assert iterations <= 5000
    assert seconds < TOY_TIME_LIMIT


# 5 -----------------------------------------------------------------------


GENERAL_MAX_ITERATIONS = 12000


def test_generalization(capsys):
    samples = synth_generate(toy_spec(seed=5), 640)
    train, held = samples[:512], samples[512:]
    model = SAR(toy_model_config(), seed=0)
    best = {"acc": 0.0, "it": 0}
    t0 = time.perf_counter()
    hi, hl = [s.image for s in held], [s.label for s in held]
    cfg = TrainConfig(batch_size=TOY_BATCH, group_sizes=[512], epochs_per_group=200, groups=1,
                      max_iterations=GENERAL_MAX_ITERATIONS)
    sampler = GroupSampler([512], [512], TOY_BATCH, epochs=200, groups=1)

    def should_stop(it):
        if it % 500:
            return False
        acc = sequence_accuracy(predict_batch(model, hi), hl)
        if acc > best["acc"]:
            best.update(acc=acc, it=it)
        return acc >= 0.8

    ckpt, _ = train_loop(model, cfg, sampler, [prepare_samples(train)], should_stop=should_stop)
    final = sequence_accuracy(predict_batch(model, hi), hl)
    train_acc = sequence_accuracy(predict_batch(model, [s.image for s in train]), [s.label for s in train])
    ok = final >= 0.8
    report(capsys, 5, ok, f"held-out accuracy {final:.1%} (train {train_acc:.1%}) after {ckpt.iteration} "
                          f"iterations, {(time.perf_counter() - t0) / 60:.1f} min")
    assert final >= 0.8


# 6 -----------------------------------------------------------------------


def test_beam_properties(toy, capsys):
    model = toy[0]
    samples = synth_generate(toy_spec(seed=21), 100)
    greedy_mismatch, worse = 0, 0
    for s in samples:
        fmap = _features_for(model, s.image)
        g = greedy_decode(model, fmap)[0]
        b1 = beam_search(model, fmap, 1)
        b5 = beam_search(model, fmap, 5)
        greedy_mismatch += (b1.text, b1.logprob) != (g.text, g.logprob)
        worse += b5.logprob < b1.logprob
    exhaustive_mismatch = 0
    for seed in range(5):
        cfg = verify.micro_config()
        cfg.charset, cfg.max_len = CharSet("abc"), 4
        micro = SAR(cfg, seed=seed)
        verify.generic_point(micro.store, seed)
        x = np.random.default_rng(seed).uniform(-1, 1, size=(1, 16, 32, 1))
        with no_grad():
            fmap = micro.features(Tensor(x), [32])
        cs = micro.charset
        best, best_seq = -math.inf, None
        for n in range(cfg.max_len):
            for body in itertools.product(range(len(cs)), repeat=n):
                seq = list(body) + [cs.END]
                score = rescore(micro, fmap, seq)
                if score > best:
                    best, best_seq = score, seq
        rec = beam_search(micro, fmap, k=(len(cs) + 1) ** cfg.max_len)
        exhaustive_mismatch += not (rec.finished and cs.encode(rec.text) == best_seq
                                    and abs(rec.logprob - best) <= 1e-9)
    ok = greedy_mismatch == 0 and worse == 0 and exhaustive_mismatch == 0
    report(capsys, 6, ok, f"k=1 vs greedy mismatches {greedy_mismatch}/100, k=5 below k=1 on {worse}/100, "
                          f"exhaustive mismatches {exhaustive_mismatch}/5")
    assert greedy_mismatch == 0
    assert worse == 0
    assert exhaustive_mismatch == 0


# 7 -----------------------------------------------------------------------


@pytest.mark.parametrize("variant", ["traditional2d", "oned"])
def test_ablation_variants(variant, capsys):
    gc = verify.check_model(variant)
    samples = synth_generate(toy_spec(seed=7), 16)
    model = SAR(toy_model_config(variant), seed=0)
    iterations, acc, seconds = fit(model, samples, 3000, 100, 1.0)
    ok = gc.max_rel_error <= 1e-5 and acc == 1.0 and iterations <= 3000
    report(capsys, 7, ok, f"{variant}: grad_check {gc.max_rel_error:.2e}, 16-sample accuracy {acc:.0%} "
                          f"after {iterations} iterations ({seconds / 60:.1f} min)")
    assert gc.max_rel_error <= 1e-5
    assert acc == 1.0


# 8 -----------------------------------------------------------------------


def _turned(samples, limit):
    """Samples turned +90/-90 alternately, keeping those taller than wide."""
    out = []
    for s in samples:
        sign = 1 if len(out) % 2 == 0 else -1
        turned = np.ascontiguousarray(np.rot90(s.image, sign))
        if turned.shape[0] > turned.shape[1]:
            out.append((turned, -90 * sign))
        if len(out) == limit:
            break
    return out


def _orientations(model, images):
    rotated = exact = 0
    for img, undo in images:
        rec = recognize(model, img, beam=5, rotate=True)
        assert len(rec.candidates) == 3
        rotated += rec.orientation != 0
        exact += rec.orientation == undo
    return rotated, exact


def test_rotation_ensemble(toy, capsys):
    model, train = toy[0], toy[1]
    images = _turned(synth_generate(toy_spec(seed=31, min_len=4), 200), 100)
    assert len(images) == 100
    rotated, exact = _orientations(model, images)
    # the same check on the words the model was trained on, where it can read
    seen = _turned(train, 100)
    seen_rotated, _ = _orientations(model, seen)
    ok = rotated >= 90
    report(capsys, 8, ok, f"rotated orientation chosen on {rotated}/100 unseen words (the upright one on "
                          f"{exact}/100); on turned training images {seen_rotated}/{len(seen)}")
    assert rotated >= 90


# 9 -----------------------------------------------------------------------


def dp_distance(a, b):
    d = [[0] * (len(b) + 1) for _ in range(len(a) + 1)]
    for i in range(len(a) + 1):
        for j in range(len(b) + 1):
            if i == 0 or j == 0:
                d[i][j] = i + j
            else:
                d[i][j] = min(d[i - 1][j] + 1, d[i][j - 1] + 1, d[i - 1][j - 1] + (a[i - 1] != b[j - 1]))
    return d[-1][-1]


def test_lexicon_matcher(capsys):
    r = random.Random(9)

    def word(lo=0, hi=10, alphabet="abcd"):
        return "".join(r.choice(alphabet) for _ in range(r.randint(lo, hi)))

    pairs = [(word(), word()) for _ in range(500)]
    distance_mismatch = sum(levenshtein(a, b) != dp_distance(a, b) for a, b in pairs)
    self_miss = 0
    for _ in range(500):
        lex = [word(1, 8, "abcdefgh") for _ in range(r.randint(1, 30))]
        target = r.choice(lex)
        self_miss += lexicon_match(target, lex) != target
    brute_miss = 0
    for a, _ in pairs[:200]:
        lex = [word(1, 8) for _ in range(10)]
        dists = [dp_distance(a, w) for w in lex]
        brute_miss += lexicon_match(a, lex) != lex[dists.index(min(dists))]
    ok = distance_mismatch == 0 and self_miss == 0 and brute_miss == 0
    report(capsys, 9, ok, f"distance mismatches {distance_mismatch}/500, self-match misses {self_miss}/500, "
                          f"nearest-word misses {brute_miss}/200")
    assert ok


# 10 ----------------------------------------------------------------------


def _determinism_setup():
    cfg = verify.micro_config()
    cfg.precision = "float32"
    cfg.backbone = BackboneConfig(channel_multiplier=Fraction(1, 8), input_height=16, normalize=True)
    spec = SynthSpec(charset=verify.MICRO_SYMBOLS, max_len=4, scale_y=2, margin=1, seed=2,
                     distortions=[{"kind": "none"}, {"kind": "rotate", "max_degrees": 10}])
    sources = [prepare_samples(synth_generate(spec, 12), 16), prepare_samples(synth_generate(spec, 8, 12), 16)]
    tcfg = TrainConfig(batch_size=4, group_sizes=[6, 4], epochs_per_group=2, groups=20, max_iterations=100, seed=3)
    return cfg, sources, tcfg


def _fresh_run(stop_at=None):
    cfg, sources, tcfg = _determinism_setup()
    if stop_at is not None:
        tcfg.max_iterations = stop_at
    model = SAR(cfg, seed=4)
    sampler = GroupSampler([12, 8], tcfg.group_sizes, tcfg.batch_size, tcfg.epochs_per_group, tcfg.groups,
                           seed=tcfg.seed)
    return train_loop(model, tcfg, sampler, sources)


def test_determinism_and_persistence(tmp_path, capsys):
    with threadpool_limits(1):
        a, log_a = _fresh_run()
        b, _ = _fresh_run()
        identical = a.to_bytes() == b.to_bytes() and a.iteration == 100

        half, log_half = _fresh_run(stop_at=40)
        half.save(tmp_path / "half.sarc")
        back = Checkpoint.load(tmp_path / "half.sarc")
        cfg, sources, tcfg = _determinism_setup()
        sampler = GroupSampler([12, 8], tcfg.group_sizes, tcfg.batch_size, tcfg.epochs_per_group, tcfg.groups,
                               seed=999)
        sampler.load_state(back.sampler_state)
        resumed, log_rest = train_loop(back.model(), tcfg, sampler, sources, start_iteration=back.iteration)
        resume_ok = log_half + log_rest == log_a and resumed.to_bytes() == a.to_bytes()

    points = [0, 9999, 10000, 20000, 10 ** 7]
    closed = [max(1e-3 * 0.9 ** (i // 10000), 1e-5) for i in points]
    lr_ok = [lr_at(i) for i in points] == closed
    ok = identical and resume_ok and lr_ok
    report(capsys, 10, ok, f"bit-identical checkpoints {identical}, resume matches loss log {resume_ok}, "
                           f"lr_at closed form {lr_ok}")
    assert identical
    assert resume_ok
    assert lr_ok
