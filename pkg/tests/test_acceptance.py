"""Acceptance criteria 1-8 on the seeded fixture (L=4, H=4, d=32, |X|=64, 16 visual tokens,
64-scene corpus). Each test records one PASS/FAIL line, printed in the terminal summary."""

import time
from fractions import Fraction

import numpy as np
import pytest
from scipy import stats

from attnsink import corpus as C
from attnsink.analysis import (calibrate_sigma, detect_sinks_in_map,
                               relevance_profile, select_potential_sink, similarity_profile)
from attnsink.attack import AttackConfig, gaussian_baseline, run_attack, window_attention_mass
from attnsink.cli import main
from attnsink.decoding import (DecodeConfig, beam_decode, decode, greedy_decode, nucleus_decode,
                               nucleus_rng, nucleus_step)
from attnsink.metrics import hallucination_metrics, perplexity, vqa_accuracy
from attnsink.model import ForwardTrace, ModelConfig, assemble, caption_loss, forward

from conftest import record_acceptance
from gradsuite import SEEDS, check_objective, check_primitive, primitive_cases
from test_corpus import random_response

LAYER = 3
ATTACK_SCENES = 10


# ---------------------------------------------------------------- shared fixtures


@pytest.fixture(scope="module")
def clean_responses(trained_params, fixture_scenes):
    out = []
    for s in fixture_scenes:
        img = C.render_scene(s)
        out.append(greedy_decode(assemble(img, C.prompt_ids(), trained_params), trained_params))
    return out


@pytest.fixture(scope="module")
def calibrated_sigma(clean_responses):
    return calibrate_sigma([r.trace for r in clean_responses], LAYER)


@pytest.fixture(scope="module")
def attack_runs(trained_params, fixture_scenes, calibrated_sigma):
    cfg = AttackConfig(epsilon=8 / 255, gamma=5 / 255, steps=30, alpha=1.0, sigma=calibrated_sigma)
    t0 = time.perf_counter()
    runs = [run_attack(C.render_scene(s), C.prompt_ids(), trained_params, cfg)
            for s in fixture_scenes[:ATTACK_SCENES]]
    return runs, time.perf_counter() - t0, cfg


# ---------------------------------------------------------------- criterion 1


def test_criterion_1_gradient_fidelity():
    t0 = time.perf_counter()
    worst = {}
    for name in sorted(primitive_cases()):
        worst[name] = max(check_primitive(name, s) for s in SEEDS)
    worst["objective_all_pixels_8x8"] = max(check_objective(s) for s in SEEDS)
    worst["objective_sampled_pixels_16x16"] = max(
        check_objective(s, ModelConfig(), n_coords=32) for s in SEEDS)
    elapsed = time.perf_counter() - t0
    top = max(worst.values())
    ok = top <= 1e-4 and elapsed < 60
    record_acceptance(1, ok, f"max rel-err {top:.2e} over {len(worst)} checks x 20 seeds "
                             f"(<= 1e-4), runtime {elapsed:.1f}s (< 60s)")
    assert top <= 1e-4, {k: v for k, v in worst.items() if v > 1e-4}
    assert elapsed < 60


# ---------------------------------------------------------------- criterion 2


def test_criterion_2_attack_invariants(attack_runs, trained_params, fixture_scenes):
    runs, elapsed, cfg = attack_runs
    failures = []
    for s, tr in zip(fixture_scenes, runs):
        first, last = tr.records[0], tr.final
        clean = C.render_scene(s).pixels
        step0 = forward(assemble(clean, C.prompt_ids(), trained_params), first.response,
                        trained_params)
        # mass onto the final idx in the step-0 trace; the step-0 record's own idx otherwise
        base_final_idx = (window_attention_mass(step0, LAYER, last.idx)
                          if step0.prompt_len <= last.idx < step0.length else first.window_mass)
        delta = tr.adversarial - clean
        checks = {
            "loss": last.total_loss < first.total_loss,
            "mass_vs_step0_record": last.window_mass > first.window_mass,
            "mass_vs_step0_same_idx": last.window_mass > base_final_idx,
            "linf": float(np.abs(delta).max()) <= cfg.epsilon,
            "every_step_linf": all(r.delta_linf <= cfg.epsilon for r in tr.records),
            "range": tr.adversarial.min() >= 0.0 and tr.adversarial.max() <= 1.0,
        }
        if not all(checks.values()):
            failures.append((s.id, [k for k, v in checks.items() if not v],
                             first.total_loss, last.total_loss, first.idx, last.idx))
    ok = not failures and elapsed < 180
    record_acceptance(2, ok, f"{ATTACK_SCENES - len(failures)}/{ATTACK_SCENES} scenes satisfy "
                             f"loss/mass/budget/range (sigma={cfg.sigma:.2f}), "
                             f"runtime {elapsed:.1f}s (< 180s); failures {failures}")
    assert not failures
    assert elapsed < 180


# ---------------------------------------------------------------- criterion 3


def test_criterion_3_decoding_equivalences(trained_params, untrained_params):
    prompts = C.generate_corpus(1, 100)
    mismatches = 0
    bad_stop = 0
    max_new = DecodeConfig().max_new_tokens
    eos = trained_params.config.eos_id

    def terminated(r):
        if r.stop_reason == "eos":
            return r.tokens[-1] == eos and eos not in r.tokens[:-1]
        return r.stop_reason == "length" and len(r.tokens) == max_new and eos not in r.tokens

    for k, s in enumerate(prompts):
        asm = assemble(C.render_scene(s), C.prompt_ids(), trained_params)
        g = greedy_decode(asm, trained_params)
        b = beam_decode(asm, trained_params, DecodeConfig(strategy="beam", beam_width=1))
        mismatches += g.tokens != b.tokens
        bad_stop += (not terminated(g)) + (not terminated(b))
        if k < 10:
            for cfg in (DecodeConfig(strategy="beam", beam_width=3),
                        DecodeConfig(strategy="nucleus", top_p=0.9, seed=k)):
                bad_stop += not terminated(decode(asm, trained_params, cfg))

    # nucleus with top-p = 1 on a broad (untrained) next-token distribution
    asm = assemble(np.full((16, 16, 3), 0.5), C.prompt_ids(), untrained_params)
    logits = forward(asm, [], untrained_params).logits.data[-1]
    z = logits - logits.max()
    exact = np.exp(z) / np.exp(z).sum()
    cfg = DecodeConfig(strategy="nucleus", top_p=1.0, max_new_tokens=1)
    draws = np.array([nucleus_step(logits, cfg, nucleus_rng(seed))[0] for seed in range(10_000)])
    # the sampler is the one nucleus_decode uses, seeded the same way
    same_first = all(
        nucleus_decode(asm, untrained_params,
                       DecodeConfig(strategy="nucleus", top_p=1.0, max_new_tokens=1, seed=sd)).tokens[0]
        == draws[sd] for sd in range(200))
    observed = np.bincount(draws, minlength=exact.size).astype(float)
    expected = exact * draws.size
    big = expected >= 5
    obs = np.append(observed[big], observed[~big].sum())
    exp_ = np.append(expected[big], expected[~big].sum())
    if exp_[-1] == 0:
        obs, exp_ = obs[:-1], exp_[:-1]
    pval = stats.chisquare(obs, exp_).pvalue
    ok = mismatches == 0 and bad_stop == 0 and pval > 0.001 and same_first
    record_acceptance(3, ok, f"beam(1) vs greedy mismatches {mismatches}/100; chi-square p={pval:.4f} "
                             f"(> 0.001, {len(obs)} bins, 10000 draws); bad terminations {bad_stop}")
    assert mismatches == 0
    assert same_first
    assert pval > 0.001
    assert bad_stop == 0


# ---------------------------------------------------------------- criterion 4


def test_criterion_4_formula_oracles(untrained_params):
    rng = np.random.default_rng(2024)
    scenes = C.generate_corpus(77, 50)
    items = [C.oracle_annotate(random_response(rng, s), s) for s in scenes]
    rep = hallucination_metrics(items)

    n = len(items)
    sent = [len(a.spans) for a in items]
    hs = [a.hallucinated.count(True) for a in items]
    words = [sum(1 for t in a.tokens if C.is_word(t)) for a in items]
    hw = [len(a.offending) for a in items]
    want = (float(Fraction(sum(sent), n)), float(Fraction(sum(words), n)),
            float(Fraction(sum(hs), n)), float(Fraction(sum(hw), n)),
            float(sum(Fraction(h, s) for h, s in zip(hs, sent) if s) / sum(1 for s in sent if s)),
            float(sum(Fraction(h, w) for h, w in zip(hw, words) if w) / sum(1 for w in words if w)))
    got = (rep.spi, rep.wpi, rep.hspi, rep.hwpi, rep.hsr, rep.hwr)
    metrics_ok = got == want

    red, blue = C.encode("red"), C.encode("blue")
    vqa = [vqa_accuracy(red, [red] * k + [blue] * (5 - k)) for k in range(6)]
    vqa_ok = vqa == [0.0, 1 / 3, 2 / 3, 1.0, 1.0, 1.0]

    uniform = untrained_params.copy()
    uniform.arrays["tok_emb"] = np.zeros_like(uniform["tok_emb"])
    asm = assemble(np.full((16, 16, 3), 0.5), C.prompt_ids(), uniform)
    ppl = perplexity(C.encode("there is a red cat . there is a blue cup ."), asm, uniform).value
    ppl_ok = abs(ppl - 64.0) <= 1e-9

    ok = metrics_ok and vqa_ok and ppl_ok
    record_acceptance(4, ok, f"metrics recount exact={metrics_ok} on 50 items; vqa {vqa}; "
                             f"uniform perplexity {ppl!r} (|X|=64, tol 1e-9)")
    assert metrics_ok, (got, want)
    assert vqa_ok
    assert ppl_ok


# ---------------------------------------------------------------- criterion 5


def _planted_map(rng, t, prompt_len, masses, heads=4):
    """Uniform causal heads with each column j in ``masses`` carrying mean mass m."""
    maps = []
    for _ in range(heads):
        a = np.tril(np.ones((t, t)))
        a /= a.sum(axis=1, keepdims=True)
        maps.append(a)
    a = np.stack(maps)
    for j, m in masses.items():
        # per-head, per-row jitter that averages out exactly over heads
        jitter = rng.uniform(-0.05, 0.05, size=(heads, t))
        jitter -= jitter.mean(axis=0, keepdims=True)
        for h in range(heads):
            for i in range(j + 1, t):
                a[h, i, j] = m + jitter[h, i]
    for h in range(heads):
        for i in range(t):
            fixed = [j for j in masses if j < i]
            if not fixed:
                continue
            rest = [k for k in range(i + 1) if k not in masses or k >= i]
            a[h, i, rest] = (1 - a[h, i, fixed].sum()) / len(rest)
    return a


def test_criterion_5_sink_detection():
    rng = np.random.default_rng(5)
    hits = misses = fp_planted = fp_uniform = 0
    for _ in range(200):
        pl = int(rng.integers(4, 21))
        t = int(rng.integers(pl + 8, pl + 40))
        # both columns keep at least w_min = 4 later rows
        cols = rng.choice(np.arange(pl, t - 4), size=2, replace=False)
        strong, weak = int(cols[0]), int(cols[1])
        a = _planted_map(rng, t, pl, {strong: 0.21, weak: 0.19})
        found = detect_sinks_in_map(a, pl, tau=0.2, w_min=4).positions
        hits += strong in found
        misses += strong not in found
        fp_planted += len(set(found) - {strong})
        u = _planted_map(rng, t, pl, {})
        fp_uniform += len(detect_sinks_in_map(u, pl, tau=0.2, w_min=4).positions)
    recall = hits / (hits + misses)
    ok = recall == 1.0 and fp_uniform == 0
    record_acceptance(5, ok, f"recall {recall:.3f} on 200 planted 0.21 columns; "
                             f"false positives on uniform maps {fp_uniform}; "
                             f"0.19 columns / other positions flagged {fp_planted}")
    assert recall == 1.0
    assert fp_uniform == 0
    assert fp_planted == 0


# ---------------------------------------------------------------- criterion 6


def _hwr(tokens, scene):
    return hallucination_metrics([C.oracle_annotate(tokens, scene)]).hwr


def test_criterion_6_end_to_end(trained_params, untrained_params, fixture_data, fixture_scenes,
                                clean_responses, attack_runs):
    loss0 = caption_loss(untrained_params, fixture_data, C.prompt_ids())
    loss1 = caption_loss(trained_params, fixture_data, C.prompt_ids())
    train_ok = loss1 <= 0.5 * loss0

    clean_report = hallucination_metrics(
        [C.oracle_annotate(r.tokens, s) for r, s in zip(clean_responses, fixture_scenes)])
    clean_ok = clean_report.hwr <= 0.20

    runs, _, cfg = attack_runs
    scenes = fixture_scenes[:ATTACK_SCENES]
    clean_hwr = [_hwr(r.tokens, s) for r, s in zip(clean_responses, scenes)]
    adv_hwr = [_hwr(tr.final.response, s) for tr, s in zip(runs, scenes)]
    noisy_hwr = []
    for s in scenes:
        noisy = gaussian_baseline(C.render_scene(s), cfg.epsilon, seed=s.id)
        r = greedy_decode(assemble(noisy, C.prompt_ids(), trained_params), trained_params)
        noisy_hwr.append(_hwr(r.tokens, s))
    d_attack = np.array(adv_hwr) - np.array(clean_hwr)
    d_noise = np.array(noisy_hwr) - np.array(clean_hwr)
    hwr_clean_mean, hwr_adv_mean = float(np.mean(clean_hwr)), float(np.mean(adv_hwr))
    adv_ok = hwr_adv_mean >= hwr_clean_mean - 0.02
    dir_ok = float(np.mean(np.abs(d_noise))) < float(np.mean(d_attack))

    ok = train_ok and clean_ok and adv_ok and dir_ok
    record_acceptance(6, ok, f"loss {loss0:.3f}->{loss1:.4f} (<= 0.5x); clean HWR "
                             f"{clean_report.hwr:.3f} (<= 0.20); HWR clean/adv on {len(scenes)} scenes "
                             f"{hwr_clean_mean:.3f}/{hwr_adv_mean:.3f}; per-scene attack deltas "
                             f"{np.round(d_attack, 3).tolist()}; mean attack dHWR {d_attack.mean():.4f} "
                             f"vs gaussian mean |dHWR| {np.abs(d_noise).mean():.4f}")
    assert train_ok
    assert clean_ok
    assert adv_ok
    assert dir_ok


# ---------------------------------------------------------------- criterion 7


def _pipeline(root):
    w0, w1 = root / "model" / "init.tmlm", root / "model" / "trained.tmlm"
    steps = [
        ["gen-model", "--seed", "3", "--out", str(w0)],
        ["gen-corpus", "--seed", "3", "--n", "12", "--out", str(root / "corpus")],
        ["train", "--weights", str(w0), "--corpus", str(root / "corpus"), "--epochs", "15",
         "--out", str(w1)],
        ["attack", "--weights", str(w1), "--corpus", str(root / "corpus"), "--limit", "3",
         "--steps", "5", "--eps", "8/255", "--gamma", "5", "--out", str(root / "attack")],
        ["eval", "--weights", str(w1), "--corpus", str(root / "corpus"), "--images-dir",
         str(root / "attack"), "--out", str(root / "eval" / "metrics.csv")],
    ]
    for argv in steps:
        assert main(argv) == 0, argv
    files = [w0, w1, root / "eval" / "metrics.csv"]
    files += sorted((root / "attack").glob("*.trace.json"))
    files += sorted((root / "attack").glob("*.f32"))
    return {str(f.relative_to(root)): f.read_bytes() for f in files}


def test_criterion_7_determinism(tmp_path):
    a = _pipeline(tmp_path / "run1")
    b = _pipeline(tmp_path / "run2")
    same = a.keys() == b.keys() and all(a[k] == b[k] for k in a)
    n_traces = sum(1 for k in a if k.endswith(".trace.json"))
    record_acceptance(7, same, f"{len(a)} artifacts (weights x2, {n_traces} traces, adversarial "
                               f"images, metrics.csv) byte-identical across two runs")
    assert n_traces == 3
    assert same


# ---------------------------------------------------------------- criterion 8


def test_criterion_8_analysis_consistency(trained_params, fixture_scenes, clean_responses,
                                          attack_runs):
    rng = np.random.default_rng(8)
    changed = 0
    for _ in range(100):
        t, pl, d = int(rng.integers(8, 40)), int(rng.integers(2, 6)), int(rng.integers(4, 33))
        h = rng.normal(size=(t, d))
        c = float(np.exp(rng.uniform(np.log(1e-3), np.log(1e3))))
        att = np.tril(np.ones((t, t)))
        att /= att.sum(axis=1, keepdims=True)
        base = ForwardTrace.from_arrays([h] * 3, [att[None]] * 2, np.zeros((t, 4)), pl)
        scaled = ForwardTrace.from_arrays([h * c] * 3, [att[None]] * 2, np.zeros((t, 4)), pl)
        changed += (select_potential_sink(similarity_profile(base, 1))
                    != select_potential_sink(similarity_profile(scaled, 1)))

    responses = list(clean_responses)
    runs, _, _ = attack_runs
    for tr, s in zip(runs, fixture_scenes):
        img = tr.adversarial
        responses.append(greedy_decode(assemble(img, C.prompt_ids(), trained_params), trained_params))
    images = [C.render_scene(s) for s in fixture_scenes] + [tr.adversarial for tr in runs]
    broken = 0
    for r, img in zip(responses, images):
        rel = relevance_profile(r, img, trained_params)
        pieces = [t for a, b in rel.spans for t in r.tokens[a:b]]
        contiguous = all(rel.spans[k][1] == rel.spans[k + 1][0] for k in range(len(rel.spans) - 1))
        covers = not rel.spans or (rel.spans[0][0] == 0 and rel.spans[-1][1] == len(r.tokens))
        broken += not (pieces == r.tokens and contiguous and covers)
    ok = changed == 0 and broken == 0
    record_acceptance(8, ok, f"argmax changed under rescaling in {changed}/100 traces; "
                             f"span partition violations {broken}/{len(responses)} fixture responses")
    assert changed == 0
    assert broken == 0
