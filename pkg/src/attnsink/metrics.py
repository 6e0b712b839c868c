"""Hallucination counts, VQA accuracy, perplexity, and an offline quality judge.

Ratios (HSR, HWR) are macro averages: each response contributes its own
hallucinated/total ratio and responses are weighted equally. Words are
vocabulary tokens other than punctuation and special tokens.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict
from fractions import Fraction
from typing import Sequence

import numpy as np

from .autodiff import LOG_CLAMP
from .corpus import EOS, SPECIAL_IDS, TERMINATORS, VOCAB, AnnotatedResponse
from .model import ModelParams, PromptAssembly, forward, softmax_vec

CONVENTIONS = {
    "averaging": "macro (per response)",
    "word_unit": "vocabulary tokens excluding punctuation and special tokens",
    "empty_responses": "excluded from ratio means, counted in n_excluded",
}


@dataclass
class HallucinationReport:
    spi: float
    wpi: float
    hspi: float
    hwpi: float
    hsr: float
    hwr: float
    n_items: int
    n_excluded: int = 0
    excluded_items: list[int] = field(default_factory=list)
    conventions: dict = field(default_factory=lambda: dict(CONVENTIONS))

    def to_dict(self) -> dict:
        return asdict(self)


def hallucination_metrics(annotated: Sequence[AnnotatedResponse]) -> HallucinationReport:
    """Per-image means of sentence/word counts and macro-averaged ratios.

    Counts (SPI, WPI, HSPI, HWPI) average over every item. An item with no
    sentences has no defined ratio and is left out of HSR; an item with no
    words is left out of HWR. Both are listed in ``excluded_items``.
    """
    if not annotated:
        raise ValueError("hallucination_metrics needs at least one response")
    n = len(annotated)
    sents = [a.n_sentences for a in annotated]
    hsents = [sum(1 for f in a.hallucinated if f) for a in annotated]
    words = [sum(a.word_counts) for a in annotated]
    hwords = [sum(a.hallucinated_words) for a in annotated]
    # exact rational sums, rounded once
    s_r = [Fraction(h, s) for h, s in zip(hsents, sents) if s]
    w_r = [Fraction(h, w) for h, w in zip(hwords, words) if w]
    excluded = [i for i in range(n) if not (sents[i] and words[i])]
    return HallucinationReport(
        float(Fraction(sum(sents), n)), float(Fraction(sum(words), n)),
        float(Fraction(sum(hsents), n)), float(Fraction(sum(hwords), n)),
        float(sum(s_r) / len(s_r)) if s_r else 0.0,
        float(sum(w_r) / len(w_r)) if w_r else 0.0,
        n, len(excluded), excluded,
    )


def _trim(tokens: Sequence[int]) -> tuple[int, ...]:
    t = list(tokens)
    while t and (t[-1] in TERMINATORS or t[-1] == EOS):
        t.pop()
    return tuple(t)


def vqa_accuracy(answer: Sequence[int], gold: Sequence[Sequence[int]]) -> float:
    """min(#gold answers equal to ``answer`` / 3, 1), ignoring trailing terminators and EOS."""
    if not gold:
        raise ValueError("vqa_accuracy needs at least one gold answer")
    a = _trim(answer)
    k = sum(1 for g in gold if _trim(g) == a)
    return min(k / 3.0, 1.0)


@dataclass
class Perplexity:
    value: float
    mean_nll: float
    n_tokens: int
    clamped: bool


def perplexity_from_probs(probs: Sequence[float]) -> Perplexity:
    """exp(mean -log p) with probabilities below 1e-12 clamped (and flagged)."""
    p = np.asarray(probs, dtype=np.float64)
    if p.size == 0:
        raise ValueError("perplexity of an empty response is undefined")
    clamped = bool((p < LOG_CLAMP).any())
    nll = float(-np.log(np.maximum(p, LOG_CLAMP)).mean())
    return Perplexity(float(np.exp(nll)), nll, int(p.size), clamped)


def token_probabilities(tokens: Sequence[int], assembly: PromptAssembly,
                        params: ModelParams) -> np.ndarray:
    """Teacher-forced p(x_t | x_<t) of every generated token."""
    tokens = [int(t) for t in tokens]
    trace = forward(assembly, tokens, params)
    start = assembly.prompt_len
    return np.array([softmax_vec(trace.logits.data[start + i - 1])[t] for i, t in enumerate(tokens)])


def perplexity(tokens: Sequence[int], assembly: PromptAssembly, params: ModelParams) -> Perplexity:
    if len(tokens) == 0:
        raise ValueError("perplexity of an empty response is undefined")
    return perplexity_from_probs(token_probabilities(tokens, assembly, params))


# ---------------------------------------------------------------- quality

RUBRIC = {
    "start": 9,
    "repetition": -1,      # per immediate repeat of the same token
    "repetition_cap": -4,
    "unterminated": -2,    # last sentence lacks . ! ? (EOS alone does not terminate)
    "invalid_token": -1,   # per out-of-vocabulary or pad/bos id
    "invalid_cap": -3,
}


@dataclass
class QualityScore:
    score: int
    judge: str = "offline-rule"
    deductions: dict = field(default_factory=dict)


def offline_quality_judge(tokens: Sequence[int]) -> QualityScore:
    """Deterministic 0-9 rubric; see RUBRIC. An empty response scores 0."""
    toks = [int(t) for t in tokens]
    body = toks[:-1] if toks and toks[-1] == EOS else toks
    if not body:
        return QualityScore(0, deductions={"empty": -9})
    d = {}
    reps = sum(1 for a, b in zip(body, body[1:]) if a == b)
    if reps:
        d["repetition"] = max(RUBRIC["repetition"] * reps, RUBRIC["repetition_cap"])
    if body[-1] not in TERMINATORS:
        d["unterminated"] = RUBRIC["unterminated"]
    bad = sum(1 for t in body if not 0 <= t < len(VOCAB) or (t in SPECIAL_IDS and t != EOS))
    if bad:
        d["invalid_token"] = max(RUBRIC["invalid_token"] * bad, RUBRIC["invalid_cap"])
    score = int(np.clip(RUBRIC["start"] + sum(d.values()), 0, 9))
    return QualityScore(score, deductions=d)
