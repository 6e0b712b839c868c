"""Attention-sink analyses over forward traces.

Heads are always averaged before thresholding. The relevance score is a
CLIPScore-style cosine, but computed in the toy model's own embedding
spaces (mean token-embedding rows of a sentence vs. mean visual token); it
is not CLIP and reports say so.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .corpus import sentence_spans
from .model import ForwardTrace, ModelParams, encode_visual

RELEVANCE_EMBEDDER = "toy-model embedding spaces (not CLIP)"
HEAD_AGGREGATION = "mean"


def default_layer(n_layers: int) -> int:
    """Second-to-last block."""
    return max(1, n_layers - 1)


def _check_layer(trace: ForwardTrace, layer: int) -> None:
    if not 1 <= layer < trace.n_layers:
        raise ValueError(f"analysis layer {layer} outside 1..{trace.n_layers - 1}")


def _cos(u: np.ndarray, v: np.ndarray) -> float:
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        raise ValueError("cosine similarity of a zero-norm vector is undefined")
    return float(np.clip(u @ v / (nu * nv), -1.0, 1.0))


def global_context_embedding(trace: ForwardTrace, layer: int) -> np.ndarray:
    """Mean hidden state of layer ``layer`` over the multi-modal input positions."""
    _check_layer(trace, layer)
    return trace.hidden_at(layer).data[: trace.prompt_len].mean(axis=0)


@dataclass
class SimilarityProfile:
    layer: int
    global_context: np.ndarray
    positions: np.ndarray
    scores: np.ndarray


def similarity_profile(trace: ForwardTrace, layer: int) -> SimilarityProfile:
    """Cosine of every generated position's hidden state with the global context."""
    ctx = global_context_embedding(trace, layer)
    pos = np.arange(trace.prompt_len, trace.length)
    if pos.size == 0:
        raise ValueError("similarity_profile needs at least one generated token")
    h = trace.hidden_at(layer).data
    return SimilarityProfile(layer, ctx, pos, np.array([_cos(h[i], ctx) for i in pos]))


def select_potential_sink(profile: SimilarityProfile) -> int:
    """Absolute position of the highest-similarity generated token (earliest on ties)."""
    if profile.scores.size == 0:
        raise ValueError("empty similarity profile")
    return int(profile.positions[int(np.argmax(profile.scores))])


def calibrate_sigma(traces: Sequence[ForwardTrace], layer: int, step: float = 0.05) -> float:
    """Hinge threshold from observed potential sinks.

    The largest potential-sink similarity over ``traces``, rounded up to a
    multiple of ``step`` and capped at 1, so the embedding loss stays active
    on every observed response.
    """
    best = max(float(similarity_profile(tr, layer).scores.max())
               for tr in traces if tr.length > tr.prompt_len)
    return float(min(1.0, np.ceil(round(best / step, 9)) * step))


@dataclass
class SinkReport:
    layer: int | None
    positions: list[int]
    column_mass: list[float]
    tau: float
    w_min: int
    head_aggregation: str = HEAD_AGGREGATION

    def to_dict(self) -> dict:
        return {"layer": self.layer, "sink_positions": self.positions,
                "column_mass": self.column_mass, "tau": self.tau, "w_min": self.w_min,
                "head_aggregation": self.head_aggregation}


def column_masses(attn: np.ndarray, prompt_len: int, w_min: int) -> dict[int, float]:
    """Mean attention each generated column j receives from rows j+1..T-1.

    ``attn`` is T x T or H x T x T (heads averaged first). Only columns with
    at least ``w_min`` later rows are reported.
    """
    a = np.asarray(attn, dtype=np.float64)
    if a.ndim == 3:
        a = a.mean(axis=0)
    t = a.shape[0]
    out = {}
    for j in range(prompt_len, t):
        if t - 1 - j >= max(w_min, 1):
            out[j] = float(a[j + 1:, j].mean())
    return out


def detect_sinks_in_map(attn: np.ndarray, prompt_len: int, tau: float = 0.2, w_min: int = 4,
                        layer: int | None = None) -> SinkReport:
    masses = column_masses(attn, prompt_len, w_min)
    hits = [j for j, m in masses.items() if m >= tau]
    return SinkReport(layer, hits, [masses[j] for j in hits], tau, w_min)


def detect_sinks(trace: ForwardTrace, layer: int, tau: float = 0.2, w_min: int = 4) -> SinkReport:
    """Columnar sinks in the head-averaged attention of block ``layer``."""
    _check_layer(trace, layer)
    return detect_sinks_in_map(trace.attention_at(layer).data, trace.prompt_len, tau, w_min, layer)


@dataclass
class RelevanceProfile:
    spans: list[tuple[int, int]]
    scores: list[float]
    turning_point: int | None
    sink_position: int | None
    before_mean: float | None
    after_mean: float | None
    embedder: str = RELEVANCE_EMBEDDER


def summarize_relevance(scores: Sequence[float], spans: Sequence[tuple[int, int]],
                        sink_offset: int | None) -> tuple[int | None, float | None, float | None]:
    """Turning point plus mean score of sentences before/after a sink.

    ``sink_offset`` is relative to the start of the generated tokens. A
    sentence counts as "before" when it starts at or before the sink. The
    turning point is the k maximizing scores[k] - scores[k+1] (earliest on
    ties), or None for fewer than two sentences.
    """
    s = np.asarray(scores, dtype=np.float64)
    turning = None
    if s.size >= 2:
        turning = int(np.argmax(s[:-1] - s[1:]))
    before = after = None
    if sink_offset is not None:
        b = [sc for sc, (st, _) in zip(s, spans) if st <= sink_offset]
        a = [sc for sc, (st, _) in zip(s, spans) if st > sink_offset]
        before = float(np.mean(b)) if b else None
        after = float(np.mean(a)) if a else None
    return turning, before, after


def relevance_profile(response, image, params: ModelParams, layer: int | None = None,
                      tau: float = 0.2, w_min: int = 4) -> RelevanceProfile:
    """Per-sentence image-text relevance of a decoded response."""
    tokens = list(response.tokens)
    spans = sentence_spans(tokens)
    img = encode_visual(image, params).data.mean(axis=0)
    emb = params["tok_emb"]
    scores = [_cos(emb[tokens[s:e]].mean(axis=0), img) for s, e in spans]
    sink = None
    if response.trace is not None:
        lyr = layer if layer is not None else default_layer(response.trace.n_layers)
        rep = detect_sinks(response.trace, lyr, tau, w_min)
        if rep.positions:
            sink = rep.positions[0] - response.trace.prompt_len
    turning, before, after = summarize_relevance(scores, spans, sink)
    return RelevanceProfile(spans, scores, turning, sink, before, after)


@dataclass
class SimilarityDistribution:
    sink_scores: np.ndarray
    other_scores: np.ndarray
    bin_edges: np.ndarray
    sink_hist: np.ndarray
    other_hist: np.ndarray
    sink_mean: float | None = field(default=None)
    other_mean: float | None = field(default=None)


def similarity_distribution(traces: Sequence[ForwardTrace], layer: int, tau: float = 0.2,
                            w_min: int = 4, bins: int = 20) -> SimilarityDistribution:
    """Pool generated-token similarity scores into sink vs. non-sink populations."""
    if not traces:
        raise ValueError("need at least one trace")
    sink, other = [], []
    for tr in traces:
        if tr.length <= tr.prompt_len:
            continue
        prof = similarity_profile(tr, layer)
        hits = set(detect_sinks(tr, layer, tau, w_min).positions)
        for p, s in zip(prof.positions, prof.scores):
            (sink if int(p) in hits else other).append(float(s))
    edges = np.linspace(-1.0, 1.0, bins + 1)
    sink_a, other_a = np.array(sink), np.array(other)
    return SimilarityDistribution(
        sink_a, other_a, edges,
        np.histogram(sink_a, edges)[0], np.histogram(other_a, edges)[0],
        float(sink_a.mean()) if sink_a.size else None,
        float(other_a.mean()) if other_a.size else None,
    )


def analysis_report(trace: ForwardTrace, layer: int, relevance: RelevanceProfile,
                    sinks: SinkReport) -> dict:
    prof = similarity_profile(trace, layer)
    return {
        "layer": layer,
        "sink_positions": sinks.positions,
        "sink_column_mass": sinks.column_mass,
        "similarity_profile": [float(s) for s in prof.scores],
        "potential_sink": select_potential_sink(prof),
        "sentence_scores": relevance.scores,
        "turning_point": relevance.turning_point,
        "before_mean": relevance.before_mean,
        "after_mean": relevance.after_mean,
        "detector": {"tau": sinks.tau, "w_min": sinks.w_min,
                     "head_aggregation": sinks.head_aggregation},
        "relevance_embedder": relevance.embedder,
    }


def report_json(report: dict) -> str:
    return json.dumps(report, indent=2, sort_keys=True)


def relevance_csv(relevance: RelevanceProfile) -> str:
    """One row per sentence index: span, score, and whether it precedes the first sink."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["sentence", "start", "end", "relevance", "segment"])
    for k, ((s, e), sc) in enumerate(zip(relevance.spans, relevance.scores)):
        if relevance.sink_position is None:
            seg = "none"
        else:
            seg = "before" if s <= relevance.sink_position else "after"
        w.writerow([k, s, e, f"{sc:.6f}", seg])
    return buf.getvalue()
