"""Attention-sink hallucination attack on the toy model.

Each round decodes a response for the current adversarial image, re-runs a
differentiable teacher-forced pass over prompt + response, picks the
generated token most similar to the mean multi-modal input state at the
analysis layer, and takes one signed-gradient step on

    L_attn + alpha * L_emb

where L_attn is the mean cross-entropy of the head-averaged attention rows
idx..T-1 toward column idx and L_emb = max(0, sigma - cos(h_idx, h_ctx)).
The perturbation lives in an l-inf ball of radius epsilon around the clean
image and pixels stay in [0, 1].

Step sizes and budgets are in pixel units ([0, 1] scale); the customary
"gamma = 5" means 5/255.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, asdict, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .analysis import SinkReport, default_layer, detect_sinks, select_potential_sink, similarity_profile
from .decoding import DecodeConfig, decode
from .model import ForwardTrace, ModelParams, NumericalError, PromptAssembly, VisualInput, encode_visual, forward

logger = logging.getLogger(__name__)

TRACE_HEADER = {
    "head_aggregation": "mean over heads before cross-entropy",
    "ce_reduction": "mean over window rows idx..T-1 (row idx included)",
    "norm": "linf",
    "pixel_units": "[0,1]; gamma=5 in 1/255 units means 5/255",
    "gradient_path": "teacher-forced re-forward over the decoded response",
}


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float = 8 / 255
    gamma: float = 5 / 255
    steps: int = 30
    alpha: float = 1.0
    sigma: float = 0.6
    layer: int | None = None
    decode: DecodeConfig = field(default_factory=DecodeConfig)
    seed: int = 0
    norm: str = "inf"

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if not self.gamma > 0:
            raise ValueError("gamma must be positive")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if not 0 < self.sigma <= 1:
            raise ValueError("sigma must lie in (0, 1]")
        if self.norm not in ("inf", "linf"):
            raise ValueError(f"only the l-inf norm is supported, got {self.norm!r}")

    def resolved_layer(self, params: ModelParams) -> int:
        return self.layer if self.layer is not None else default_layer(params.config.n_layers)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["decode"] = self.decode.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "AttackConfig":
        d = dict(d)
        if "decode" in d and isinstance(d["decode"], dict):
            d["decode"] = DecodeConfig(**d["decode"])
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown attack config fields: {sorted(unknown)}")
        return cls(**d)


# ---------------------------------------------------------------- objectives


def _check_idx(trace: ForwardTrace, idx: int) -> None:
    if not trace.prompt_len <= idx < trace.length:
        raise ValueError(f"idx {idx} is outside the generated region "
                         f"[{trace.prompt_len}, {trace.length})")


def attention_loss(trace: ForwardTrace, layer: int, idx: int) -> ad.Tensor:
    """Cross-entropy of head-averaged attention rows idx..T-1 toward column idx."""
    _check_idx(trace, idx)
    a = trace.head_mean_attention(layer)
    window = ad.index(a, slice(idx, trace.length))
    return ad.cross_entropy_to_index(window, idx)


def embedding_loss(trace: ForwardTrace, layer: int, idx: int, sigma: float) -> ad.Tensor:
    """Hinge on the cosine between h_idx and the mean input hidden state."""
    _check_idx(trace, idx)
    h = trace.hidden_at(layer)
    ctx = ad.mean(ad.index(h, slice(0, trace.prompt_len)), axis=0)
    return ad.hinge(sigma, ad.cosine_similarity(ad.index(h, idx), ctx))


def objective_terms(trace: ForwardTrace, layer: int, idx: int, alpha: float,
                    sigma: float) -> tuple[ad.Tensor, ad.Tensor, ad.Tensor]:
    la = attention_loss(trace, layer, idx)
    le = embedding_loss(trace, layer, idx, sigma)
    return la, le, ad.add(la, ad.scale(le, alpha))


def total_objective(trace: ForwardTrace, layer: int, idx: int, alpha: float = 1.0,
                    sigma: float = 0.6) -> ad.Tensor:
    return objective_terms(trace, layer, idx, alpha, sigma)[2]


def window_attention_mass(trace: ForwardTrace, layer: int, idx: int) -> float:
    """Mean head-averaged attention that rows idx..T-1 put on column idx."""
    a = trace.head_mean_attention(layer).data
    return float(a[idx:, idx].mean())


# ------------------------------------------------------------------- stepping


def project(adv: np.ndarray, clean: np.ndarray, epsilon: float) -> np.ndarray:
    """Clip to the l-inf ball around ``clean`` and to [0, 1], exactly.

    Rounding in ``clean + eps`` can overshoot the ball by an ulp; such
    pixels are nudged back toward ``clean``.
    """
    adv = np.clip(adv, clean - epsilon, clean + epsilon)
    adv = np.clip(adv, 0.0, 1.0)
    for _ in range(4):
        over = adv - clean > epsilon
        under = clean - adv > epsilon
        if not (over.any() or under.any()):
            break
        adv[over] = np.nextafter(adv[over], -np.inf)
        adv[under] = np.nextafter(adv[under], np.inf)
    return adv


def pixel_objective(pixels: np.ndarray, prompt_ids: Sequence[int], response: Sequence[int],
                    params: ModelParams, layer: int, alpha: float, sigma: float,
                    idx: int | None = None):
    """Differentiable objective at ``pixels`` for a fixed response.

    Returns (graph, pixel leaf, trace, idx, (L_attn, L_emb, total)). When
    ``idx`` is None it is chosen from this trace's similarity profile.
    """
    g = ad.Graph()
    px = g.leaf(pixels)
    assembly = PromptAssembly(encode_visual(px, params), list(prompt_ids))
    trace = forward(assembly, response, params)
    if idx is None:
        idx = select_potential_sink(similarity_profile(trace, layer))
    return g, px, trace, idx, objective_terms(trace, layer, idx, alpha, sigma)


@dataclass
class StepRecord:
    step: int
    idx: int
    attn_loss: float
    emb_loss: float
    total_loss: float
    window_mass: float
    response: list[int]
    delta_linf: float

    def to_dict(self) -> dict:
        return asdict(self)


def _respond(pixels: np.ndarray, prompt_ids, params, config: AttackConfig):
    assembly = PromptAssembly(encode_visual(pixels, params), list(prompt_ids))
    return decode(assembly, params, config.decode)


def attack_step(image_adv: np.ndarray, clean: np.ndarray, prompt_ids: Sequence[int],
                params: ModelParams, config: AttackConfig, step: int = 0):
    """One round: decode, pick idx, signed-gradient update, project.

    Returns (updated pixels, record). The record's losses describe the
    pre-update image; ``delta_linf`` is measured after the update.
    """
    layer = config.resolved_layer(params)
    response = _respond(image_adv, prompt_ids, params, config)
    g, px, trace, idx, (la, le, total) = pixel_objective(
        image_adv, prompt_ids, response.tokens, params, layer, config.alpha, config.sigma)
    grad = ad.backward(g, total)[px]
    if not np.all(np.isfinite(grad)) or not np.isfinite(total.item()):
        raise NumericalError(f"non-finite objective/gradient at step {step} (idx={idx}, "
                             f"loss={total.item()!r})")
    updated = project(image_adv - config.gamma * np.sign(grad), clean, config.epsilon)
    rec = StepRecord(step, idx, la.item(), le.item(), total.item(),
                     window_attention_mass(trace, layer, idx), list(response.tokens),
                     float(np.abs(updated - clean).max()))
    return updated, rec


def line_search_step(image_adv: np.ndarray, clean: np.ndarray, prompt_ids: Sequence[int],
                     response: Sequence[int], idx: int, params: ModelParams,
                     config: AttackConfig, max_halvings: int = 30):
    """Diagnostic step with response and idx frozen: halve gamma until L_attn does not rise.

    Returns (pixels, L_attn before, L_attn after, gamma used). Falls back to
    the unchanged image (gamma 0) if no halving helps.
    """
    layer = config.resolved_layer(params)
    g, px, _, _, (la, le, total) = pixel_objective(
        image_adv, prompt_ids, response, params, layer, config.alpha, config.sigma, idx)
    base = la.item()
    direction = np.sign(ad.backward(g, la)[px])
    gamma = config.gamma
    for _ in range(max_halvings):
        cand = project(image_adv - gamma * direction, clean, config.epsilon)
        _, _, _, _, (la2, _, _) = pixel_objective(
            cand, prompt_ids, response, params, layer, config.alpha, config.sigma, idx)
        if la2.item() <= base:
            return cand, base, la2.item(), gamma
        gamma /= 2
    return image_adv.copy(), base, base, 0.0


@dataclass
class AttackTrace:
    config: AttackConfig
    records: list[StepRecord]
    final: StepRecord
    adversarial: np.ndarray
    final_sinks: SinkReport
    header: dict = field(default_factory=lambda: dict(TRACE_HEADER))

    @property
    def initial(self) -> StepRecord:
        return self.records[0]

    def to_dict(self) -> dict:
        return {
            "header": self.header,
            "config": self.config.to_dict(),
            "records": [r.to_dict() for r in self.records],
            "final": self.final.to_dict(),
            "final_sinks": self.final_sinks.to_dict(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def evaluate_image(pixels: np.ndarray, clean: np.ndarray, prompt_ids, params: ModelParams,
                   config: AttackConfig, step: int):
    """Objective terms and response at ``pixels`` without updating anything."""
    layer = config.resolved_layer(params)
    response = _respond(pixels, prompt_ids, params, config)
    _, _, trace, idx, (la, le, total) = pixel_objective(
        pixels, prompt_ids, response.tokens, params, layer, config.alpha, config.sigma)
    rec = StepRecord(step, idx, la.item(), le.item(), total.item(),
                     window_attention_mass(trace, layer, idx), list(response.tokens),
                     float(np.abs(pixels - clean).max()))
    return rec, response


def run_attack(clean: VisualInput | np.ndarray, prompt_ids: Sequence[int], params: ModelParams,
               config: AttackConfig = AttackConfig(), tau: float = 0.2, w_min: int = 4) -> AttackTrace:
    """``config.steps`` rounds of :func:`attack_step`, then a final evaluation round."""
    clean_px = clean.pixels if isinstance(clean, VisualInput) else np.asarray(clean, dtype=np.float64)
    adv = clean_px.copy()
    records = []
    for s in range(config.steps):
        adv, rec = attack_step(adv, clean_px, prompt_ids, params, config, s)
        records.append(rec)
        logger.debug("step %d idx %d loss %.4f", s, rec.idx, rec.total_loss)
    final, response = evaluate_image(adv, clean_px, prompt_ids, params, config, config.steps)
    layer = config.resolved_layer(params)
    sinks = detect_sinks(response.trace, layer, tau, w_min)
    return AttackTrace(config, records, final, adv, sinks)


# ------------------------------------------------------------------- baseline


def gaussian_noise(shape, std: float, seed: int) -> np.ndarray:
    rng = np.random.Generator(np.random.Philox(key=int(seed)))
    return rng.normal(0.0, std, size=shape)


def gaussian_baseline(clean: VisualInput | np.ndarray, budget: float, seed: int,
                      std: float | None = None) -> np.ndarray:
    """Clean image plus i.i.d. Gaussian noise, projected to the same l-inf budget.

    ``std`` defaults to the budget itself.
    """
    if not budget > 0:
        raise ValueError("noise budget must be positive")
    clean_px = clean.pixels if isinstance(clean, VisualInput) else np.asarray(clean, dtype=np.float64)
    noise = gaussian_noise(clean_px.shape, budget if std is None else std, seed)
    return project(clean_px + noise, clean_px, budget)
