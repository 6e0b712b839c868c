"""Greedy, beam, and nucleus decoding over the toy model.

Every step re-runs the full prefix (no KV cache); sequences are a few dozen
tokens long so this stays cheap. Ties in argmax/sorting always go to the
lowest token id.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict, field
from typing import Literal

import numpy as np

from .model import ForwardTrace, ModelParams, PromptAssembly, forward

Strategy = Literal["greedy", "beam", "nucleus"]


@dataclass(frozen=True)
class DecodeConfig:
    strategy: Strategy = "greedy"
    beam_width: int = 3
    top_p: float = 0.9
    temperature: float = 1.0
    max_new_tokens: int = 32
    seed: int = 0
    length_normalize: bool = True

    def __post_init__(self):
        if self.strategy not in ("greedy", "beam", "nucleus"):
            raise ValueError(f"unknown decoding strategy {self.strategy!r}")
        if self.beam_width < 1:
            raise ValueError("beam_width must be >= 1")
        if not 0.0 < self.top_p <= 1.0:
            raise ValueError("top_p must lie in (0, 1]")
        if self.temperature <= 0.0:
            raise ValueError("temperature must be positive")
        if self.max_new_tokens < 1:
            raise ValueError("max_new_tokens must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class DecodedResponse:
    tokens: list[int]
    logprobs: list[float]
    stop_reason: Literal["eos", "length"]
    trace: ForwardTrace | None = field(default=None, repr=False)
    # beam search only: every finished (tokens, score) pair it ranked
    candidates: list[tuple[list[int], float]] = field(default_factory=list, repr=False)

    def to_json_dict(self) -> dict:
        return {"tokens": list(self.tokens), "logprobs": [float(x) for x in self.logprobs],
                "stop_reason": self.stop_reason}


def _log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max()
    return z - np.log(np.exp(z).sum())


def _step_logprobs(assembly: PromptAssembly, tokens: list[int], params: ModelParams) -> np.ndarray:
    tr = forward(assembly, tokens, params)
    return _log_softmax(tr.logits.data[-1])


def _budget(assembly: PromptAssembly, params: ModelParams, config: DecodeConfig) -> int:
    room = params.config.max_seq_len - assembly.prompt_len
    if room < 1:
        raise ValueError("prompt leaves no room for generation")
    return min(config.max_new_tokens, room)


def _finish(assembly, params, tokens, logprobs, stop) -> DecodedResponse:
    return DecodedResponse(tokens, logprobs, stop, forward(assembly, tokens, params))


def greedy_decode(assembly: PromptAssembly, params: ModelParams,
                  config: DecodeConfig = DecodeConfig()) -> DecodedResponse:
    eos = params.config.eos_id
    tokens: list[int] = []
    logprobs: list[float] = []
    for _ in range(_budget(assembly, params, config)):
        lp = _step_logprobs(assembly, tokens, params)
        nxt = int(np.argmax(lp))
        tokens.append(nxt)
        logprobs.append(float(lp[nxt]))
        if nxt == eos:
            return _finish(assembly, params, tokens, logprobs, "eos")
    return _finish(assembly, params, tokens, logprobs, "length")


@dataclass
class _Beam:
    tokens: list[int]
    logprobs: list[float]
    total: float

    def score(self, normalize: bool) -> float:
        return self.total / len(self.tokens) if normalize else self.total


def beam_decode(assembly: PromptAssembly, params: ModelParams,
                config: DecodeConfig = DecodeConfig(strategy="beam")) -> DecodedResponse:
    """Width-k beam search; finished beams are ranked by (normalized) log-probability.

    Live beams are expanded together and the k best candidates by cumulative
    log-probability survive (ties: parent rank, then token id). A candidate
    ending in EOS is retired to the finished pool; search stops when k beams
    have finished or the token budget runs out, in which case the live beams
    join the pool with stop reason ``length``.
    """
    k = config.beam_width
    eos = params.config.eos_id
    live = [_Beam([], [], 0.0)]
    finished: list[tuple[_Beam, str]] = []
    for _ in range(_budget(assembly, params, config)):
        cands = []
        for rank, beam in enumerate(live):
            lp = _step_logprobs(assembly, beam.tokens, params)
            order = np.lexsort((np.arange(lp.size), -lp))[:k]
            for tok in order:
                cands.append((-(beam.total + lp[tok]), rank, int(tok), beam, float(lp[tok])))
        cands.sort(key=lambda c: c[:3])
        live = []
        for neg_total, _, tok, beam, lp_tok in cands[:k]:
            nb = _Beam(beam.tokens + [tok], beam.logprobs + [lp_tok], -neg_total)
            if tok == eos:
                finished.append((nb, "eos"))
            else:
                live.append(nb)
        if len(finished) >= k or not live:
            break
    else:
        finished += [(b, "length") for b in live]
    if not finished:
        finished = [(b, "length") for b in live]
    best, stop = max(finished, key=lambda fb: fb[0].score(config.length_normalize))
    out = _finish(assembly, params, best.tokens, best.logprobs, stop)
    out.candidates = [(b.tokens, b.score(config.length_normalize)) for b, _ in finished]
    return out


def nucleus_filter(probs: np.ndarray, top_p: float) -> tuple[np.ndarray, np.ndarray]:
    """Smallest descending-probability prefix with mass >= top_p, renormalized.

    Returns (token ids, probabilities). The argmax token is always kept.
    """
    order = np.lexsort((np.arange(probs.size), -probs))
    cum = np.cumsum(probs[order])
    keep = int(np.searchsorted(cum, top_p, side="left")) + 1
    keep = min(max(keep, 1), probs.size)
    ids = order[:keep]
    p = probs[ids]
    return ids, p / p.sum()


def nucleus_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=int(seed)))


def nucleus_step(logits: np.ndarray, config: DecodeConfig,
                 rng: np.random.Generator) -> tuple[int, float]:
    """Draw one token from the tempered top-p nucleus; returns (token, its log-prob)."""
    lp = _log_softmax(np.asarray(logits, dtype=np.float64) / config.temperature)
    ids, p = nucleus_filter(np.exp(lp), config.top_p)
    nxt = int(ids[rng.choice(ids.size, p=p)])
    return nxt, float(lp[nxt])


def nucleus_decode(assembly: PromptAssembly, params: ModelParams,
                   config: DecodeConfig = DecodeConfig(strategy="nucleus")) -> DecodedResponse:
    """Top-p sampling with temperature, seeded by ``config.seed`` through Philox."""
    rng = nucleus_rng(config.seed)
    eos = params.config.eos_id
    tokens: list[int] = []
    logprobs: list[float] = []
    for _ in range(_budget(assembly, params, config)):
        tr = forward(assembly, tokens, params)
        nxt, lp = nucleus_step(tr.logits.data[-1], config, rng)
        tokens.append(nxt)
        logprobs.append(lp)
        if nxt == eos:
            return _finish(assembly, params, tokens, logprobs, "eos")
    return _finish(assembly, params, tokens, logprobs, "length")


def decode(assembly: PromptAssembly, params: ModelParams, config: DecodeConfig) -> DecodedResponse:
    if config.strategy == "greedy":
        return greedy_decode(assembly, params, config)
    if config.strategy == "beam":
        return beam_decode(assembly, params, config)
    return nucleus_decode(assembly, params, config)
