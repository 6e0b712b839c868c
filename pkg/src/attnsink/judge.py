"""Optional HTTP client for an external hallucination / quality judge.

Nothing here runs unless a caller passes an endpoint. Every exchange
(request, response or error) is appended to a JSON-lines transcript.

Wire format::

    POST /judge    {"scene_description", "region_facts": [...], "response_sentences": [...]}
                -> {"sentences": [{"hallucinated": bool, "hallucinated_words": int}, ...]}
    POST /quality  {"scene_description", "response"}  ->  {"score": 0..9}
"""

from __future__ import annotations

import json
import time
from pathlib import Path
from typing import Sequence

import httpx

from .corpus import AnnotatedResponse, Scene, decode, is_word, sentence_spans
from .metrics import QualityScore

ENV_ENDPOINT = "ATTNSINK_JUDGE_ENDPOINT"


class JudgeError(RuntimeError):
    pass


def scene_facts(scene: Scene) -> tuple[str, list[str]]:
    desc = f"a {scene.grid[0]}x{scene.grid[1]} grid holding {len(scene.objects)} object(s)"
    facts = [f"{o.color} {o.word} at row {o.row}, column {o.col}" for o in scene.objects]
    return desc, facts


def build_judge_request(scene: Scene, sentences: Sequence[str]) -> dict:
    desc, facts = scene_facts(scene)
    return {"scene_description": desc, "region_facts": facts,
            "response_sentences": list(sentences)}


def _validate_judgement(body: dict, n: int) -> list[dict]:
    sents = body.get("sentences") if isinstance(body, dict) else None
    if not isinstance(sents, list) or len(sents) != n:
        raise JudgeError(f"judge returned {sents!r}; expected {n} sentence verdicts")
    for s in sents:
        if not isinstance(s.get("hallucinated"), bool) or not isinstance(s.get("hallucinated_words"), int):
            raise JudgeError(f"malformed sentence verdict {s!r}")
    return sents


class JudgeClient:
    """POSTs with a timeout and one retry on transport errors or 5xx replies."""

    def __init__(self, endpoint: str, transcript: str | Path, timeout: float = 10.0,
                 transport: httpx.BaseTransport | None = None, retry_delay: float = 0.5):
        self.transcript = Path(transcript)
        self.retry_delay = retry_delay
        self._client = httpx.Client(base_url=endpoint.rstrip("/"), timeout=timeout,
                                    transport=transport)

    def close(self) -> None:
        self._client.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def _log(self, entry: dict) -> None:
        with self.transcript.open("a") as fh:
            fh.write(json.dumps(entry, sort_keys=True) + "\n")

    def _post(self, path: str, payload: dict) -> dict:
        last = None
        for attempt in (1, 2):
            entry = {"path": path, "attempt": attempt, "request": payload}
            try:
                r = self._client.post(path, json=payload)
                entry["status"] = r.status_code
                if r.status_code >= 500:
                    entry["error"] = f"server error {r.status_code}"
                    last = JudgeError(entry["error"])
                else:
                    r.raise_for_status()
                    body = r.json()
                    entry["response"] = body
                    self._log(entry)
                    return body
            except httpx.HTTPStatusError as exc:
                entry["error"] = str(exc)
                self._log(entry)
                raise JudgeError(str(exc)) from exc
            except (httpx.TransportError, ValueError) as exc:
                entry["error"] = f"{type(exc).__name__}: {exc}"
                last = JudgeError(entry["error"])
            self._log(entry)
            if attempt == 1:
                time.sleep(self.retry_delay)
        raise last

    def judge(self, scene: Scene, tokens: Sequence[int]) -> AnnotatedResponse:
        tokens = [int(t) for t in tokens]
        spans = sentence_spans(tokens)
        body = self._post("/judge", build_judge_request(scene, [decode(tokens[s:e]) for s, e in spans]))
        verdicts = _validate_judgement(body, len(spans))
        return AnnotatedResponse(
            tokens, spans, [v["hallucinated"] for v in verdicts],
            [v["hallucinated_words"] for v in verdicts],
            [sum(1 for t in tokens[s:e] if is_word(t)) for s, e in spans],
        )

    def quality(self, scene: Scene, tokens: Sequence[int]) -> QualityScore:
        desc, _ = scene_facts(scene)
        body = self._post("/quality", {"scene_description": desc, "response": decode(tokens)})
        score = body.get("score") if isinstance(body, dict) else None
        if not isinstance(score, int) or not 0 <= score <= 9:
            raise JudgeError(f"quality score {score!r} is not an integer in 0..9")
        return QualityScore(score, judge="external")
