"""Client for an OpenAI-compatible chat-completions endpoint, plus response
parsing and training-data export.

The transport is pluggable: the default posts JSON over HTTP, and tests or
dry runs install an in-process scripted transport with the same contract.
Auth tokens are read from a named environment variable, never from flags.
"""

from __future__ import annotations

import json
import os
import re
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Mapping, Sequence

from .core import (
    CODE,
    EXEC_RESULT,
    FINAL_ANSWER,
    REASONING,
    STATUS_OK,
    SchemaError,
    Segment,
    code,
    dumps_record,
    exec_result,
    final_answer,
    iter_jsonl,
    reasoning,
    segment_to_record,
)


class TransportError(RuntimeError):
    """Transient transport failure (network, 5xx, 429); retried."""


class TransportTimeout(TransportError):
    """The request exceeded the configured timeout."""


class RequestError(RuntimeError):
    """Non-retryable request failure (HTTP 4xx other than 429)."""


@dataclass(frozen=True)
class EndpointConfig:
    base_url: str
    model: str
    auth_env: str = "EMTIR_API_TOKEN"
    temperature: float = 1.0
    top_p: float = 0.9
    max_tokens: int = 2048
    stop: tuple[str, ...] = ()
    timeout_s: float = 60.0
    max_parallel: int = 4
    max_retries: int = 3
    backoff_base_s: float = 0.5
    want_logprobs: bool = True
    # servers without assistant prefill support get guidance prepended to the
    # user prompt instead; the active mode is recorded in the run manifest
    guidance_mode: str = "prefill"

    def __post_init__(self):
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if not (0.0 < self.top_p <= 1.0):
            raise ValueError("top_p must be in (0, 1]")
        if self.max_parallel < 1:
            raise ValueError("max_parallel must be >= 1")
        if self.guidance_mode not in ("prefill", "prompt"):
            raise ValueError("guidance_mode must be 'prefill' or 'prompt'")


@dataclass(frozen=True)
class GenResult:
    text: str
    finish_reason: str
    logprob_sum: float | None = None
    retry_count: int = 0


Transport = Callable[[Mapping[str, Any], float], Mapping[str, Any]]


def http_transport(cfg: EndpointConfig) -> Transport:
    import requests

    url = cfg.base_url.rstrip("/") + "/chat/completions"
    token = os.environ.get(cfg.auth_env, "")
    headers = {"Content-Type": "application/json"}
    if token:
        headers["Authorization"] = f"Bearer {token}"

    def send(payload: Mapping[str, Any], timeout_s: float) -> Mapping[str, Any]:
        try:
            resp = requests.post(url, json=payload, headers=headers, timeout=timeout_s)
        except requests.Timeout as exc:
            raise TransportTimeout(str(exc)) from exc
        except requests.RequestException as exc:
            raise TransportError(str(exc)) from exc
        if resp.status_code == 429 or resp.status_code >= 500:
            raise TransportError(f"HTTP {resp.status_code}: {resp.text[:200]}")
        if resp.status_code >= 400:
            raise RequestError(f"HTTP {resp.status_code}: {resp.text[:200]}")
        return resp.json()

    return send


def _messages(prompt: str | Sequence[Mapping[str, str]], prefill: str | None) -> list[dict[str, str]]:
    if isinstance(prompt, str):
        msgs = [{"role": "user", "content": prompt}]
    else:
        msgs = [dict(m) for m in prompt]
    if prefill:
        msgs.append({"role": "assistant", "content": prefill})
    return msgs


def generate(
    cfg: EndpointConfig,
    prompt: str | Sequence[Mapping[str, str]],
    stops: Sequence[str] | None = None,
    transport: Transport | None = None,
    prefill: str | None = None,
) -> GenResult:
    """One completion with retry/backoff on transient failures.

    The endpoint's summed token log-probability is captured when reported,
    else left absent. HTTP 4xx raises RequestError without retrying;
    exhausted retries raise the last TransportError.
    """
    transport = transport or http_transport(cfg)
    payload: dict[str, Any] = {
        "model": cfg.model,
        "messages": _messages(prompt, prefill),
        "temperature": cfg.temperature,
        "top_p": cfg.top_p,
        "max_tokens": cfg.max_tokens,
    }
    stops = tuple(stops) if stops is not None else cfg.stop
    if stops:
        payload["stop"] = list(stops)
    if cfg.want_logprobs:
        payload["logprobs"] = True
    last_exc: TransportError | None = None
    for attempt in range(cfg.max_retries + 1):
        try:
            raw = transport(payload, cfg.timeout_s)
            return _parse_completion(raw, retry_count=attempt)
        except RequestError:
            raise
        except TransportError as exc:
            last_exc = exc
            if attempt < cfg.max_retries:
                time.sleep(cfg.backoff_base_s * (2**attempt))
    assert last_exc is not None
    raise last_exc


def _parse_completion(raw: Mapping[str, Any], retry_count: int) -> GenResult:
    try:
        choice = raw["choices"][0]
        text = choice["message"]["content"]
        finish = choice.get("finish_reason", "stop")
    except (KeyError, IndexError, TypeError) as exc:
        raise SchemaError(f"malformed completion response: {exc}") from exc
    logprob_sum = None
    lp = choice.get("logprobs")
    if isinstance(lp, Mapping) and isinstance(lp.get("content"), list):
        try:
            total = sum(float(tok["logprob"]) for tok in lp["content"])
            logprob_sum = min(total, 0.0)
        except (KeyError, TypeError, ValueError):
            logprob_sum = None
    return GenResult(text=text, finish_reason=finish, logprob_sum=logprob_sum, retry_count=retry_count)


def batch_generate(
    cfg: EndpointConfig,
    prompts: Sequence[str | Sequence[Mapping[str, str]]],
    transport: Transport | None = None,
    stops: Sequence[str] | None = None,
) -> list[GenResult | Exception]:
    """Run many generations with at most cfg.max_parallel in flight.

    Results are returned in prompt order; failures are returned in place
    rather than raised, so one bad arm never loses the batch.
    """
    transport = transport or http_transport(cfg)
    results: list[GenResult | Exception] = [None] * len(prompts)  # type: ignore[list-item]

    def run(i: int) -> None:
        try:
            results[i] = generate(cfg, prompts[i], stops=stops, transport=transport)
        except Exception as exc:  # noqa: BLE001 - reported per item
            results[i] = exc

    with ThreadPoolExecutor(max_workers=cfg.max_parallel) as pool:
        futures = [pool.submit(run, i) for i in range(len(prompts))]
        for fut in futures:
            fut.result()
    return results


class ScriptedTransport:
    """In-process stub endpoint for tests and dry runs.

    script entries are either response texts or callables(payload) -> text;
    an entry may also be an Exception instance to inject a failure. The stub
    tracks in-flight concurrency so tests can assert the client's bound.
    """

    def __init__(self, script: Sequence[Any] | Callable[[Mapping[str, Any]], str], delay_s: float = 0.0):
        self._script = script
        self._calls = 0
        self._lock = threading.Lock()
        self._inflight = 0
        self.max_inflight = 0
        self.delay_s = delay_s

    @property
    def calls(self) -> int:
        return self._calls

    def __call__(self, payload: Mapping[str, Any], timeout_s: float) -> Mapping[str, Any]:
        with self._lock:
            idx = self._calls
            self._calls += 1
            self._inflight += 1
            self.max_inflight = max(self.max_inflight, self._inflight)
        try:
            if self.delay_s:
                if self.delay_s >= timeout_s:
                    time.sleep(timeout_s)
                    raise TransportTimeout(f"stub timed out after {timeout_s}s")
                time.sleep(self.delay_s)
            if callable(self._script):
                entry: Any = self._script(payload)
            else:
                if idx >= len(self._script):
                    entry = self._script[-1]
                else:
                    entry = self._script[idx]
            if isinstance(entry, Exception):
                raise entry
            if callable(entry):
                entry = entry(payload)
            return completion_response(str(entry))
        finally:
            with self._lock:
                self._inflight -= 1


def completion_response(text: str, finish_reason: str = "stop", logprob_sum: float | None = None) -> dict[str, Any]:
    """Build a minimal OpenAI-style chat-completion response body."""
    choice: dict[str, Any] = {"message": {"content": text}, "finish_reason": finish_reason}
    if logprob_sum is not None:
        choice["logprobs"] = {"content": [{"logprob": logprob_sum}]}
    return {"choices": [choice]}


# ---------------------------------------------------------------------------
# Response parsing
# ---------------------------------------------------------------------------

_FENCE_RE = re.compile(r"^```(.*)$")
_BOXED_SEARCH = re.compile(r"\\boxed\{([^{}]*)\}")
_ANSWER_LINE = re.compile(r"^\s*Final Answer:\s*(.+?)\s*$", re.MULTILINE)

CODE_FENCE_LANGS = ("", "python", "py", "python3")
OUTPUT_FENCE_PREFIX = "output"


@dataclass(frozen=True)
class ParsedText:
    segments: tuple[Segment, ...]
    flags: tuple[str, ...] = ()


def parse_segments(text: str) -> ParsedText:
    """Split endpoint text into segments.

    Fenced blocks become code (or exec_result for `output:<status>` info
    strings, as produced by the canonical renderer); everything else is
    reasoning. A terminal boxed or `Final Answer:` line becomes the final
    answer. Unterminated fences are kept as code and flagged.
    """
    segments: list[Segment] = []
    flags: list[str] = []
    lines = text.split("\n")
    buf: list[str] = []
    fence_info: str | None = None

    def flush_text() -> None:
        chunk = "\n".join(buf).strip("\n")
        buf.clear()
        if chunk.strip():
            segments.append(reasoning(chunk))

    for line in lines:
        m = _FENCE_RE.match(line.strip())
        if m:
            if fence_info is None:
                flush_text()
                fence_info = m.group(1).strip().lower()
            else:
                body = "\n".join(buf)
                buf.clear()
                segments.append(_fenced_segment(fence_info, body))
                fence_info = None
            continue
        buf.append(line)
    if fence_info is not None:
        flags.append("unterminated-fence")
        segments.append(_fenced_segment(fence_info, "\n".join(buf)))
    else:
        flush_text()

    segments2, extra_flags = _extract_final_answer(segments)
    flags.extend(extra_flags)
    return ParsedText(tuple(segments2), tuple(flags))


def _fenced_segment(info: str, body: str) -> Segment:
    if info.startswith(OUTPUT_FENCE_PREFIX):
        status = STATUS_OK
        if ":" in info:
            status = info.split(":", 1)[1] or STATUS_OK
        if status not in ("ok", "error", "timeout"):
            status = STATUS_OK
        return exec_result(body, status)
    return code(body)


def _extract_final_answer(segments: list[Segment]) -> tuple[list[Segment], list[str]]:
    if not segments or segments[-1].kind != REASONING:
        return segments, []
    text = segments[-1].text
    best = None
    for m in _BOXED_SEARCH.finditer(text):
        best = m
    if best is not None and not text[best.end():].strip():
        answer = best.group(1).strip()
        before = text[: best.start()].strip("\n")
    else:
        m2 = None
        for m2c in _ANSWER_LINE.finditer(text):
            m2 = m2c
        if m2 is None or text[m2.end():].strip():
            return segments, []
        answer = m2.group(1).strip()
        before = text[: m2.start()].strip("\n")
    out = segments[:-1]
    if before.strip():
        out.append(reasoning(before))
    out.append(final_answer(answer))
    return out, []


def render_segments(segments: Sequence[Segment]) -> str:
    """Canonical inverse of parse_segments, used to rebuild transcripts."""
    parts = []
    for seg in segments:
        if seg.kind == REASONING:
            parts.append(seg.text)
        elif seg.kind == CODE:
            parts.append(f"```python\n{seg.text}\n```")
        elif seg.kind == EXEC_RESULT:
            parts.append(f"```output:{seg.status}\n{seg.text}\n```")
        elif seg.kind == FINAL_ANSWER:
            parts.append(f"\\boxed{{{seg.text}}}")
        else:
            raise SchemaError(f"cannot render segment kind {seg.kind!r}")
    return "\n".join(parts)


# ---------------------------------------------------------------------------
# Training-data export
# ---------------------------------------------------------------------------

EXPORT_SCHEMA_VERSION = 1

EXPORT_HEADER_SCHEMA: dict[str, Any] = {
    "type": "object",
    "required": ["schema", "version", "provenance"],
    "properties": {
        "schema": {"const": "curated-training-data"},
        "version": {"type": "integer"},
        "provenance": {"type": "object"},
    },
}

EXPORT_RECORD_SCHEMA: dict[str, Any] = {
    "type": "object",
    "required": ["prompt", "response_segments", "c", "weight", "s_snapshot", "reward"],
    "properties": {
        "prompt": {"type": "string"},
        "response_segments": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["kind", "text"],
                "properties": {
                    "kind": {"enum": [REASONING, CODE, EXEC_RESULT, FINAL_ANSWER]},
                    "text": {"type": "string"},
                    "status": {"enum": ["ok", "error", "timeout"]},
                },
            },
        },
        "c": {"enum": [0, 1]},
        "weight": {"type": "number", "minimum": 0},
        "s_snapshot": {
            "type": "array",
            "items": {"type": "number", "minimum": 0, "maximum": 1},
            "minItems": 2,
            "maxItems": 2,
        },
        "reward": {"enum": [0, 1]},
        "gen_logprob": {"type": ["number", "null"], "maximum": 0},
    },
}


def export_training_data(dataset, queries: Mapping[str, Any], path: str | Path) -> None:
    """Write the curated dataset as hand-off JSONL: header line, then records.

    queries maps query_id to Query so each record carries its prompt text.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        header = {
            "schema": "curated-training-data",
            "version": EXPORT_SCHEMA_VERSION,
            "provenance": dict(dataset.provenance),
        }
        fh.write(dumps_record(header) + "\n")
        for ex in dataset.examples:
            try:
                prompt = queries[ex.query_id].prompt
            except KeyError:
                raise SchemaError(f"dataset references unknown query {ex.query_id!r}")
            rec = {
                "prompt": prompt,
                "response_segments": [segment_to_record(s) for s in ex.trajectory.segments],
                "c": ex.c,
                "weight": ex.weight,
                "s_snapshot": [ex.s_snapshot[0], ex.s_snapshot[1]],
                "reward": ex.trajectory.reward,
                "gen_logprob": ex.trajectory.gen_logprob,
            }
            fh.write(dumps_record(rec) + "\n")


def validate_export_file(path: str | Path) -> int:
    """Validate an export file against the schema; returns the record count."""
    import jsonschema

    rows = list(iter_jsonl(path))
    if not rows:
        raise SchemaError(f"{path}: export file has no header line")
    jsonschema.validate(rows[0], EXPORT_HEADER_SCHEMA)
    for rec in rows[1:]:
        jsonschema.validate(rec, EXPORT_RECORD_SCHEMA)
    return len(rows) - 1
