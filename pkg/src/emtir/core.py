"""Shared data model: queries, trajectory segments, grading, JSONL IO, config.

Every other module builds on the types here. All types are immutable values
and safe to share across workers; file writers are single-owner.
"""

from __future__ import annotations

import hashlib
import json
import math
import re
from dataclasses import dataclass, field, fields, replace
from fractions import Fraction
from pathlib import Path
from typing import Any, Iterable, Iterator, Mapping, Sequence

# Segment kinds
REASONING = "reasoning"
CODE = "code"
EXEC_RESULT = "exec_result"
FINAL_ANSWER = "final_answer"

# Execution statuses
STATUS_OK = "ok"
STATUS_ERROR = "error"
STATUS_TIMEOUT = "timeout"

# Guidance tags
GUIDANCE_VANILLA = "vanilla"
GUIDANCE_PREFIX_CODE = "prefix-code"
GUIDANCE_FORCED = "forced-c"
_BRANCH_RE = re.compile(r"^branch:\d+$")

# Trigger decisions
C_REASON = 0
C_CODE = 1

NUMERIC_TOL = 1e-9


class SchemaError(ValueError):
    """A record or file does not conform to the expected schema."""


class JsonlError(SchemaError):
    def __init__(self, path: str | Path, line_no: int, detail: str):
        super().__init__(f"{path}:{line_no}: {detail}")
        self.line_no = line_no


@dataclass(frozen=True)
class Query:
    id: str
    prompt: str
    gold_answer: str
    env_ref: str | None = None

    def __post_init__(self):
        if not self.gold_answer:
            raise ValueError(f"query {self.id!r} has empty gold_answer")


@dataclass(frozen=True)
class Segment:
    """One trajectory piece: reasoning text, code, an execution result, or the answer."""

    kind: str
    text: str
    status: str | None = None


def reasoning(text: str) -> Segment:
    return Segment(REASONING, text)


def code(source: str) -> Segment:
    return Segment(CODE, source)


def exec_result(text: str, status: str = STATUS_OK) -> Segment:
    if status not in (STATUS_OK, STATUS_ERROR, STATUS_TIMEOUT):
        raise ValueError(f"bad exec status {status!r}")
    return Segment(EXEC_RESULT, text, status)


def final_answer(text: str) -> Segment:
    return Segment(FINAL_ANSWER, text)


def validate_segments(segments: Sequence[Segment]) -> None:
    """Enforce the segment grammar.

    An exec_result may appear only immediately after a code segment, and at
    most one final_answer is allowed, terminating the sequence.
    """
    for i, seg in enumerate(segments):
        if seg.kind == EXEC_RESULT:
            if i == 0 or segments[i - 1].kind != CODE:
                raise SchemaError(f"exec_result at index {i} does not follow a code segment")
            if seg.status not in (STATUS_OK, STATUS_ERROR, STATUS_TIMEOUT):
                raise SchemaError(f"exec_result at index {i} has bad status {seg.status!r}")
        elif seg.kind == FINAL_ANSWER:
            if i != len(segments) - 1:
                raise SchemaError(f"final_answer at index {i} is not terminal")
        elif seg.kind not in (REASONING, CODE):
            raise SchemaError(f"unknown segment kind {seg.kind!r} at index {i}")


def decode_modes(segments: Sequence[Segment]) -> tuple[int, ...]:
    """Map a segment sequence to its per-step mode choices (0=reason, 1=code).

    Each reasoning segment is one reasoning step; each code segment (with or
    without its execution result) is one code step. The final answer carries
    no step.
    """
    modes = []
    for seg in segments:
        if seg.kind == REASONING:
            modes.append(C_REASON)
        elif seg.kind == CODE:
            modes.append(C_CODE)
    return tuple(modes)


@dataclass(frozen=True)
class Decision:
    """Binary code-trigger choice: c=0 pure reasoning, c=1 code integration.

    position is the segment index at which the decision applies (0 = start).
    """

    c: int
    position: int = 0

    def __post_init__(self):
        if self.c not in (0, 1):
            raise ValueError(f"decision c must be 0 or 1, got {self.c}")
        if self.position < 0:
            raise ValueError("decision position must be >= 0")


@dataclass(frozen=True)
class Trajectory:
    query_id: str
    decision: Decision
    segments: tuple[Segment, ...]
    reward: int
    gen_logprob: float | None
    policy_tag: str
    guidance: str
    rounds: int

    def __post_init__(self):
        if self.reward not in (0, 1):
            raise ValueError(f"reward must be 0 or 1, got {self.reward}")
        if self.gen_logprob is not None and self.gen_logprob > 0.0:
            raise ValueError(f"gen_logprob must be <= 0, got {self.gen_logprob}")
        if self.guidance not in (GUIDANCE_VANILLA, GUIDANCE_PREFIX_CODE, GUIDANCE_FORCED) and not _BRANCH_RE.match(self.guidance):
            raise ValueError(f"bad guidance tag {self.guidance!r}")
        validate_segments(self.segments)
        n_exec = sum(1 for s in self.segments if s.kind == EXEC_RESULT)
        if self.rounds != n_exec:
            raise ValueError(f"rounds={self.rounds} but trajectory has {n_exec} exec results")
        if self.decision.position > len(self.segments):
            raise ValueError("decision position beyond trajectory length")


# ---------------------------------------------------------------------------
# Answer grading
# ---------------------------------------------------------------------------

_BOXED_RE = re.compile(r"^\\boxed\{(.*)\}$", re.DOTALL)


def _normalize_answer(text: str) -> str:
    s = text.strip()
    # strip one layer of $...$ math delimiters, then one \boxed{...} wrapper
    if len(s) >= 2 and s.startswith("$") and s.endswith("$"):
        s = s[1:-1].strip()
    m = _BOXED_RE.match(s)
    if m:
        s = m.group(1).strip()
    return s


def _parse_numeric(s: str) -> Fraction | float | None:
    try:
        return Fraction(s)
    except (ValueError, ZeroDivisionError):
        pass
    try:
        v = float(s)
    except ValueError:
        return None
    return v if math.isfinite(v) else None


def grade(pred: str, gold: str) -> int:
    """Binary correctness of a predicted answer against the gold answer.

    Normalization: trim whitespace, strip surrounding $/boxed markers. If both
    sides parse as a rational or decimal, compare numerically with absolute
    tolerance 1e-9; otherwise fall back to case-sensitive string equality.
    """
    a = _normalize_answer(pred)
    b = _normalize_answer(gold)
    na, nb = _parse_numeric(a), _parse_numeric(b)
    if na is not None and nb is not None:
        if isinstance(na, Fraction) and isinstance(nb, Fraction):
            return 1 if abs(na - nb) <= Fraction(1, 10**9) else 0
        return 1 if abs(float(na) - float(nb)) <= NUMERIC_TOL else 0
    return 1 if a == b else 0


# ---------------------------------------------------------------------------
# JSONL
# ---------------------------------------------------------------------------

def dumps_record(record: Mapping[str, Any]) -> str:
    return json.dumps(record, ensure_ascii=False, separators=(",", ":"))


def write_jsonl(records: Iterable[Mapping[str, Any]], path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(dumps_record(rec))
            fh.write("\n")


def read_jsonl(path: str | Path) -> list[dict[str, Any]]:
    out = []
    with Path(path).open("r", encoding="utf-8") as fh:
        for i, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                out.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise JsonlError(path, i, f"malformed JSON: {exc}") from exc
    return out


def iter_jsonl(path: str | Path) -> Iterator[dict[str, Any]]:
    with Path(path).open("r", encoding="utf-8") as fh:
        for i, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                yield json.loads(line)
            except json.JSONDecodeError as exc:
                raise JsonlError(path, i, f"malformed JSON: {exc}") from exc


# Wire formats ---------------------------------------------------------------

def segment_to_record(seg: Segment) -> dict[str, Any]:
    rec: dict[str, Any] = {"kind": seg.kind, "text": seg.text}
    if seg.status is not None:
        rec["status"] = seg.status
    return rec


def segment_from_record(rec: Mapping[str, Any]) -> Segment:
    try:
        return Segment(rec["kind"], rec["text"], rec.get("status"))
    except KeyError as exc:
        raise SchemaError(f"segment record missing field {exc}") from exc


def trajectory_to_record(traj: Trajectory) -> dict[str, Any]:
    return {
        "query_id": traj.query_id,
        "decision": {"c": traj.decision.c, "position": traj.decision.position},
        "guidance": traj.guidance,
        "segments": [segment_to_record(s) for s in traj.segments],
        "reward": traj.reward,
        "gen_logprob": traj.gen_logprob,
        "policy_tag": traj.policy_tag,
        "rounds": traj.rounds,
    }


def trajectory_from_record(rec: Mapping[str, Any]) -> Trajectory:
    try:
        return Trajectory(
            query_id=rec["query_id"],
            decision=Decision(rec["decision"]["c"], rec["decision"]["position"]),
            segments=tuple(segment_from_record(s) for s in rec["segments"]),
            reward=rec["reward"],
            gen_logprob=rec["gen_logprob"],
            policy_tag=rec["policy_tag"],
            guidance=rec["guidance"],
            rounds=rec["rounds"],
        )
    except KeyError as exc:
        raise SchemaError(f"trajectory record missing field {exc}") from exc


def query_to_record(q: Query) -> dict[str, Any]:
    return {"id": q.id, "prompt": q.prompt, "gold_answer": q.gold_answer, "env_ref": q.env_ref}


def query_from_record(rec: Mapping[str, Any]) -> Query:
    try:
        return Query(rec["id"], rec["prompt"], rec["gold_answer"], rec.get("env_ref"))
    except KeyError as exc:
        raise SchemaError(f"query record missing field {exc}") from exc


# ---------------------------------------------------------------------------
# Reference strategy (shared between the exact oracle and the sampled E-step)
# ---------------------------------------------------------------------------

VARIANT_MAIN = "main-text"
VARIANT_APPENDIX = "appendix-prior"
VARIANT_POSTERIOR = "posterior"
STRATEGY_VARIANTS = (VARIANT_MAIN, VARIANT_APPENDIX, VARIANT_POSTERIOR)


@dataclass(frozen=True)
class RefEntry:
    s0: float
    s1: float
    log_z: float


@dataclass(frozen=True)
class ReferenceStrategy:
    """Per-query distribution over the code-trigger decision, with normalizer."""

    entries: Mapping[str, RefEntry]
    variant: str
    alpha: float
    flagged: tuple[str, ...] = ()

    def probs(self, query_id: str) -> tuple[float, float]:
        e = self.entries[query_id]
        return (e.s0, e.s1)


def reference_strategy_records(ref: ReferenceStrategy) -> list[dict[str, Any]]:
    rows = [{"variant": ref.variant, "alpha": ref.alpha, "flagged": list(ref.flagged)}]
    for qid in sorted(ref.entries):
        e = ref.entries[qid]
        rows.append({"query_id": qid, "s0": e.s0, "s1": e.s1, "log_z": e.log_z})
    return rows


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

RATIO_SEQUENCE = "sequence"
RATIO_PER_STEP = "per-step"
CLIP_PAPER = "paper-literal"
CLIP_PPO_MIN = "ppo-min"

# Guidance prefix used to bias generations toward code-integrated solutions.
DEFAULT_PREFIX_GUIDANCE = "Let’s first analyze the problem, then consider if python code could help"


@dataclass(frozen=True)
class Config:
    """Run configuration. Field names double as config-file keys."""

    K: int = 8                      # rollouts per (query, c)
    alpha: float = 4.0              # reference-strategy temperature
    clip_eps: float = 0.2           # off-policy clip width
    subsample_size: int = 4         # M examples kept per query
    max_rounds: int = 3
    epochs: int = 3                 # update passes per M-step
    learning_rate: float = 0.1
    seed: int = 0
    strategy_variant: str = VARIANT_MAIN
    ratio_granularity: str = RATIO_SEQUENCE
    clip_form: str = CLIP_PAPER
    std_floor: float = 1e-6
    ce_weight: float = 1.0
    # loop sizes
    em_iterations: int = 16
    baseline_iterations: int = 32
    sft_steps: int = 60
    exact_mode: bool = False
    exact_variant: str = VARIANT_POSTERIOR
    n_inner: int = 2
    # rollout behaviour
    code_bias: float = 2.5          # logit tilt applied by prefix-code guidance (simulation)
    branch_k: int = 0               # branch rollouts per probed query (0 = disabled)
    branch_cap: int = 2             # max branch points sampled per query
    workers: int = 1
    prefix_guidance: str = DEFAULT_PREFIX_GUIDANCE
    # evaluation / analysis
    eval_samples: int = 8
    extremity_low: float = 0.1
    extremity_high: float = 0.9
    # endpoint sampling defaults
    temperature: float = 1.0
    top_p: float = 0.9
    # artifact determinism: when False, wallclock_s is written as 0.0
    record_wallclock: bool = False
    log_rollouts: bool = False

    def __post_init__(self):
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if self.subsample_size < 1:
            raise ValueError("subsample_size must be >= 1")
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if not (0.0 < self.clip_eps < 1.0):
            raise ValueError("clip_eps must be in (0, 1)")
        if self.std_floor <= 0:
            raise ValueError("std_floor must be > 0")
        if self.strategy_variant not in STRATEGY_VARIANTS:
            raise ValueError(f"unknown strategy_variant {self.strategy_variant!r}")
        if self.exact_variant not in STRATEGY_VARIANTS:
            raise ValueError(f"unknown exact_variant {self.exact_variant!r}")
        if self.ratio_granularity not in (RATIO_SEQUENCE, RATIO_PER_STEP):
            raise ValueError(f"unknown ratio_granularity {self.ratio_granularity!r}")
        if self.clip_form not in (CLIP_PAPER, CLIP_PPO_MIN):
            raise ValueError(f"unknown clip_form {self.clip_form!r}")
        if self.max_rounds < 1:
            raise ValueError("max_rounds must be >= 1")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")


def config_to_dict(cfg: Config) -> dict[str, Any]:
    return {f.name: getattr(cfg, f.name) for f in fields(cfg)}


def config_hash(cfg: Config) -> str:
    blob = json.dumps(config_to_dict(cfg), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


def config_from_dict(data: Mapping[str, Any], base: Config | None = None) -> Config:
    base = base or Config()
    known = {f.name for f in fields(Config)}
    unknown = set(data) - known
    if unknown:
        raise SchemaError(f"unknown config keys: {sorted(unknown)}")
    merged = dict(data)
    if "K" in merged and "subsample_size" not in merged:
        merged["subsample_size"] = max(1, int(merged["K"]) // 2)
    return replace(base, **merged)


# Minimal TOML reader. Python 3.10 has no tomllib and the package mirror
# carries no TOML parser, so we accept the flat subset we emit: comments,
# `key = value` pairs with string/int/float/bool values and flat arrays.
_TOML_STRING_RE = re.compile(r'^"(.*)"$')


def _parse_toml_scalar(raw: str) -> Any:
    raw = raw.strip()
    m = _TOML_STRING_RE.match(raw)
    if m:
        return m.group(1).replace('\\"', '"').replace("\\\\", "\\").replace("\\n", "\n")
    if raw == "true":
        return True
    if raw == "false":
        return False
    if raw.startswith("[") and raw.endswith("]"):
        inner = raw[1:-1].strip()
        if not inner:
            return []
        return [_parse_toml_scalar(part) for part in _split_toml_array(inner)]
    try:
        return int(raw)
    except ValueError:
        pass
    try:
        return float(raw)
    except ValueError:
        raise SchemaError(f"cannot parse TOML value: {raw!r}")


def _split_toml_array(inner: str) -> list[str]:
    parts, buf, in_str = [], [], False
    for ch in inner:
        if ch == '"' and (not buf or buf[-1] != "\\"):
            in_str = not in_str
        if ch == "," and not in_str:
            parts.append("".join(buf))
            buf = []
        else:
            buf.append(ch)
    if buf:
        parts.append("".join(buf))
    return [p for p in (s.strip() for s in parts) if p]


def parse_toml_subset(text: str) -> dict[str, Any]:
    out: dict[str, Any] = {}
    section = ""
    for line_no, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if stripped.startswith("[") and stripped.endswith("]"):
            section = stripped[1:-1].strip()
            continue
        if "=" not in stripped:
            raise SchemaError(f"line {line_no}: expected 'key = value'")
        key, _, raw = stripped.partition("=")
        key = key.strip()
        # strip trailing comment outside of strings
        raw = raw.strip()
        if not raw.startswith('"') and "#" in raw:
            raw = raw.split("#", 1)[0].strip()
        full_key = f"{section}.{key}" if section else key
        out[full_key] = _parse_toml_scalar(raw)
    return out


def load_config(path: str | Path, overrides: Mapping[str, Any] | None = None) -> Config:
    data = parse_toml_subset(Path(path).read_text(encoding="utf-8"))
    flat = {k.split(".")[-1]: v for k, v in data.items()}
    if overrides:
        flat.update(overrides)
    return config_from_dict(flat)
