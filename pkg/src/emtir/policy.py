"""Tabular stochastic policy: a code-trigger head and a per-step mode head.

Per query the trigger head holds a logit pair over c in {0,1}; per (query, c)
the solution head holds one logit pair per step over {reason, code}. Both are
plain softmaxes, so log-probabilities and score-function gradients are exact
and cheap, and every training quantity can be checked against enumeration.

Params are treated as immutable: updates return a new version (copy on
write), so concurrent readers during a rollout phase are safe.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .core import SchemaError, Trajectory, decode_modes

MODE_REASON = 0
MODE_CODE = 1

INIT_NEUTRAL = "neutral"
INIT_STYLED = "styled"
INIT_REASON_FAVORING = "reason-favoring"


def _softmax2(logits: np.ndarray) -> np.ndarray:
    z = logits - np.max(logits, axis=-1, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=-1, keepdims=True)


@dataclass(frozen=True)
class PolicyParams:
    """trigger[qid] has shape (2,); modes[qid] has shape (2, T, 2) indexed [c, t, mode]."""

    trigger: Mapping[str, np.ndarray]
    modes: Mapping[str, np.ndarray]
    version: int = 0

    def decision_prob(self, query_id: str) -> np.ndarray:
        try:
            logits = self.trigger[query_id]
        except KeyError:
            raise KeyError(f"unknown query {query_id!r}")
        return _softmax2(logits)

    def mode_probs(self, query_id: str, c: int) -> np.ndarray:
        try:
            logits = self.modes[query_id][c]
        except KeyError:
            raise KeyError(f"unknown query {query_id!r}")
        return _softmax2(logits)

    def steps(self, query_id: str) -> int:
        return self.modes[query_id].shape[1]

    @property
    def tag(self) -> str:
        return f"v{self.version:05d}"


@dataclass
class Gradient:
    """Additive gradient with the same shape as PolicyParams."""

    trigger: dict[str, np.ndarray] = field(default_factory=dict)
    modes: dict[str, np.ndarray] = field(default_factory=dict)

    def add_trigger(self, query_id: str, g: np.ndarray) -> None:
        if query_id in self.trigger:
            self.trigger[query_id] = self.trigger[query_id] + g
        else:
            self.trigger[query_id] = np.array(g, dtype=float)

    def add_modes(self, query_id: str, g: np.ndarray) -> None:
        if query_id in self.modes:
            self.modes[query_id] = self.modes[query_id] + g
        else:
            self.modes[query_id] = np.array(g, dtype=float)

    def scaled(self, factor: float) -> "Gradient":
        return Gradient(
            {q: g * factor for q, g in self.trigger.items()},
            {q: g * factor for q, g in self.modes.items()},
        )

    def max_abs(self) -> float:
        vals = [np.max(np.abs(g)) for g in self.trigger.values()]
        vals += [np.max(np.abs(g)) for g in self.modes.values()]
        return float(max(vals)) if vals else 0.0


def init_params(
    steps_by_query: Mapping[str, int],
    kind: str = INIT_STYLED,
    style_bias: float = 1.0,
    trigger_bias: float = 2.0,
) -> PolicyParams:
    """Build initial parameters for a suite.

    neutral:          all logits zero (uniform everywhere).
    styled:           uniform trigger; branch c=0 leans reason and branch c=1
                      leans code by style_bias, mirroring what each decision
                      is meant to produce.
    reason-favoring:  trigger leans strongly to c=0 and both branches lean
                      reason — the analog of a base model that rarely emits
                      runnable code.
    """
    trigger: dict[str, np.ndarray] = {}
    modes: dict[str, np.ndarray] = {}
    for qid, T in steps_by_query.items():
        if kind == INIT_NEUTRAL:
            trig = np.zeros(2)
            mode = np.zeros((2, T, 2))
        elif kind == INIT_STYLED:
            trig = np.zeros(2)
            mode = np.zeros((2, T, 2))
            mode[0, :, MODE_REASON] = style_bias
            mode[0, :, MODE_CODE] = -style_bias
            mode[1, :, MODE_REASON] = -style_bias
            mode[1, :, MODE_CODE] = style_bias
        elif kind == INIT_REASON_FAVORING:
            trig = np.array([trigger_bias, -trigger_bias])
            mode = np.zeros((2, T, 2))
            mode[:, :, MODE_REASON] = style_bias
            mode[:, :, MODE_CODE] = -style_bias
        else:
            raise ValueError(f"unknown init kind {kind!r}")
        trigger[qid] = trig
        modes[qid] = mode
    return PolicyParams(trigger=trigger, modes=modes, version=0)


# ---------------------------------------------------------------------------
# Sampling
# ---------------------------------------------------------------------------

def decision_prob(params: PolicyParams, query_id: str) -> np.ndarray:
    return params.decision_prob(query_id)


def sample_decision(params: PolicyParams, query_id: str, rng: np.random.Generator) -> tuple[int, float]:
    p = params.decision_prob(query_id)
    c = int(rng.random() < p[1])
    return c, float(np.log(p[c]))


def sample_solution(
    params: PolicyParams,
    query_id: str,
    c: int,
    rng: np.random.Generator,
    code_tilt: float = 0.0,
) -> tuple[tuple[int, ...], float]:
    """Draw one mode sequence; returns (modes, gen_logprob of the draw).

    code_tilt shifts the code logit of every step before sampling (guided
    generation); the returned log-probability is of the tilted distribution
    actually sampled from.
    """
    modes, logps = sample_solutions(params, query_id, c, 1, rng, code_tilt)
    return tuple(int(m) for m in modes[0]), float(logps[0])


def sample_solutions(
    params: PolicyParams,
    query_id: str,
    c: int,
    n: int,
    rng: np.random.Generator,
    code_tilt: float = 0.0,
    t_start: int = 0,
) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized draw of n mode sequences for steps t_start..T-1;
    returns (modes (n, T - t_start), logps (n,))."""
    logits = np.array(params.modes[query_id][c][t_start:], dtype=float)
    if code_tilt:
        logits = logits.copy()
        logits[:, MODE_CODE] += code_tilt
    probs = _softmax2(logits)  # (T, 2)
    T = probs.shape[0]
    draws = rng.random((n, T))
    modes = (draws < probs[None, :, MODE_CODE]).astype(np.int64)
    step_logp = np.log(probs[np.arange(T)[None, :], modes])
    return modes, step_logp.sum(axis=1)


# ---------------------------------------------------------------------------
# Exact log-probabilities and score-function gradients
# ---------------------------------------------------------------------------

def solution_log_prob(params: PolicyParams, query_id: str, c: int, modes: Sequence[int]) -> float:
    probs = params.mode_probs(query_id, c)
    if len(modes) > probs.shape[0]:
        raise SchemaError(f"{len(modes)} mode steps but query has {probs.shape[0]}")
    idx = np.arange(len(modes))
    return float(np.sum(np.log(probs[idx, np.asarray(modes)])))


def log_prob(params: PolicyParams, traj: Trajectory, include_decision: bool = False) -> float:
    """Exact log-probability of the trajectory's sampled choices under params.

    By default this is the solution head only (the importance-ratio term);
    include_decision adds log pi(c|query) for joint (trigger + solution) use.
    """
    modes = decode_modes(traj.segments)
    lp = solution_log_prob(params, traj.query_id, traj.decision.c, modes)
    if include_decision:
        lp += float(np.log(params.decision_prob(traj.query_id)[traj.decision.c]))
    return lp


def grad_log_prob(params: PolicyParams, traj: Trajectory, include_decision: bool = False) -> Gradient:
    """Analytic softmax score function for the trajectory's choices."""
    grad = Gradient()
    accumulate_grad_log_prob(grad, params, traj, 1.0, include_decision)
    return grad


def accumulate_grad_log_prob(
    grad: Gradient,
    params: PolicyParams,
    traj: Trajectory,
    weight: float,
    include_decision: bool = False,
) -> None:
    modes = decode_modes(traj.segments)
    qid, c = traj.query_id, traj.decision.c
    probs = params.mode_probs(qid, c)
    g = np.zeros_like(params.modes[qid])
    for t, m in enumerate(modes):
        g[c, t, m] += weight
        g[c, t, :] -= weight * probs[t]
    grad.add_modes(qid, g)
    if include_decision:
        p = params.decision_prob(qid)
        gt = -weight * p
        gt[c] += weight
        grad.add_trigger(qid, gt)


def apply_update(params: PolicyParams, grad: Gradient, lr: float) -> PolicyParams:
    """Gradient-ascent step: params + lr * grad, as a new version."""
    if lr < 0:
        raise ValueError("lr must be >= 0")
    trigger = {q: np.array(v, dtype=float) for q, v in params.trigger.items()}
    modes = {q: np.array(v, dtype=float) for q, v in params.modes.items()}
    for q, g in grad.trigger.items():
        if q not in trigger:
            raise SchemaError(f"gradient for unknown query {q!r}")
        if g.shape != trigger[q].shape:
            raise SchemaError(f"trigger gradient shape mismatch for {q!r}")
        trigger[q] += lr * g
    for q, g in grad.modes.items():
        if q not in modes:
            raise SchemaError(f"gradient for unknown query {q!r}")
        if g.shape != modes[q].shape:
            raise SchemaError(f"mode gradient shape mismatch for {q!r}")
        modes[q] += lr * g
    return PolicyParams(trigger=trigger, modes=modes, version=params.version + 1)


def snapshot(params: PolicyParams) -> PolicyParams:
    """Frozen copy used as the off-policy reference (same version)."""
    return PolicyParams(
        trigger={q: np.array(v, dtype=float) for q, v in params.trigger.items()},
        modes={q: np.array(v, dtype=float) for q, v in params.modes.items()},
        version=params.version,
    )


# ---------------------------------------------------------------------------
# Checkpoints: one JSONL header line, then one line per query
# ---------------------------------------------------------------------------

def save_checkpoint(params: PolicyParams, path: str | Path, config_hash: str = "") -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        header = {"version": params.version, "config_hash": config_hash}
        fh.write(json.dumps(header, separators=(",", ":")) + "\n")
        for qid in sorted(params.trigger):
            row = {
                "query_id": qid,
                "trigger": [float(x) for x in params.trigger[qid]],
                "modes": [[[float(x) for x in step] for step in branch] for branch in params.modes[qid]],
            }
            fh.write(json.dumps(row, separators=(",", ":")) + "\n")


def load_checkpoint(path: str | Path) -> tuple[PolicyParams, dict]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines:
        raise SchemaError(f"empty checkpoint file {path}")
    header = json.loads(lines[0])
    trigger: dict[str, np.ndarray] = {}
    modes: dict[str, np.ndarray] = {}
    for line in lines[1:]:
        if not line.strip():
            continue
        row = json.loads(line)
        trigger[row["query_id"]] = np.array(row["trigger"], dtype=float)
        modes[row["query_id"]] = np.array(row["modes"], dtype=float)
    params = PolicyParams(trigger=trigger, modes=modes, version=int(header.get("version", 0)))
    return params, header
