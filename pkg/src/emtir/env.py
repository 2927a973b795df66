"""Synthetic reasoning environment with exact brute-force oracles.

Each query has T solution steps. At every step the solver works either in
reasoning mode or in code mode; the step succeeds with a mode-dependent
probability (code pays a translation-gap penalty). The answer is correct only
if every step succeeds, so the reward is terminal and binary and the space of
mode interleavings is genuinely combinatorial (2^T). Everything is small
enough to enumerate, which gives exact values for all quantities the training
stack estimates by sampling.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

from .core import (
    Query,
    RefEntry,
    ReferenceStrategy,
    SchemaError,
    VARIANT_APPENDIX,
    VARIANT_MAIN,
    VARIANT_POSTERIOR,
    read_jsonl,
    write_jsonl,
)

MODE_REASON = 0
MODE_CODE = 1

ENUMERATION_CAP_T = 16

PROFILES = ("balanced", "code-favored", "reason-favored", "mixed-difficulty")


@dataclass(frozen=True)
class SynthQuerySpec:
    query_id: str
    T: int
    p_reason: tuple[float, ...]
    p_code: tuple[float, ...]
    gap: float

    def __post_init__(self):
        if self.T < 1:
            raise ValueError("T must be >= 1")
        if len(self.p_reason) != self.T or len(self.p_code) != self.T:
            raise ValueError("p_reason/p_code length must equal T")
        for p in (*self.p_reason, *self.p_code, self.gap):
            if not (0.0 <= p <= 1.0):
                raise ValueError(f"probability {p} outside [0,1]")

    def step_success(self) -> np.ndarray:
        """Per-step success probabilities, shape (T, 2): [:,0] reason, [:,1] code."""
        out = np.empty((self.T, 2))
        out[:, MODE_REASON] = self.p_reason
        out[:, MODE_CODE] = np.asarray(self.p_code) * (1.0 - self.gap)
        return out


def success_prob(spec: SynthQuerySpec, modes: Sequence[int]) -> float:
    """Exact success probability of one mode sequence: the product of its per-step terms."""
    if len(modes) != spec.T:
        raise ValueError(f"mode sequence length {len(modes)} != T={spec.T}")
    step = spec.step_success()
    return float(np.prod(step[np.arange(spec.T), np.asarray(modes)]))


def sample_outcome(spec: SynthQuerySpec, modes: Sequence[int], rng: np.random.Generator) -> int:
    return int(rng.random() < success_prob(spec, modes))


def _enumerate_modes(n_steps: int) -> np.ndarray:
    """All mode sequences of the given length, shape (2^n, n), entries in {0,1}."""
    if n_steps > ENUMERATION_CAP_T:
        raise ValueError(f"enumeration supports at most T={ENUMERATION_CAP_T}, got {n_steps}")
    n = 1 << n_steps
    bits = (np.arange(n)[:, None] >> np.arange(n_steps)[None, :]) & 1
    return bits.astype(np.int64)


def exact_q(spec: SynthQuerySpec, c: int, policy, prefix_modes: Sequence[int] = ()) -> float:
    """Expected success rate of decision c under the policy, by full enumeration.

    Sums policy probability times success probability over every remaining
    mode sequence; with a prefix, the prefix steps contribute their success
    factors and the enumeration covers only the remaining steps.
    """
    step = spec.step_success()
    n_done = len(prefix_modes)
    if n_done > spec.T:
        raise ValueError("prefix longer than T")
    prefix_factor = 1.0
    for t, m in enumerate(prefix_modes):
        prefix_factor *= step[t, m]
    rest = spec.T - n_done
    if rest == 0:
        return float(prefix_factor)
    probs = policy.mode_probs(spec.query_id, c)  # (T, 2)
    seqs = _enumerate_modes(rest)
    t_idx = np.arange(n_done, spec.T)
    pol = np.prod(probs[t_idx[None, :], seqs], axis=1)
    suc = np.prod(step[t_idx[None, :], seqs], axis=1)
    return float(prefix_factor * np.dot(pol, suc))


def exact_posterior(
    spec: SynthQuerySpec, policy, alpha: float, variant: str = VARIANT_MAIN
) -> ReferenceStrategy:
    """Exact reference strategy over c for one query, computed from exact_q.

    This is the ground-truth oracle for the sampled E-step. Variants:
      main-text      s(c) = exp(alpha * pi(c) * Q(c)) / Z
      appendix-prior s(c) ~ pi(c) * exp(alpha * pi(c) * Q(c))
      posterior      s(c) ~ pi(c) * Q(c)   (the exact posterior over c)
    """
    pi = policy.decision_prob(spec.query_id)
    q = np.array([exact_q(spec, 0, policy), exact_q(spec, 1, policy)])
    s0, s1, log_z = strategy_from_values(pi, q, alpha, variant)
    entry = RefEntry(s0, s1, log_z)
    return ReferenceStrategy({spec.query_id: entry}, variant, alpha)


def strategy_from_values(
    pi: Sequence[float], q: Sequence[float], alpha: float, variant: str
) -> tuple[float, float, float]:
    """Log-space evaluation of one reference-strategy entry; returns (s0, s1, log_Z)."""
    pi = np.asarray(pi, dtype=float)
    q = np.asarray(q, dtype=float)
    if variant == VARIANT_MAIN:
        energies = alpha * pi * q
    elif variant == VARIANT_APPENDIX:
        energies = np.log(pi) + alpha * pi * q
    elif variant == VARIANT_POSTERIOR:
        if float(np.dot(pi, q)) <= 0.0:
            # no arm has any success mass: posterior undefined, fall back to prior
            energies = np.log(pi)
        else:
            with np.errstate(divide="ignore"):
                energies = np.log(pi) + np.log(q)
    else:
        raise ValueError(f"unknown variant {variant!r}")
    m = float(np.max(energies))
    log_z = m + math.log(float(np.sum(np.exp(energies - m))))
    s = np.exp(energies - log_z)
    return float(s[0]), float(s[1]), log_z


# ---------------------------------------------------------------------------
# Oracles over whole queries
# ---------------------------------------------------------------------------

def oracle_optimal_modes(spec: SynthQuerySpec) -> tuple[int, ...]:
    step = spec.step_success()
    return tuple(int(m) for m in np.argmax(step, axis=1))


def oracle_optimal_reward(spec: SynthQuerySpec) -> float:
    """Best achievable success probability over all mode interleavings."""
    return float(np.prod(np.max(spec.step_success(), axis=1)))


def oracle_optimal_decision(spec: SynthQuerySpec) -> int:
    """The better pure modality: 1 if all-code beats all-reason, else 0."""
    step = spec.step_success()
    return int(np.prod(step[:, MODE_CODE]) > np.prod(step[:, MODE_REASON]))


def expected_reward(spec: SynthQuerySpec, policy) -> float:
    """Exact expected reward of the full policy on one query."""
    pi = policy.decision_prob(spec.query_id)
    return float(pi[0] * exact_q(spec, 0, policy) + pi[1] * exact_q(spec, 1, policy))


# ---------------------------------------------------------------------------
# Suite generation
# ---------------------------------------------------------------------------

def generate_suite(seed: int, n_queries: int, profile: str = "balanced") -> list[SynthQuerySpec]:
    """Deterministically generate a query suite.

    balanced:        per query one modality dominates every step, ~50/50 split
                     of which modality that is across the suite.
    code-favored:    code dominates every query.
    reason-favored:  reasoning dominates every query.
    mixed-difficulty: balanced favorability but widely varying step strengths,
                     so optimal expected rewards spread out.
    """
    if n_queries < 1:
        raise ValueError("n_queries must be >= 1")
    if profile not in PROFILES:
        raise ValueError(f"unknown profile {profile!r}; expected one of {PROFILES}")
    rng = np.random.default_rng(seed)
    specs = []
    for i in range(n_queries):
        qid = f"q{i:05d}"
        T = int(rng.integers(2, 5))
        if profile == "code-favored":
            code_is_better = True
        elif profile == "reason-favored":
            code_is_better = False
        else:
            code_is_better = bool(rng.random() < 0.5)
        if profile == "mixed-difficulty":
            hi = rng.uniform(0.35, 0.95, size=T)
            lo = np.clip(hi - rng.uniform(0.15, 0.35, size=T), 0.05, None)
        else:
            hi = rng.uniform(0.82, 0.95, size=T)
            lo = rng.uniform(0.42, 0.62, size=T)
        gap = float(rng.uniform(0.0, 0.05))
        eff_code = hi if code_is_better else lo
        p_reason = lo if code_is_better else hi
        p_code = np.minimum(eff_code / (1.0 - gap), 1.0)
        specs.append(
            SynthQuerySpec(
                query_id=qid,
                T=T,
                p_reason=tuple(round(float(p), 12) for p in p_reason),
                p_code=tuple(round(float(p), 12) for p in p_code),
                gap=round(gap, 12),
            )
        )
    return specs


def suite_queries(specs: Iterable[SynthQuerySpec]) -> list[Query]:
    """Wrap a suite into Query records (deterministic synthetic gold answers)."""
    out = []
    for i, spec in enumerate(specs):
        out.append(
            Query(
                id=spec.query_id,
                prompt=f"synthetic task {spec.query_id} with {spec.T} steps",
                gold_answer=str(2 * i + 1),
                env_ref=spec.query_id,
            )
        )
    return out


# ---------------------------------------------------------------------------
# Suite IO
# ---------------------------------------------------------------------------

def spec_to_record(spec: SynthQuerySpec) -> dict[str, Any]:
    return {
        "query_id": spec.query_id,
        "T": spec.T,
        "p_reason": list(spec.p_reason),
        "p_code": list(spec.p_code),
        "gap": spec.gap,
    }


def spec_from_record(rec: Mapping[str, Any]) -> SynthQuerySpec:
    try:
        return SynthQuerySpec(
            query_id=rec["query_id"],
            T=rec["T"],
            p_reason=tuple(rec["p_reason"]),
            p_code=tuple(rec["p_code"]),
            gap=rec["gap"],
        )
    except KeyError as exc:
        raise SchemaError(f"suite record missing field {exc}") from exc


def write_suite(specs: Iterable[SynthQuerySpec], path: str | Path) -> None:
    write_jsonl((spec_to_record(s) for s in specs), path)


def read_suite(path: str | Path) -> list[SynthQuerySpec]:
    return [spec_from_record(rec) for rec in read_jsonl(path)]
