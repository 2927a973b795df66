"""Trajectory generation: forced-decision probing, prefix-guided probing,
mid-trajectory branch rollouts, and the multi-round generate/execute loop.

Two backends share one surface. The simulation backend samples mode
sequences from the tabular policy against a synthetic query spec; the LLM
backend drives an OpenAI-compatible endpoint and a code executor. Probing
always runs both decisions, which is what gives the E-step its value
estimates regardless of how lopsided the current trigger prior is.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Mapping, Sequence

import numpy as np

from . import llm_bridge, policy as policy_mod
from .core import (
    C_CODE,
    C_REASON,
    CODE,
    EXEC_RESULT,
    FINAL_ANSWER,
    GUIDANCE_FORCED,
    GUIDANCE_PREFIX_CODE,
    GUIDANCE_VANILLA,
    REASONING,
    Decision,
    Query,
    Segment,
    Trajectory,
    code,
    decode_modes,
    exec_result,
    final_answer,
    grade,
    reasoning,
)
from .env import SynthQuerySpec, success_prob
from .llm_bridge import EndpointConfig, GenResult, ParsedText, RequestError, TransportError

log = logging.getLogger(__name__)

FAILURE_ANSWER = "incorrect"

# grading is pure and segments are immutable values, so the simulator shares
# (caches) the handful of distinct objects it builds millions of times
_grade = lru_cache(maxsize=8192)(grade)
_final_answer = lru_cache(maxsize=8192)(final_answer)
_DECISIONS = (Decision(0, 0), Decision(1, 0))


@lru_cache(maxsize=256)
def _step_segments(t: int, mode: int) -> tuple[Segment, ...]:
    if mode == C_CODE:
        return (code(f"step_{t}()"), exec_result("ok"))
    return (reasoning(f"reason step {t}"),)


@dataclass(frozen=True)
class ProbeArm:
    c: int
    guidance: str


DEFAULT_ARMS = (ProbeArm(C_REASON, GUIDANCE_VANILLA), ProbeArm(C_CODE, GUIDANCE_PREFIX_CODE))


@dataclass(frozen=True)
class ProbePlan:
    query_id: str
    K: int
    arms: tuple[ProbeArm, ...] = DEFAULT_ARMS
    branch_points: tuple[tuple[int, int], ...] = ()  # (source trajectory index, prefix segment index)

    def __post_init__(self):
        if self.K < 1:
            raise ValueError("K must be >= 1")


@dataclass
class ProbeResult:
    trajectories: list[Trajectory]
    incomplete: list[tuple[str, int, str]] = field(default_factory=list)  # (query_id, c, reason)


class EpisodeFailure(RuntimeError):
    """An episode could not be completed (endpoint failure after retries)."""


# ---------------------------------------------------------------------------
# Simulation backend
# ---------------------------------------------------------------------------

def build_sim_trajectory(
    query: Query,
    decision: Decision,
    modes: Sequence[int],
    success: bool,
    gen_logprob: float | None,
    policy_tag: str,
    guidance: str,
    prefix_segments: tuple[Segment, ...] = (),
    prefix_mode_count: int = 0,
) -> Trajectory:
    segments = list(prefix_segments)
    for i, m in enumerate(modes):
        segments.extend(_step_segments(prefix_mode_count + i, int(m)))
    answer = query.gold_answer if success else FAILURE_ANSWER
    segments.append(_final_answer(answer))
    rounds = sum(1 for s in segments if s.kind == EXEC_RESULT)
    return Trajectory(
        query_id=query.id,
        decision=decision,
        segments=tuple(segments),
        reward=_grade(answer, query.gold_answer),
        gen_logprob=min(gen_logprob, 0.0) if gen_logprob is not None else None,
        policy_tag=policy_tag,
        guidance=guidance,
        rounds=rounds,
    )


class SimulationBackend:
    """Generates trajectories by sampling the tabular policy on synthetic specs.

    prefix-code guidance tilts the per-step code logit by code_bias during
    sampling; gen_logprob records the tilted (actually generating)
    distribution, while training ratios are later evaluated against policy
    snapshots.
    """

    mode = "simulation"

    def __init__(self, suite: Sequence[SynthQuerySpec], queries: Sequence[Query], code_bias: float = 2.5):
        self.specs: dict[str, SynthQuerySpec] = {s.query_id: s for s in suite}
        self.queries: dict[str, Query] = {q.id: q for q in queries}
        missing = set(self.specs) - set(self.queries)
        if missing:
            raise ValueError(f"queries missing for specs: {sorted(missing)[:3]}...")
        self.code_bias = code_bias

    def rollout_batch(
        self,
        query_id: str,
        c: int,
        guidance: str,
        policy: policy_mod.PolicyParams,
        K: int,
        rng: np.random.Generator,
        policy_tag: str,
        sample_c: bool = False,
    ) -> list[Trajectory]:
        spec = self.specs[query_id]
        query = self.queries[query_id]
        tilt = self.code_bias if guidance == GUIDANCE_PREFIX_CODE else 0.0
        step = spec.step_success()
        t_idx = np.arange(spec.T)
        if sample_c:
            p = policy.decision_prob(query_id)
            cs = (rng.random(K) < p[1]).astype(np.int64)
            c_logps = np.log(p[cs])
        else:
            cs = np.full(K, c, dtype=np.int64)
            c_logps = np.zeros(K)
        modes_all = np.empty((K, spec.T), dtype=np.int64)
        logps_all = np.empty(K)
        for ck in (0, 1):
            mask = cs == ck
            n = int(mask.sum())
            if n == 0:
                continue
            modes, logps = policy_mod.sample_solutions(policy, query_id, ck, n, rng, code_tilt=tilt)
            modes_all[mask] = modes
            logps_all[mask] = logps
        p_success = np.prod(step[t_idx[None, :], modes_all], axis=1)
        outcomes = rng.random(K) < p_success
        out: list[Trajectory] = []
        for k in range(K):
            gen_lp = float(logps_all[k]) + (float(c_logps[k]) if sample_c else 0.0)
            out.append(
                build_sim_trajectory(
                    query,
                    _DECISIONS[int(cs[k])],
                    [int(x) for x in modes_all[k]],
                    bool(outcomes[k]),
                    gen_lp,
                    policy_tag,
                    guidance,
                )
            )
        return out

    def branch_batch(
        self,
        source: Trajectory,
        t: int,
        c_new: int | None,
        policy: policy_mod.PolicyParams,
        K: int,
        rng: np.random.Generator,
        policy_tag: str,
    ) -> list[Trajectory]:
        spec = self.specs[source.query_id]
        query = self.queries[source.query_id]
        prefix = source.segments[:t]
        prefix_modes = decode_modes(prefix)
        n_done = len(prefix_modes)
        rest = spec.T - n_done
        step = spec.step_success()
        prefix_factor = float(np.prod(step[np.arange(n_done), np.asarray(prefix_modes, dtype=np.int64)])) if n_done else 1.0
        out = []
        guidance = f"branch:{t}"
        for _ in range(K):
            if c_new is None:
                ck, c_logp = policy_mod.sample_decision(policy, source.query_id, rng)
            else:
                ck, c_logp = c_new, 0.0
            if rest == 0:
                # nothing stochastic remains: the continuation replicates the
                # source verbatim, so the realized answer (and grade) carries over
                answer_seg = source.segments[-1]
                segments = prefix + (answer_seg,) if answer_seg.kind == FINAL_ANSWER else prefix
                out.append(
                    Trajectory(
                        query_id=source.query_id,
                        decision=Decision(ck, t),
                        segments=segments,
                        reward=source.reward,
                        gen_logprob=0.0,
                        policy_tag=policy_tag,
                        guidance=guidance,
                        rounds=sum(1 for s in segments if s.kind == EXEC_RESULT),
                    )
                )
                continue
            modes, logps = policy_mod.sample_solutions(policy, source.query_id, ck, 1, rng, t_start=n_done)
            m = modes[0]
            cont_logp = float(logps[0])
            tail = step[np.arange(n_done, spec.T), m]
            success = bool(rng.random() < prefix_factor * float(np.prod(tail)))
            out.append(
                build_sim_trajectory(
                    query,
                    Decision(ck, t),
                    [int(x) for x in m],
                    success,
                    cont_logp + (c_logp if c_new is None else 0.0),
                    policy_tag,
                    guidance,
                    prefix_segments=prefix,
                    prefix_mode_count=n_done,
                )
            )
        return out


# ---------------------------------------------------------------------------
# Probing
# ---------------------------------------------------------------------------

def probe(
    plan: ProbePlan,
    policy: policy_mod.PolicyParams,
    backend,
    rng: np.random.Generator,
    policy_tag: str = "v00000",
) -> ProbeResult:
    """Run K rollouts for every arm of the plan, then any branch rollouts;
    never drops an arm silently."""
    result = ProbeResult(trajectories=[])
    for arm in plan.arms:
        try:
            trajs = backend.rollout_batch(plan.query_id, arm.c, arm.guidance, policy, plan.K, rng, policy_tag)
        except EpisodeFailure as exc:
            log.warning("arm (%s, c=%d) incomplete: %s", plan.query_id, arm.c, exc)
            result.incomplete.append((plan.query_id, arm.c, str(exc)))
            continue
        result.trajectories.extend(trajs)
    for src_idx, seg_idx in plan.branch_points:
        if not (0 <= src_idx < len(result.trajectories)):
            raise ValueError(f"branch source index {src_idx} out of range")
        result.trajectories.extend(
            branch_rollouts(result.trajectories[src_idx], seg_idx, policy, backend, plan.K, rng, policy_tag=policy_tag)
        )
    return result


def branch_rollouts(
    source: Trajectory,
    t: int,
    policy: policy_mod.PolicyParams,
    backend,
    K: int,
    rng: np.random.Generator,
    c_new: int | None = None,
    policy_tag: str = "v00000",
) -> list[Trajectory]:
    """K continuations sharing source.segments[:t] verbatim, with a fresh
    decision at position t (sampled from the trigger head unless forced)."""
    if not (0 < t < len(source.segments)):
        raise ValueError(f"branch index {t} out of range (1..{len(source.segments) - 1})")
    prefix = source.segments[:t]
    if any(s.kind == FINAL_ANSWER for s in prefix):
        raise ValueError("branch prefix may not contain the final answer")
    if prefix[-1].kind == CODE:
        raise ValueError("cannot branch between a code segment and its execution result")
    return backend.branch_batch(source, t, c_new, policy, K, rng, policy_tag)


def candidate_branch_points(traj: Trajectory) -> list[int]:
    """Segment indices at completed-step boundaries (after reasoning or after
    an execution result), excluding the trajectory start and end."""
    points = []
    for i in range(1, len(traj.segments)):
        prev = traj.segments[i - 1]
        if traj.segments[i].kind == FINAL_ANSWER:
            continue
        if prev.kind in (EXEC_RESULT, REASONING):
            points.append(i)
    return points


# ---------------------------------------------------------------------------
# LLM backend: multi-round episodes
# ---------------------------------------------------------------------------

BASE_TEMPLATE = (
    "{prompt}\n\n"
    "Solve the problem step by step. You may run python code in ``` fences; "
    "execution output will be returned to you. Put the final answer in \\boxed{{}}."
)
NO_CODE_TEMPLATE = (
    "{prompt}\n\n"
    "Solve the problem step by step using pure reasoning, without writing code. "
    "Put the final answer in \\boxed{{}}."
)


def run_episode(
    query: Query,
    endpoint_cfg: EndpointConfig,
    executor,
    max_rounds: int = 3,
    transport=None,
    guidance: str = GUIDANCE_VANILLA,
    prefix_guidance_text: str = "",
    forced_c: int | None = None,
    policy_tag: str = "endpoint",
    exec_timeout_ms: int = 10_000,
) -> Trajectory:
    """One generate -> execute -> continue episode against the endpoint.

    Each emitted fenced code block is executed and its output appended as an
    exec_result segment before generation resumes; the episode ends at a
    final answer, at end-of-generation, or after max_rounds executions.
    Execution timeouts are surfaced to the model (it may recover); endpoint
    failures raise EpisodeFailure.
    """
    if max_rounds < 1:
        raise ValueError("max_rounds must be >= 1")
    template = NO_CODE_TEMPLATE if forced_c == C_REASON else BASE_TEMPLATE
    base_prompt = template.format(prompt=query.prompt)
    segments: list[Segment] = []
    rounds = 0
    logprob_total = 0.0
    logprob_ok = True

    while True:
        prompt = base_prompt
        prefill = ""
        if guidance == GUIDANCE_PREFIX_CODE and prefix_guidance_text:
            if endpoint_cfg.guidance_mode == "prefill":
                prefill = prefix_guidance_text
            else:
                prompt = f"{base_prompt}\n\n{prefix_guidance_text}"
        transcript = llm_bridge.render_segments(segments)
        if transcript:
            prefill = (prefill + "\n" + transcript) if prefill else transcript
        try:
            gen: GenResult = llm_bridge.generate(
                endpoint_cfg, prompt, transport=transport, prefill=prefill or None
            )
        except (TransportError, RequestError) as exc:
            raise EpisodeFailure(f"endpoint failure for {query.id}: {exc}") from exc
        if gen.logprob_sum is None:
            logprob_ok = False
        else:
            logprob_total += gen.logprob_sum
        parsed: ParsedText = llm_bridge.parse_segments(gen.text)
        chunk = list(parsed.segments)

        code_idx = next((i for i, s in enumerate(chunk) if s.kind == CODE), None)
        if code_idx is None:
            segments.extend(chunk)
            break
        # conditioned on no execution output yet, text after the code block is
        # speculative; keep up to the code block and execute it
        kept = chunk[: code_idx + 1]
        segments.extend(kept)
        if rounds >= max_rounds:
            break
        outcome = executor.run(kept[-1].text, timeout_ms=exec_timeout_ms)
        segments.append(exec_result(outcome.output, outcome.status))
        rounds += 1

    # a final answer must be terminal; drop trailing non-answer segments after one
    answer_text = None
    cleaned: list[Segment] = []
    for seg in segments:
        cleaned.append(seg)
        if seg.kind == FINAL_ANSWER:
            answer_text = seg.text
            break
    reward = grade(answer_text, query.gold_answer) if answer_text is not None else 0
    if forced_c is not None:
        decision = Decision(forced_c, 0)
    else:
        first_code = next((i for i, s in enumerate(cleaned) if s.kind == CODE), None)
        decision = Decision(C_CODE, first_code) if first_code is not None else Decision(C_REASON, 0)
    return Trajectory(
        query_id=query.id,
        decision=decision,
        segments=tuple(cleaned),
        reward=reward,
        gen_logprob=min(logprob_total, 0.0) if logprob_ok else None,
        policy_tag=policy_tag,
        guidance=guidance,
        rounds=sum(1 for s in cleaned if s.kind == EXEC_RESULT),
    )


class LLMBackend:
    """Probe backend that drives an endpoint plus an executor (or pool)."""

    mode = "llm"

    def __init__(
        self,
        endpoint_cfg: EndpointConfig,
        queries: Sequence[Query],
        executor,
        transport=None,
        max_rounds: int = 3,
        prefix_guidance_text: str = "",
        exec_timeout_ms: int = 10_000,
        workers: int = 1,
    ):
        self.endpoint_cfg = endpoint_cfg
        self.queries = {q.id: q for q in queries}
        self.executor = executor
        self.transport = transport
        self.max_rounds = max_rounds
        self.prefix_guidance_text = prefix_guidance_text
        self.exec_timeout_ms = exec_timeout_ms
        self.workers = max(1, workers)

    def _one(self, query: Query, c: int | None, guidance: str, policy_tag: str) -> Trajectory:
        if hasattr(self.executor, "lease"):
            with self.executor.lease() as ex:
                return run_episode(
                    query, self.endpoint_cfg, ex, self.max_rounds, self.transport,
                    guidance, self.prefix_guidance_text, c, policy_tag, self.exec_timeout_ms,
                )
        return run_episode(
            query, self.endpoint_cfg, self.executor, self.max_rounds, self.transport,
            guidance, self.prefix_guidance_text, c, policy_tag, self.exec_timeout_ms,
        )

    def rollout_batch(self, query_id, c, guidance, policy, K, rng, policy_tag, sample_c=False):
        query = self.queries[query_id]
        forced = None if sample_c else c
        if self.workers == 1 or K == 1:
            return [self._one(query, forced, guidance, policy_tag) for _ in range(K)]
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=self.workers) as pool:
            futures = [pool.submit(self._one, query, forced, guidance, policy_tag) for _ in range(K)]
            return [f.result() for f in futures]

    def branch_batch(self, source, t, c_new, policy, K, rng, policy_tag):
        raise NotImplementedError("branch rollouts against a live endpoint are not wired yet")
