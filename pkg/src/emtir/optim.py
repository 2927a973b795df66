"""The M-step and the comparison training paradigms.

The update ascends a clipped off-policy objective plus a cross-entropy term
that aligns the trigger head with the reference strategy:

    J = E[ clip(rho, 1-eps, 1+eps) * A ] + ce_weight * E[ log pi(c | query) ]

with rho the ratio of the current to the frozen reference policy over the
trajectory's sampled choices and A the query-wise normalized advantage. Both
the literal clip (gradient zero outside the interval) and the PPO min form
are supported, at sequence or per-step ratio granularity.

Exact mode replaces sampling with enumeration: the E-step uses the exact
posterior over the trigger decision and the M-step ascends the exact
objective (expected return under the reference strategy minus the trigger
cross-entropy), which is the regime with the textbook monotonicity guarantee
on the log-likelihood of producing a correct answer.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping, Sequence

import numpy as np

from . import curation as curation_mod, policy as policy_mod
from .core import (
    CLIP_PAPER,
    CLIP_PPO_MIN,
    Config,
    GUIDANCE_VANILLA,
    Query,
    RATIO_PER_STEP,
    RATIO_SEQUENCE,
    RefEntry,
    ReferenceStrategy,
    SchemaError,
    Trajectory,
    config_hash,
    decode_modes,
    reference_strategy_records,
    trajectory_to_record,
    write_jsonl,
)
from .curation import CuratedDataset, CuratedExample
from .env import SynthQuerySpec, exact_q, expected_reward, oracle_optimal_decision, oracle_optimal_modes
from .policy import Gradient, PolicyParams, apply_update, snapshot

log = logging.getLogger(__name__)

KIND_ONPOLICY = "onpolicy_rl"
KIND_IMITATION = "imitation"
KIND_BASE_RL = "base_rl"
BASELINE_KINDS = (KIND_ONPOLICY, KIND_IMITATION, KIND_BASE_RL)

METRIC_COLUMNS = (
    "iteration",
    "phase",
    "objective",
    "elbo",
    "j_mle",
    "mean_invocation_rate",
    "pass1_dev",
    "wallclock_s",
    "interactions",
)


# ---------------------------------------------------------------------------
# Advantages
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AdvantageBatch:
    values: np.ndarray                      # aligned with the examples it was built from
    stats: Mapping[str, tuple[float, float, int]]  # query_id -> (mean, std, count)


def advantages_from_pairs(pairs: Sequence[tuple[str, float]], std_floor: float = 1e-6) -> AdvantageBatch:
    """Query-wise reward normalization: A = (r - mean_q) / max(std_q, floor).

    Uses the population standard deviation; groups of size one (and any
    zero-variance group) come out all zero.
    """
    if std_floor <= 0:
        raise ValueError("std_floor must be > 0")
    by_query: dict[str, list[int]] = {}
    for i, (qid, _) in enumerate(pairs):
        by_query.setdefault(qid, []).append(i)
    values = np.zeros(len(pairs))
    stats: dict[str, tuple[float, float, int]] = {}
    for qid, idxs in by_query.items():
        rewards = np.array([pairs[i][1] for i in idxs], dtype=float)
        mean = float(rewards.mean())
        std = float(rewards.std())
        stats[qid] = (mean, std, len(idxs))
        if len(idxs) == 1:
            continue
        values[idxs] = (rewards - mean) / max(std, std_floor)
    return AdvantageBatch(values=values, stats=stats)


def advantages(dataset: CuratedDataset | Sequence, std_floor: float = 1e-6) -> AdvantageBatch:
    items = _as_items(dataset)
    return advantages_from_pairs([(qid, traj.reward) for qid, _, traj in items], std_floor)


def _as_items(dataset) -> list[tuple[str, int, Trajectory]]:
    if isinstance(dataset, CuratedDataset):
        seq: Iterable = dataset.examples
    else:
        seq = dataset
    items = []
    for entry in seq:
        if isinstance(entry, CuratedExample):
            items.append((entry.query_id, entry.c, entry.trajectory))
        elif isinstance(entry, Trajectory):
            items.append((entry.query_id, entry.decision.c, entry))
        else:
            raise SchemaError(f"cannot train on {type(entry).__name__}")
    return items


# ---------------------------------------------------------------------------
# Clipped off-policy objective
# ---------------------------------------------------------------------------

def _clip_term(rho: float, A: float, eps: float, clip_form: str) -> tuple[float, bool]:
    """Per-example objective contribution and whether gradient flows."""
    clipped = min(max(rho, 1.0 - eps), 1.0 + eps)
    if clip_form == CLIP_PAPER:
        return clipped * A, (1.0 - eps) < rho < (1.0 + eps)
    if clip_form == CLIP_PPO_MIN:
        unclipped = rho * A
        value = min(unclipped, clipped * A)
        return value, unclipped <= clipped * A
    raise ValueError(f"unknown clip_form {clip_form!r}")


def offpolicy_objective_and_grad(
    policy: PolicyParams,
    ref_policy: PolicyParams,
    dataset,
    adv: AdvantageBatch,
    cfg: Config,
    include_decision: bool = False,
    add_ce: bool = True,
    want_grad: bool = True,
) -> tuple[float, Gradient | None, dict[str, float]]:
    """Evaluate J (and optionally its analytic gradient) on a dataset.

    J is the sum over queries of each query's per-example mean. Parameters
    are per-query and disjoint, so this keeps the effective per-query step
    size independent of how many queries the suite holds (a global mean
    would shrink every update by 1/n_queries); info["objective_mean"]
    carries the per-query average for reporting.

    include_decision folds the trigger probability into the importance ratio
    (used by the on-policy baselines); add_ce adds the trigger cross-entropy
    term of the EM M-step. Non-finite ratios are skipped and counted.
    """
    items = _as_items(dataset)
    if len(items) != len(adv.values):
        raise SchemaError("advantage batch does not align with dataset")
    j_clip = 0.0
    j_ce = 0.0
    skipped = 0
    eps = cfg.clip_eps
    group_size: dict[str, int] = {}
    for qid, _, _ in items:
        group_size[qid] = group_size.get(qid, 0) + 1
    n_queries = max(len(group_size), 1)

    # vectorize over examples that share (query, c, sequence length)
    batches: dict[tuple[str, int, int], list[int]] = {}
    modes_of: list[tuple[int, ...]] = []
    for i, (qid, c, traj) in enumerate(items):
        modes = decode_modes(traj.segments)
        modes_of.append(modes)
        batches.setdefault((qid, c, len(modes)), []).append(i)

    g_trig: dict[str, np.ndarray] = {}
    g_modes: dict[str, np.ndarray] = {}
    if want_grad:
        for qid, _, _ in items:
            if qid not in g_modes:
                g_modes[qid] = np.zeros_like(policy.modes[qid])
                g_trig[qid] = np.zeros(2)

    adv_vals = np.asarray(adv.values, dtype=float)
    for (qid, c, seq_len), idxs in sorted(batches.items()):
        inv_n = 1.0 / group_size[qid]
        p_new = policy.mode_probs(qid, c)
        lp_new_tab = np.log(p_new)
        lp_ref_tab = np.log(ref_policy.mode_probs(qid, c))
        pi_new = policy.decision_prob(qid)
        pi_ref = ref_policy.decision_prob(qid)
        n = len(idxs)
        A = adv_vals[idxs]
        t_idx = np.arange(seq_len)
        modes_mat = np.array([modes_of[i] for i in idxs], dtype=np.int64).reshape(n, seq_len)
        lp_new = lp_new_tab[t_idx[None, :], modes_mat]
        lp_ref = lp_ref_tab[t_idx[None, :], modes_mat]
        if include_decision:
            lp_new = np.concatenate(
                (np.full((n, 1), np.log(pi_new[c])), lp_new), axis=1
            )
            lp_ref = np.concatenate(
                (np.full((n, 1), np.log(pi_ref[c])), lp_ref), axis=1
            )
        log_rho_steps = lp_new - lp_ref

        if cfg.ratio_granularity == RATIO_SEQUENCE:
            rho = np.exp(log_rho_steps.sum(axis=1))
            ok = np.isfinite(rho)
            term, flows = _clip_terms_vec(rho, A, eps, cfg.clip_form)
            j_clip += inv_n * float(term[ok].sum())
            if want_grad:
                w = np.where(ok & flows & (A != 0.0), inv_n * A * rho, 0.0)
                if np.any(w != 0.0):
                    gm = g_modes[qid][c]
                    np.add.at(gm, (np.broadcast_to(t_idx, (n, seq_len)), modes_mat), w[:, None])
                    gm[:seq_len] -= w.sum() * p_new[:seq_len]
                    if include_decision:
                        g_trig[qid][c] += w.sum()
                        g_trig[qid] -= w.sum() * pi_new
        elif cfg.ratio_granularity == RATIO_PER_STEP:
            rhos = np.exp(log_rho_steps)
            ok = np.all(np.isfinite(rhos), axis=1)
            n_factors = rhos.shape[1]
            term, flows = _clip_terms_vec(rhos, A[:, None], eps, cfg.clip_form)
            j_clip += inv_n * float((term[ok].sum(axis=1) / n_factors).sum())
            if want_grad:
                w_mat = np.where(
                    ok[:, None] & flows & (A[:, None] != 0.0),
                    inv_n * A[:, None] * rhos / n_factors,
                    0.0,
                )
                if include_decision:
                    w_dec = w_mat[:, 0]
                    w_steps = w_mat[:, 1:]
                    g_trig[qid][c] += w_dec.sum()
                    g_trig[qid] -= w_dec.sum() * pi_new
                else:
                    w_steps = w_mat
                if np.any(w_steps != 0.0):
                    gm = g_modes[qid][c]
                    np.add.at(gm, (np.broadcast_to(t_idx, (n, seq_len)), modes_mat), w_steps)
                    gm[:seq_len] -= w_steps.sum(axis=0)[:, None] * p_new[:seq_len]
        else:
            raise ValueError(f"unknown ratio_granularity {cfg.ratio_granularity!r}")
        n_bad = int(n - ok.sum())
        if n_bad:
            skipped += n_bad
            log.warning("skipping %d example(s) with non-finite ratio (query %s)", n_bad, qid)
        if add_ce:
            j_ce += inv_n * float(ok.sum()) * float(np.log(pi_new[c]))
            if want_grad:
                w_ce = inv_n * cfg.ce_weight * float(ok.sum())
                g_trig[qid][c] += w_ce
                g_trig[qid] -= w_ce * pi_new

    objective = j_clip + cfg.ce_weight * j_ce
    grad = Gradient(trigger=g_trig, modes=g_modes) if want_grad else None
    info = {
        "j_clip": j_clip,
        "j_ce": j_ce,
        "skipped": float(skipped),
        "objective_mean": objective / n_queries,
    }
    return objective, grad, info


def _clip_terms_vec(rho: np.ndarray, A, eps: float, clip_form: str) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized per-example objective terms and gradient-flow mask."""
    clipped = np.clip(rho, 1.0 - eps, 1.0 + eps)
    if clip_form == CLIP_PAPER:
        return clipped * A, ((1.0 - eps) < rho) & (rho < (1.0 + eps))
    if clip_form == CLIP_PPO_MIN:
        unclipped = rho * A
        return np.minimum(unclipped, clipped * A), unclipped <= clipped * A
    raise ValueError(f"unknown clip_form {clip_form!r}")


def _accumulate_trigger_score(grad, policy, qid, c, weight):
    p = policy.decision_prob(qid)
    gt = -weight * p
    gt[c] += weight
    grad.add_trigger(qid, gt)


# ---------------------------------------------------------------------------
# Train state and metrics
# ---------------------------------------------------------------------------

@dataclass
class TrainState:
    policy: PolicyParams
    ref_policy: PolicyParams
    iteration: int = 0
    interactions: int = 0
    metrics: list[dict[str, Any]] = field(default_factory=list)
    rng: np.random.Generator | None = None

    def __post_init__(self):
        if self.ref_policy.version > self.policy.version:
            raise ValueError("ref_policy version must not exceed policy version")


def metrics_row(
    iteration: int,
    phase: str,
    objective: float | None = None,
    elbo: float | None = None,
    j_mle: float | None = None,
    mean_invocation_rate: float | None = None,
    pass1_dev: float | None = None,
    wallclock_s: float = 0.0,
    interactions: int = 0,
) -> dict[str, Any]:
    return {
        "iteration": iteration,
        "phase": phase,
        "objective": objective,
        "elbo": elbo,
        "j_mle": j_mle,
        "mean_invocation_rate": mean_invocation_rate,
        "pass1_dev": pass1_dev,
        "wallclock_s": wallclock_s,
        "interactions": interactions,
    }


def write_metrics_csv(rows: Sequence[Mapping[str, Any]], path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as fh:
        fh.write(",".join(METRIC_COLUMNS) + "\n")
        for row in rows:
            cells = []
            for col in METRIC_COLUMNS:
                v = row.get(col)
                if v is None:
                    cells.append("")
                elif isinstance(v, float):
                    cells.append(repr(float(v)))
                else:
                    cells.append(str(v))
            fh.write(",".join(cells) + "\n")


def read_metrics_csv(path: str | Path) -> list[dict[str, Any]]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines:
        raise SchemaError(f"{path}: empty metrics file")
    header = lines[0].split(",")
    rows = []
    for line in lines[1:]:
        if not line.strip():
            continue
        cells = line.split(",")
        row: dict[str, Any] = {}
        for col, cell in zip(header, cells):
            if cell == "":
                row[col] = None
            elif col in ("iteration", "interactions"):
                row[col] = int(cell)
            elif col == "phase":
                row[col] = cell
            else:
                row[col] = float(cell)
        rows.append(row)
    return rows


def mean_invocation(policy: PolicyParams, query_ids: Sequence[str] | None = None) -> float:
    qids = sorted(query_ids) if query_ids is not None else sorted(policy.trigger)
    vals = [policy.decision_prob(qid)[1] for qid in qids]
    return float(np.mean(vals)) if vals else 0.0


def _exact_q_fast(spec: SynthQuerySpec, c: int, policy: PolicyParams) -> float:
    # factorized form of the enumeration value (tested equal)
    w = spec.step_success()
    probs = policy.mode_probs(spec.query_id, c)
    return float(np.prod(np.sum(probs * w, axis=1)))


def exact_pass1(policy: PolicyParams, specs: Sequence[SynthQuerySpec]) -> float:
    # cheap enough to evaluate every iteration as the dev metric
    total = 0.0
    for s in specs:
        pi = policy.decision_prob(s.query_id)
        total += pi[0] * _exact_q_fast(s, 0, policy) + pi[1] * _exact_q_fast(s, 1, policy)
    return total / len(specs)


def j_mle_exact(policy: PolicyParams, specs: Sequence[SynthQuerySpec]) -> float:
    """Sum over queries of log P(correct answer | query) under the policy."""
    total = 0.0
    for spec in specs:
        pi = policy.decision_prob(spec.query_id)
        p = pi[0] * exact_q(spec, 0, policy) + pi[1] * exact_q(spec, 1, policy)
        total += math.log(p) if p > 0 else -math.inf
    return total


# ---------------------------------------------------------------------------
# One off-policy update
# ---------------------------------------------------------------------------

def offpolicy_step(
    state: TrainState,
    dataset,
    adv: AdvantageBatch,
    cfg: Config,
    include_decision: bool = False,
    add_ce: bool = True,
    phase: str = "m-step",
    extra_metrics: Mapping[str, Any] | None = None,
) -> TrainState:
    """One full-batch gradient-ascent step on the clipped objective."""
    objective, grad, info = offpolicy_objective_and_grad(
        state.policy, state.ref_policy, dataset, adv, cfg, include_decision, add_ce
    )
    assert grad is not None
    new_policy = apply_update(state.policy, grad, cfg.learning_rate)
    row = metrics_row(
        iteration=state.iteration,
        phase=phase,
        objective=info["objective_mean"],
        interactions=state.interactions,
        **(dict(extra_metrics) if extra_metrics else {}),
    )
    row["skipped_examples"] = info["skipped"]
    state.metrics.append(row)
    state.policy = new_policy
    return state


# ---------------------------------------------------------------------------
# Exact mode
# ---------------------------------------------------------------------------

def exact_q_and_grad(spec: SynthQuerySpec, c: int, policy: PolicyParams) -> tuple[float, np.ndarray]:
    """Expected success rate of decision c and its gradient in the step
    logits, shape (T, 2). Uses the product structure of the environment:
    Q = prod_t (p_t . w_t), so dQ/dlogit follows from leave-one-out products."""
    w = spec.step_success()  # (T, 2)
    probs = policy.mode_probs(spec.query_id, c)  # (T, 2)
    e = np.sum(probs * w, axis=1)  # (T,)
    T = spec.T
    prefix = np.concatenate(([1.0], np.cumprod(e)[:-1]))
    suffix = np.concatenate((np.cumprod(e[::-1])[:-1][::-1], [1.0]))
    loo = prefix * suffix  # prod over tau != t
    q = float(np.prod(e))
    # d e_t / d logit_{t,j} = p_{t,j} (w_{t,j} - e_t)
    de = probs * (w - e[:, None])
    dq = loo[:, None] * de
    return q, dq


def exact_reference_strategy(
    policy: PolicyParams, specs: Sequence[SynthQuerySpec], alpha: float, variant: str
) -> ReferenceStrategy:
    from .env import exact_posterior

    entries: dict[str, RefEntry] = {}
    for spec in specs:
        single = exact_posterior(spec, policy, alpha, variant)
        entries[spec.query_id] = single.entries[spec.query_id]
    return ReferenceStrategy(entries=entries, variant=variant, alpha=alpha)


def exact_elbo(
    policy: PolicyParams,
    specs: Sequence[SynthQuerySpec],
    strategy: ReferenceStrategy,
    ce_weight: float = 1.0,
) -> float:
    """Mean over queries of E_s[Q] - CE(s || trigger): the M-step objective."""
    total = 0.0
    for spec in specs:
        s = np.array(strategy.probs(spec.query_id))
        q = np.array([exact_q(spec, 0, policy), exact_q(spec, 1, policy)])
        pi = policy.decision_prob(spec.query_id)
        total += float(np.dot(s, q)) + ce_weight * float(np.dot(s, np.log(pi)))
    return total / len(specs)


def exact_evidence_elbo(
    policy: PolicyParams, specs: Sequence[SynthQuerySpec], strategy: ReferenceStrategy
) -> float:
    """The evidence lower bound proper, summed over queries:
    E_s[log pi(c) + log Q(c) - log s(c)] <= log P(correct | query).
    The posterior E-step maximizes this over s (making it tight)."""
    total = 0.0
    for spec in specs:
        s = np.array(strategy.probs(spec.query_id))
        q = np.array([exact_q(spec, 0, policy), exact_q(spec, 1, policy)])
        pi = policy.decision_prob(spec.query_id)
        for c in (0, 1):
            if s[c] == 0.0:
                continue
            if q[c] == 0.0:
                return -math.inf
            total += s[c] * (math.log(pi[c]) + math.log(q[c]) - math.log(s[c]))
    return total


def exact_mstep(
    state: TrainState,
    specs: Sequence[SynthQuerySpec],
    strategy: ReferenceStrategy,
    n_inner: int,
    cfg: Config,
) -> TrainState:
    """Ascend the exact M-step objective by n_inner full-gradient steps.

    The objective value is recorded before and after in the metrics trace.
    """
    elbo_before = exact_elbo(state.policy, specs, strategy, cfg.ce_weight)
    for _ in range(n_inner):
        # per-query gradients are not averaged across the suite: parameters
        # are per-query and disjoint, so this is independent per-query ascent
        grad = Gradient()
        for spec in specs:
            s = np.array(strategy.probs(spec.query_id))
            pi = state.policy.decision_prob(spec.query_id)
            grad.add_trigger(spec.query_id, cfg.ce_weight * (s - pi))
            g_modes = np.zeros_like(state.policy.modes[spec.query_id])
            for c in (0, 1):
                _, dq = exact_q_and_grad(spec, c, state.policy)
                g_modes[c] = s[c] * dq
            grad.add_modes(spec.query_id, g_modes)
        state.policy = apply_update(state.policy, grad, cfg.learning_rate)
    elbo_after = exact_elbo(state.policy, specs, strategy, cfg.ce_weight)
    state.metrics.append(
        metrics_row(
            iteration=state.iteration,
            phase="exact-m",
            objective=elbo_after,
            elbo=elbo_before,
            j_mle=j_mle_exact(state.policy, specs),
            mean_invocation_rate=mean_invocation(state.policy, [s.query_id for s in specs]),
            pass1_dev=exact_pass1(state.policy, specs),
            interactions=state.interactions,
        )
    )
    return state


# ---------------------------------------------------------------------------
# EM training loop
# ---------------------------------------------------------------------------

def _specs_of(backend, queries: Sequence[Query] | None = None) -> list[SynthQuerySpec] | None:
    specs = getattr(backend, "specs", None)
    if specs is None:
        return None
    if queries is not None:
        return [specs[q.id] for q in sorted(queries, key=lambda q: q.id)]
    return [specs[qid] for qid in sorted(specs)]


def _init_policy_for(queries: Sequence[Query], backend, init_policy: PolicyParams | None) -> PolicyParams:
    if init_policy is not None:
        return init_policy
    specs = getattr(backend, "specs", None)
    if specs is None:
        raise ValueError("init_policy is required when the backend has no synthetic suite")
    return policy_mod.init_params({qid: specs[qid].T for qid in specs})


def em_train(
    cfg: Config,
    queries: Sequence[Query],
    backend,
    out_dir: str | Path | None = None,
    init_policy: PolicyParams | None = None,
    rollout_sink: Callable[[Trajectory], None] | None = None,
) -> TrainState:
    """Alternate reference-strategy curation (E) and clipped off-policy
    updates (M) for cfg.em_iterations rounds, emitting per-iteration
    artifacts under out_dir when given.

    With cfg.exact_mode the loop runs on exact quantities instead of samples
    (simulation backends only).
    """
    rng = np.random.default_rng(cfg.seed)
    pol = _init_policy_for(queries, backend, init_policy)
    state = TrainState(policy=pol, ref_policy=snapshot(pol), rng=rng)
    specs = _specs_of(backend, queries)
    qids = [q.id for q in queries]
    out = Path(out_dir) if out_dir is not None else None

    if cfg.exact_mode:
        if specs is None:
            raise ValueError("exact mode requires a simulation backend")
        for it in range(cfg.em_iterations):
            state.iteration = it
            t0 = time.perf_counter()
            strategy = exact_reference_strategy(state.policy, specs, cfg.alpha, cfg.exact_variant)
            state.ref_policy = snapshot(state.policy)
            state = exact_mstep(state, specs, strategy, cfg.n_inner, cfg)
            if cfg.record_wallclock:
                state.metrics[-1]["wallclock_s"] = time.perf_counter() - t0
            if out is not None:
                it_dir = out / f"iter{it:04d}"
                write_jsonl(reference_strategy_records(strategy), it_dir / "ref_strategy.jsonl")
                policy_mod.save_checkpoint(state.policy, it_dir / "checkpoint.jsonl", config_hash(cfg))
        if out is not None:
            write_metrics_csv(state.metrics, out / "metrics.csv")
        return state

    for it in range(cfg.em_iterations):
        state.iteration = it
        t0 = time.perf_counter()
        tag = f"em-it{it:04d}"
        it_dir = out / f"iter{it:04d}" if out is not None else None
        cur = curation_mod.curate(
            queries, state.policy, cfg, backend, rng,
            out_dir=it_dir, policy_tag=tag, rollout_sink=rollout_sink,
        )
        state.interactions += len(cur.rollouts)
        state.ref_policy = snapshot(state.policy)
        adv = advantages(cur.dataset, cfg.std_floor)
        mean_reward = float(np.mean([t.reward for t in cur.rollouts])) if cur.rollouts else 0.0
        state.metrics.append(
            metrics_row(
                iteration=it,
                phase="e-step",
                objective=mean_reward,
                mean_invocation_rate=mean_invocation(state.policy, qids),
                pass1_dev=exact_pass1(state.policy, specs) if specs else None,
                interactions=state.interactions,
            )
        )
        for _ in range(cfg.epochs):
            state = offpolicy_step(state, cur.dataset, adv, cfg, include_decision=False, add_ce=True)
        last = state.metrics[-1]
        last["mean_invocation_rate"] = mean_invocation(state.policy, qids)
        last["pass1_dev"] = exact_pass1(state.policy, specs) if specs else None
        if cfg.record_wallclock:
            last["wallclock_s"] = time.perf_counter() - t0
        if it_dir is not None:
            policy_mod.save_checkpoint(state.policy, it_dir / "checkpoint.jsonl", config_hash(cfg))
    if out is not None:
        write_metrics_csv(state.metrics, out / "metrics.csv")
    return state


# ---------------------------------------------------------------------------
# Demonstrations and baselines
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Demo:
    query_id: str
    c: int
    modes: tuple[int, ...]


def style_pure_demos(specs: Sequence[SynthQuerySpec], rng: np.random.Generator) -> list[Demo]:
    """One demonstration per query in a single style: all-reason solutions for
    c=0 demos, all-code for c=1, with the style assigned at random — the
    situation of training corpora whose solution style is unrelated to what
    actually works best for the solver."""
    demos = []
    for spec in specs:
        c = int(rng.random() < 0.5)
        demos.append(Demo(spec.query_id, c, tuple([c] * spec.T)))
    return demos


def oracle_demos(specs: Sequence[SynthQuerySpec]) -> list[Demo]:
    """Environment-optimal demonstrations (per-step best mode, matching c)."""
    return [
        Demo(s.query_id, oracle_optimal_decision(s), oracle_optimal_modes(s))
        for s in specs
    ]


def demos_from_policy(policy: PolicyParams, specs: Sequence[SynthQuerySpec]) -> list[Demo]:
    demos = []
    for spec in specs:
        c = int(np.argmax(policy.decision_prob(spec.query_id)))
        modes = tuple(int(m) for m in np.argmax(policy.mode_probs(spec.query_id, c), axis=1))
        demos.append(Demo(spec.query_id, c, modes))
    return demos


def imitation_objective_and_grad(
    policy: PolicyParams, demos: Sequence[Demo], want_grad: bool = True
) -> tuple[float, Gradient | None]:
    """Demonstration log-likelihood, per-query mean summed over queries
    (same normalization convention as the off-policy objective); the
    returned value is the per-query average for reporting."""
    per_query: dict[str, int] = {}
    for demo in demos:
        per_query[demo.query_id] = per_query.get(demo.query_id, 0) + 1
    grad = Gradient() if want_grad else None
    total = 0.0
    for demo in demos:
        w = 1.0 / per_query[demo.query_id]
        pi = policy.decision_prob(demo.query_id)
        probs = policy.mode_probs(demo.query_id, demo.c)
        t_idx = np.arange(len(demo.modes))
        total += w * (float(np.log(pi[demo.c])) + float(np.log(probs[t_idx, list(demo.modes)]).sum()))
        if want_grad:
            _accumulate_trigger_score(grad, policy, demo.query_id, demo.c, w)
            g = np.zeros_like(policy.modes[demo.query_id])
            for t, m in enumerate(demo.modes):
                g[demo.c, t, m] += w
                g[demo.c, t, :] -= probs[t] * w
            grad.add_modes(demo.query_id, g)
    return total / max(len(per_query), 1), grad


def baseline_train(
    kind: str,
    cfg: Config,
    queries: Sequence[Query],
    backend,
    out_dir: str | Path | None = None,
    init_policy: PolicyParams | None = None,
    demos: Sequence[Demo] | None = None,
    rollout_sink: Callable[[Trajectory], None] | None = None,
) -> TrainState:
    """Comparison paradigms sharing the EM metrics schema.

    onpolicy_rl: clipped policy gradient on self-generated rollouts with
        query-wise advantages; no reference strategy, no CE term.
    imitation:   maximum likelihood on a demonstration set.
    base_rl:     onpolicy_rl from a reasoning-favoring fresh initialization.
    """
    if kind not in BASELINE_KINDS:
        raise ValueError(f"unknown baseline kind {kind!r}")
    rng = np.random.default_rng(cfg.seed)
    specs = _specs_of(backend, queries)
    qids = [q.id for q in queries]
    out = Path(out_dir) if out_dir is not None else None

    if kind == KIND_BASE_RL and init_policy is None:
        specs_map = getattr(backend, "specs", None)
        if specs_map is None:
            raise ValueError("base_rl needs a simulation backend or explicit init_policy")
        init_policy = policy_mod.init_params(
            {qid: specs_map[qid].T for qid in specs_map}, kind=policy_mod.INIT_REASON_FAVORING
        )
    pol = _init_policy_for(queries, backend, init_policy)
    state = TrainState(policy=pol, ref_policy=snapshot(pol), rng=rng)

    if kind == KIND_IMITATION:
        if not demos:
            raise ValueError("imitation requires a demonstration set")
        for step in range(cfg.sft_steps):
            state.iteration = step
            objective, grad = imitation_objective_and_grad(state.policy, demos)
            assert grad is not None
            state.policy = apply_update(state.policy, grad, cfg.learning_rate)
            state.metrics.append(
                metrics_row(
                    iteration=step,
                    phase="sft",
                    objective=objective,
                    mean_invocation_rate=mean_invocation(state.policy, qids),
                    pass1_dev=exact_pass1(state.policy, specs) if specs else None,
                    interactions=0,
                )
            )
        state.ref_policy = snapshot(state.policy)
        if out is not None:
            policy_mod.save_checkpoint(state.policy, out / "checkpoint.jsonl", config_hash(cfg))
            write_metrics_csv(state.metrics, out / "metrics.csv")
        return state

    ordered = sorted(queries, key=lambda q: q.id)
    for it in range(cfg.baseline_iterations):
        state.iteration = it
        t0 = time.perf_counter()
        tag = f"{kind}-it{it:04d}"
        rollouts: list[Trajectory] = []
        for query in ordered:
            rollouts.extend(
                backend.rollout_batch(
                    query.id, 0, GUIDANCE_VANILLA, state.policy, cfg.K, rng, tag, sample_c=True
                )
            )
        if rollout_sink is not None:
            for traj in rollouts:
                rollout_sink(traj)
        state.interactions += len(rollouts)
        state.ref_policy = snapshot(state.policy)
        adv = advantages(rollouts, cfg.std_floor)
        for _ in range(cfg.epochs):
            state = offpolicy_step(
                state, rollouts, adv, cfg, include_decision=True, add_ce=False, phase="pg-step"
            )
        last = state.metrics[-1]
        last["mean_invocation_rate"] = mean_invocation(state.policy, qids)
        last["pass1_dev"] = exact_pass1(state.policy, specs) if specs else None
        if cfg.record_wallclock:
            last["wallclock_s"] = time.perf_counter() - t0
        if out is not None and (it + 1) == cfg.baseline_iterations:
            policy_mod.save_checkpoint(state.policy, out / "checkpoint.jsonl", config_hash(cfg))
    if out is not None:
        write_metrics_csv(state.metrics, out / "metrics.csv")
    return state
