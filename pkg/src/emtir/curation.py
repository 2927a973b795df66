"""The E-step: Monte-Carlo Q estimates, the reference strategy over trigger
decisions, and importance subsampling of the candidate rollouts into the
off-policy training set.

The reference strategy is an energy distribution over c built from the
trigger prior and the per-decision success estimates; subsampling then draws
training examples per query by first drawing c from the strategy and then a
trajectory uniformly from that arm (with replacement), so selection frequency
carries the weighting and every stored weight is 1.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

from . import policy as policy_mod, rollout as rollout_mod
from .core import (
    Config,
    Query,
    RefEntry,
    ReferenceStrategy,
    SchemaError,
    Trajectory,
    config_hash,
    read_jsonl,
    reference_strategy_records,
    trajectory_from_record,
    trajectory_to_record,
    write_jsonl,
)
log = logging.getLogger(__name__)


@dataclass(frozen=True)
class QEntry:
    q_hat: float
    n: int

    def __post_init__(self):
        if self.n < 0:
            raise ValueError("n must be >= 0")
        if self.n > 0 and not (0.0 <= self.q_hat <= 1.0):
            raise ValueError("q_hat must be in [0,1]")


@dataclass(frozen=True)
class QTable:
    entries: Mapping[tuple[str, int], QEntry]

    def get(self, query_id: str, c: int) -> QEntry:
        return self.entries.get((query_id, c), QEntry(0.0, 0))

    def query_ids(self) -> list[str]:
        return sorted({qid for qid, _ in self.entries})

    def missing_pairs(self) -> list[tuple[str, int]]:
        out = []
        for qid in self.query_ids():
            for c in (0, 1):
                if self.get(qid, c).n == 0:
                    out.append((qid, c))
        return out


def estimate_q(rollouts: Iterable[Trajectory]) -> QTable:
    """Per (query, c) mean reward across graded rollouts."""
    sums: dict[tuple[str, int], float] = {}
    counts: dict[tuple[str, int], int] = {}
    for traj in rollouts:
        key = (traj.query_id, traj.decision.c)
        sums[key] = sums.get(key, 0.0) + traj.reward
        counts[key] = counts.get(key, 0) + 1
    entries = {key: QEntry(sums[key] / counts[key], counts[key]) for key in sums}
    return QTable(entries)


def _log_energies(pi: np.ndarray, q: np.ndarray, alpha: float, variant: str) -> np.ndarray:
    from .core import VARIANT_APPENDIX, VARIANT_MAIN, VARIANT_POSTERIOR

    if variant == VARIANT_MAIN:
        return alpha * pi * q
    if variant == VARIANT_APPENDIX:
        return np.log(pi) + alpha * pi * q
    if variant == VARIANT_POSTERIOR:
        if float(np.dot(pi, q)) <= 0.0:
            return np.log(pi)
        with np.errstate(divide="ignore"):
            return np.log(pi) + np.log(q)
    raise ValueError(f"unknown strategy variant {variant!r}")


def reference_strategy(
    policy: policy_mod.PolicyParams,
    qtable: QTable,
    alpha: float,
    variant: str,
) -> ReferenceStrategy:
    """Energy-form strategy over c per query, computed in log space.

    Queries missing either arm's estimate are excluded and flagged. Queries
    whose rollouts all failed are kept: with both Q at zero the formula falls
    back to the prior (appendix variant) or uniform (main variant).
    """
    entries: dict[str, RefEntry] = {}
    flagged: list[str] = []
    for qid in qtable.query_ids():
        e0, e1 = qtable.get(qid, 0), qtable.get(qid, 1)
        if e0.n == 0 or e1.n == 0:
            flagged.append(qid)
            continue
        pi = policy.decision_prob(qid)
        if not np.all(np.isfinite(pi)):
            raise SchemaError(f"non-finite trigger distribution for {qid!r}")
        energies = _log_energies(pi, np.array([e0.q_hat, e1.q_hat]), alpha, variant)
        m = float(np.max(energies))
        log_z = m + math.log(float(np.sum(np.exp(energies - m))))
        s = np.exp(energies - log_z)
        entries[qid] = RefEntry(float(s[0]), float(s[1]), log_z)
    return ReferenceStrategy(entries=entries, variant=variant, alpha=alpha, flagged=tuple(flagged))


# ---------------------------------------------------------------------------
# Subsampling
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CuratedExample:
    query_id: str
    c: int
    trajectory: Trajectory
    weight: float
    s_snapshot: tuple[float, float]
    policy_tag: str
    source_index: int

    def __post_init__(self):
        if self.weight < 0:
            raise ValueError("weight must be >= 0")


@dataclass
class CuratedDataset:
    examples: list[CuratedExample]
    provenance: dict[str, Any] = field(default_factory=dict)
    flagged: tuple[str, ...] = ()

    def rewards_by_query(self) -> dict[str, list[int]]:
        out: dict[str, list[int]] = {}
        for ex in self.examples:
            out.setdefault(ex.query_id, []).append(ex.trajectory.reward)
        return out


def subsample(
    rollouts: Sequence[Trajectory],
    ref: ReferenceStrategy,
    M: int,
    rng: np.random.Generator,
    provenance: Mapping[str, Any] | None = None,
) -> CuratedDataset:
    """Draw M training examples per query: c from the reference strategy, then
    a trajectory uniformly (with replacement) from that query's c arm.

    An empty arm holding positive strategy mass falls back to the other arm
    and flags the query; it is never silently dropped.
    """
    if M < 1:
        raise ValueError("M must be >= 1")
    arms: dict[str, dict[int, list[int]]] = {}
    for i, traj in enumerate(rollouts):
        arms.setdefault(traj.query_id, {0: [], 1: []})[traj.decision.c].append(i)
    examples: list[CuratedExample] = []
    flagged: list[str] = []
    for qid in sorted(ref.entries):
        if qid not in arms:
            flagged.append(qid)
            continue
        s0, s1 = ref.probs(qid)
        draws = rng.random(M)
        for d in draws:
            c = int(d < s1)
            pool = arms[qid][c]
            if not pool:
                if qid not in flagged:
                    flagged.append(qid)
                c = 1 - c
                pool = arms[qid][c]
                if not pool:
                    raise SchemaError(f"query {qid!r} has no rollouts in either arm")
            idx = pool[int(rng.integers(len(pool)))]
            traj = rollouts[idx]
            examples.append(
                CuratedExample(
                    query_id=qid,
                    c=c,
                    trajectory=traj,
                    weight=1.0,
                    s_snapshot=(s0, s1),
                    policy_tag=traj.policy_tag,
                    source_index=idx,
                )
            )
    return CuratedDataset(examples=examples, provenance=dict(provenance or {}), flagged=tuple(flagged))


# ---------------------------------------------------------------------------
# Full E-step
# ---------------------------------------------------------------------------

@dataclass
class CurationResult:
    dataset: CuratedDataset
    qtable: QTable
    strategy: ReferenceStrategy
    rollouts: list[Trajectory]
    incomplete: list[tuple[str, int, str]]


def curate(
    queries: Sequence[Query],
    policy: policy_mod.PolicyParams,
    cfg: Config,
    backend,
    rng: np.random.Generator,
    out_dir: str | Path | None = None,
    policy_tag: str | None = None,
    rollout_sink=None,
) -> CurationResult:
    """probe -> estimate_q -> reference_strategy -> subsample, with provenance.

    When out_dir is given, the q table, reference strategy, and curated set
    are emitted as JSONL sidecars for analysis.
    """
    tag = policy_tag or policy.tag
    all_rollouts: list[Trajectory] = []
    incomplete: list[tuple[str, int, str]] = []
    for query in sorted(queries, key=lambda q: q.id):
        plan = rollout_mod.ProbePlan(query_id=query.id, K=cfg.K)
        result = rollout_mod.probe(plan, policy, backend, rng, policy_tag=tag)
        trajs = result.trajectories
        if cfg.branch_k > 0:
            sources = [t for t in trajs if len(t.segments) > 2]
            n_branch = min(cfg.branch_cap, len(sources))
            for b in range(n_branch):
                src = sources[int(rng.integers(len(sources)))]
                points = rollout_mod.candidate_branch_points(src)
                if not points:
                    continue
                t_at = points[int(rng.integers(len(points)))]
                trajs.extend(
                    rollout_mod.branch_rollouts(src, t_at, policy, backend, cfg.branch_k, rng, policy_tag=tag)
                )
        all_rollouts.extend(trajs)
        incomplete.extend(result.incomplete)
    if rollout_sink is not None:
        for traj in all_rollouts:
            rollout_sink(traj)
    qtable = estimate_q(all_rollouts)
    strategy = reference_strategy(policy, qtable, cfg.alpha, cfg.strategy_variant)
    provenance = {
        "config_hash": config_hash(cfg),
        "seed": cfg.seed,
        "policy_tag": tag,
        "source_rollouts": None,
        "n_rollouts": len(all_rollouts),
    }
    dataset = subsample(all_rollouts, strategy, cfg.subsample_size, rng, provenance)
    if incomplete:
        log.warning("%d incomplete probe arms", len(incomplete))
    if out_dir is not None:
        out = Path(out_dir)
        write_qtable(qtable, out / "qtable.jsonl")
        write_jsonl(reference_strategy_records(strategy), out / "ref_strategy.jsonl")
        write_curated(dataset, out / "curated.jsonl")
    return CurationResult(dataset, qtable, strategy, all_rollouts, incomplete)


# ---------------------------------------------------------------------------
# IO
# ---------------------------------------------------------------------------

def write_qtable(qtable: QTable, path: str | Path) -> None:
    rows = []
    for (qid, c) in sorted(qtable.entries):
        e = qtable.entries[(qid, c)]
        rows.append({"query_id": qid, "c": c, "q_hat": e.q_hat, "n": e.n})
    write_jsonl(rows, path)


def read_qtable(path: str | Path) -> QTable:
    entries = {}
    for rec in read_jsonl(path):
        entries[(rec["query_id"], rec["c"])] = QEntry(rec["q_hat"], rec["n"])
    return QTable(entries)


def write_curated(dataset: CuratedDataset, path: str | Path) -> None:
    rows: list[dict[str, Any]] = [
        {"provenance": dataset.provenance, "flagged": list(dataset.flagged)}
    ]
    for ex in dataset.examples:
        rows.append(
            {
                "query_id": ex.query_id,
                "c": ex.c,
                "trajectory": trajectory_to_record(ex.trajectory),
                "weight": ex.weight,
                "s_snapshot": list(ex.s_snapshot),
                "policy_tag": ex.policy_tag,
                "source_index": ex.source_index,
            }
        )
    write_jsonl(rows, path)


def read_curated(path: str | Path) -> CuratedDataset:
    rows = read_jsonl(path)
    if not rows or "provenance" not in rows[0]:
        raise SchemaError(f"{path}: missing provenance header")
    examples = []
    for rec in rows[1:]:
        examples.append(
            CuratedExample(
                query_id=rec["query_id"],
                c=rec["c"],
                trajectory=trajectory_from_record(rec["trajectory"]),
                weight=rec["weight"],
                s_snapshot=(rec["s_snapshot"][0], rec["s_snapshot"][1]),
                policy_tag=rec["policy_tag"],
                source_index=rec["source_index"],
            )
        )
    return CuratedDataset(examples=examples, provenance=rows[0]["provenance"], flagged=tuple(rows[0].get("flagged", ())))
