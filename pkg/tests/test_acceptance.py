"""Acceptance suite: one test per criterion, each printing a PASS line with
its measured quantities. Experiment thresholds and budgets come from
configs/acceptance.toml (calibrated by scripts/pilot_calibration.py and
committed with seeds).

Everything here runs in simulation mode with the in-process stub endpoint;
the interpreter-worker package is not required.
"""

from __future__ import annotations

import math
import time
from pathlib import Path

import numpy as np
import pytest

from emtir import analysis, curation, env, llm_bridge, optim, policy as policy_mod, rollout
from emtir.core import (
    CLIP_PAPER,
    CLIP_PPO_MIN,
    Config,
    RATIO_PER_STEP,
    RATIO_SEQUENCE,
    VARIANT_APPENDIX,
    VARIANT_MAIN,
    parse_toml_subset,
    read_jsonl,
    validate_segments,
)
from emtir.curation import QEntry, QTable
from emtir.env import SynthQuerySpec, exact_posterior, exact_q
from tests.conftest import random_policy
from tests.test_optim import _fd_instance
from tests.test_policy import all_coords, grad_entry, perturb

ROOT = Path(__file__).resolve().parents[1]
CAL = parse_toml_subset((ROOT / "configs" / "acceptance.toml").read_text(encoding="utf-8"))

SEEDS = CAL["seeds.experiment_seeds"]


def report(name: str, detail: str) -> None:
    print(f"ACCEPTANCE {name}: PASS ({detail})")


def random_specs(rng: np.random.Generator, n: int, t_max: int = 8) -> list[SynthQuerySpec]:
    specs = []
    for i in range(n):
        T = int(rng.integers(1, t_max + 1))
        specs.append(
            SynthQuerySpec(
                query_id=f"q{i:05d}",
                T=T,
                p_reason=tuple(rng.uniform(0.05, 0.95, T).round(10)),
                p_code=tuple(rng.uniform(0.05, 0.95, T).round(10)),
                gap=float(rng.uniform(0.0, 0.3)),
            )
        )
    return specs


def imitation_init(specs, queries, backend, seed, sft_steps, sft_lr):
    """SFT analog: style-pure demos on top of a reasoning-leaning base."""
    rng = np.random.default_rng(10_000 + seed)
    demos = optim.style_pure_demos(specs, rng)
    base = policy_mod.init_params(
        {s.query_id: s.T for s in specs}, kind=policy_mod.INIT_REASON_FAVORING, trigger_bias=0.0
    )
    cfg = Config(seed=seed, sft_steps=sft_steps, learning_rate=sft_lr)
    state = optim.baseline_train(
        optim.KIND_IMITATION, cfg, queries, backend, init_policy=base, demos=demos
    )
    return state.policy


def experiment_config(seed: int, em_iterations: int) -> Config:
    return Config(
        seed=seed,
        K=CAL["training.K"],
        subsample_size=CAL["training.subsample_size"],
        alpha=CAL["training.alpha"],
        learning_rate=CAL["training.learning_rate"],
        clip_eps=CAL["training.clip_eps"],
        epochs=CAL["training.epochs"],
        em_iterations=em_iterations,
        baseline_iterations=2 * em_iterations,
    )


# ---------------------------------------------------------------------------
# A1 — E-step exactness
# ---------------------------------------------------------------------------

def test_a1_estep_exactness():
    t0 = time.perf_counter()
    rng = np.random.default_rng(7)
    specs = random_specs(rng, CAL["suites.a1_n_queries"], t_max=8)
    params = random_policy(specs, rng, scale=1.2)
    worst = 0.0
    for variant in (VARIANT_MAIN, VARIANT_APPENDIX):
        for alpha in (0.0, 1.0, 4.0, 100.0):
            qtable = QTable(
                {(s.query_id, c): QEntry(exact_q(s, c, params), 1) for s in specs for c in (0, 1)}
            )
            ref = curation.reference_strategy(params, qtable, alpha, variant)
            for s in specs:
                oracle = exact_posterior(s, params, alpha, variant)
                for got, want in zip(ref.probs(s.query_id), oracle.probs(s.query_id)):
                    worst = max(worst, abs(got - want))
    elapsed = time.perf_counter() - t0
    assert worst <= 1e-12
    assert elapsed < 5.0
    report("A1", f"max abs err {worst:.2e} over 100 queries x 2 variants x 4 alphas, {elapsed:.2f}s")


# ---------------------------------------------------------------------------
# A2 — Monte-Carlo consistency
# ---------------------------------------------------------------------------

def _a2_count_within(K: int, specs, queries, params, seed: int) -> int:
    backend = rollout.SimulationBackend(specs, queries, code_bias=0.0)
    rng = np.random.default_rng(seed)
    ok = 0
    for spec in specs:
        result = rollout.probe(rollout.ProbePlan(spec.query_id, K=K), params, backend, rng)
        qtable = curation.estimate_q(result.trajectories)
        good = True
        for c in (0, 1):
            q = exact_q(spec, c, params)
            bound = 4.0 * math.sqrt(q * (1.0 - q) / K + 1e-6)
            if abs(qtable.get(spec.query_id, c).q_hat - q) > bound:
                good = False
        ok += good
    return ok


def test_a2_monte_carlo_consistency():
    rng = np.random.default_rng(CAL["suites.a2_suite_seed"])
    specs = random_specs(rng, CAL["suites.a2_n_queries"], t_max=6)
    queries = env.suite_queries(specs)
    params = random_policy(specs, rng)
    ok_1024 = _a2_count_within(1024, specs, queries, params, seed=1)
    ok_8 = _a2_count_within(8, specs, queries, params, seed=2)
    assert ok_1024 >= 99
    assert ok_8 >= 95
    report("A2", f"within 4-sigma bound: {ok_1024}/100 at K=1024, {ok_8}/100 at K=8")


# ---------------------------------------------------------------------------
# A3 — EM monotonicity (exact mode)
# ---------------------------------------------------------------------------

def test_a3_em_monotonicity_exact_mode():
    t0 = time.perf_counter()
    n_suites = CAL["suites.a3_n_suites"]
    worst_dip = 0.0
    for s in range(n_suites):
        specs = env.generate_suite(200 + s, CAL["suites.a3_suite_size"], "balanced")
        queries = env.suite_queries(specs)
        backend = rollout.SimulationBackend(specs, queries)
        cfg = Config(
            seed=s, exact_mode=True, em_iterations=CAL["suites.a3_iterations"],
            n_inner=2, learning_rate=0.1,
        )
        state = optim.em_train(cfg, queries, backend)
        jm = [row["j_mle"] for row in state.metrics if row["j_mle"] is not None]
        assert len(jm) == CAL["suites.a3_iterations"]
        for a, b in zip(jm, jm[1:]):
            worst_dip = max(worst_dip, a - b)
            assert b >= a - 1e-9
    elapsed = time.perf_counter() - t0
    assert elapsed < 60.0
    report("A3", f"{n_suites} suites x 50 iterations, worst step dip {worst_dip:.2e}, {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# A4 — Gradient fidelity
# ---------------------------------------------------------------------------

def test_a4_gradient_fidelity():
    combos = [
        (clip, gran)
        for clip in (CLIP_PAPER, CLIP_PPO_MIN)
        for gran in (RATIO_SEQUENCE, RATIO_PER_STEP)
    ]
    instances = 0
    worst = 0.0
    seed = 500
    h = 1e-6
    while instances < 20:
        clip_form, granularity = combos[instances % len(combos)]
        cfg = Config(clip_form=clip_form, ratio_granularity=granularity, clip_eps=0.2)
        seed += 1
        inst = _fd_instance(seed, cfg, include_decision=False)
        if inst is None:
            continue
        params, ref, trajs, adv = inst
        _, grad, _ = optim.offpolicy_objective_and_grad(
            params, ref, trajs, adv, cfg, include_decision=False, add_ce=True
        )
        for coord in all_coords(params):
            kind, qid, idx = coord
            jp, _, _ = optim.offpolicy_objective_and_grad(
                perturb(params, kind, qid, idx, h), ref, trajs, adv, cfg,
                include_decision=False, add_ce=True, want_grad=False,
            )
            jm, _, _ = optim.offpolicy_objective_and_grad(
                perturb(params, kind, qid, idx, -h), ref, trajs, adv, cfg,
                include_decision=False, add_ce=True, want_grad=False,
            )
            fd = (jp - jm) / (2 * h)
            an = grad_entry(grad, kind, qid, idx)
            rel = abs(an - fd) / max(1.0, abs(fd), abs(an))
            worst = max(worst, rel)
            assert rel <= 1e-5, (clip_form, granularity, coord, an, fd)
        instances += 1
    report("A4", f"20 instances across 4 clip/granularity combos, worst rel err {worst:.2e}")


# ---------------------------------------------------------------------------
# A5 — Advantage contract
# ---------------------------------------------------------------------------

def test_a5_advantage_contract():
    rng = np.random.default_rng(11)
    pairs = []
    for q in range(50):
        size = int(rng.integers(1, 9))
        for _ in range(size):
            pairs.append((f"q{q:03d}", float(rng.integers(0, 2))))
    batch = optim.advantages_from_pairs(pairs)
    by_q: dict[str, list[float]] = {}
    for (qid, _), a in zip(pairs, batch.values):
        by_q.setdefault(qid, []).append(a)
    worst_mean = max(abs(np.mean(v)) for v in by_q.values())
    assert worst_mean <= 1e-12
    # zero-variance groups are all zero
    flat = optim.advantages_from_pairs([("z", 1.0)] * 6)
    assert np.all(flat.values == 0.0)
    # adding a constant to a group's rewards leaves A unchanged
    shifted = optim.advantages_from_pairs([(q, r + 7.25) for q, r in pairs])
    worst_shift = float(np.max(np.abs(batch.values - shifted.values)))
    assert worst_shift <= 1e-12
    report("A5", f"worst |group mean| {worst_mean:.2e}, worst shift delta {worst_shift:.2e}")


# ---------------------------------------------------------------------------
# A6 — Training-efficiency finding (Fig. 5 analog)
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def a6_results():
    t0 = time.perf_counter()
    specs = env.generate_suite(CAL["suites.a6_suite_seed"], CAL["suites.a6_n_queries"], "balanced")
    queries = env.suite_queries(specs)
    backend = rollout.SimulationBackend(specs, queries)
    oracle = float(np.mean([env.oracle_optimal_reward(s) for s in specs]))
    qids = [q.id for q in queries]
    rows = []
    for seed in SEEDS:
        init = imitation_init(specs, queries, backend, seed, CAL["sft.a6_steps"], CAL["sft.a6_lr"])
        cfg = experiment_config(seed, CAL["training.a6_em_iterations"])
        em = optim.em_train(cfg, queries, backend, init_policy=init)
        rl = optim.baseline_train(optim.KIND_ONPOLICY, cfg, queries, backend, init_policy=init)
        base = optim.baseline_train(optim.KIND_BASE_RL, cfg, queries, backend)
        assert em.interactions == rl.interactions == base.interactions
        rows.append(
            {
                "seed": seed,
                "em": optim.exact_pass1(em.policy, specs) / oracle,
                "rl": optim.exact_pass1(rl.policy, specs) / oracle,
                "base_inv": optim.mean_invocation(base.policy, qids),
                "budget": em.interactions,
            }
        )
    return {"rows": rows, "elapsed": time.perf_counter() - t0}


def test_a6_training_efficiency(a6_results):
    rows = a6_results["rows"]
    em = np.array([r["em"] for r in rows])
    rl = np.array([r["rl"] for r in rows])
    inv = np.array([r["base_inv"] for r in rows])
    wins = int(np.sum(em > rl))
    assert em.mean() >= CAL["thresholds.em_oracle_fraction"], em
    assert wins >= CAL["thresholds.sign_test_min_wins"], (em, rl)
    assert np.max(inv) < CAL["thresholds.base_rl_invocation_max"], inv
    assert a6_results["elapsed"] < 1800.0
    report(
        "A6",
        f"em mean {em.mean():.4f} of oracle (min {em.min():.4f}), rl mean {rl.mean():.4f}, "
        f"sign-test wins {wins}/10, base invocation max {np.max(inv):.4f}, "
        f"budget {rows[0]['budget']}, {a6_results['elapsed']:.0f}s",
    )


# ---------------------------------------------------------------------------
# A7 — Exploration-collapse finding (Fig. 6 analog)
# ---------------------------------------------------------------------------

def test_a7_exploration_collapse():
    specs = env.generate_suite(CAL["suites.a7_suite_seed"], CAL["suites.a7_n_queries"], "balanced")
    queries = env.suite_queries(specs)
    backend = rollout.SimulationBackend(specs, queries)
    monotone = 0
    em_lower = 0
    for seed in SEEDS:
        init = imitation_init(specs, queries, backend, seed, CAL["sft.a7_steps"], CAL["sft.a7_lr"])
        cfg = experiment_config(seed, CAL["training.a7_em_iterations"])
        em_log: list = []
        rl_log: list = []
        optim.em_train(cfg, queries, backend, init_policy=init, rollout_sink=em_log.append)
        optim.baseline_train(
            optim.KIND_ONPOLICY, cfg, queries, backend, init_policy=init, rollout_sink=rl_log.append
        )
        b_em = analysis.invocation_histogram(em_log)
        b_rl = analysis.invocation_histogram(rl_log)
        monotone += b_rl.extremity[0] <= b_rl.extremity[1] <= b_rl.extremity[2]
        em_lower += b_em.extremity[2] < b_rl.extremity[2]
    assert monotone >= CAL["thresholds.a7_min_monotone_seeds"]
    assert em_lower >= CAL["thresholds.a7_min_lower_seeds"]
    report("A7", f"onpolicy extremity monotone in {monotone}/10 seeds, em final lower in {em_lower}/10")


# ---------------------------------------------------------------------------
# A8 — Selection-accuracy finding (Fig. 7 analog)
# ---------------------------------------------------------------------------

def test_a8_selection_accuracy():
    specs = env.generate_suite(CAL["suites.a8_suite_seed"], CAL["suites.a8_n_queries"], "balanced")
    queries = env.suite_queries(specs)
    backend = rollout.SimulationBackend(specs, queries)
    em_sel, rl_sel, syn = [], [], []
    for seed in SEEDS:
        init = imitation_init(specs, queries, backend, seed, CAL["sft.a8_steps"], CAL["sft.a8_lr"])
        cfg = experiment_config(seed, CAL["training.a8_em_iterations"])
        em = optim.em_train(cfg, queries, backend, init_policy=init)
        rl = optim.baseline_train(optim.KIND_ONPOLICY, cfg, queries, backend, init_policy=init)
        rng = np.random.default_rng(50_000 + seed)
        rep_em = analysis.selection_report(
            analysis.evaluate_arms(em.policy, backend, queries, CAL["thresholds.eval_samples"], rng)
        )
        rep_rl = analysis.selection_report(
            analysis.evaluate_arms(rl.policy, backend, queries, CAL["thresholds.eval_samples"], rng)
        )
        em_sel.append(rep_em["selection_accuracy"])
        rl_sel.append(rep_rl["selection_accuracy"])
        syn.append(rep_em["auto_acc"] - max(rep_em["cot_acc"], rep_em["code_acc"]))
    em_mean, rl_mean = float(np.mean(em_sel)), float(np.mean(rl_sel))
    assert em_mean >= CAL["thresholds.a8_em_selection_min"], em_sel
    assert CAL["thresholds.a8_rl_selection_low"] <= rl_mean <= CAL["thresholds.a8_rl_selection_high"], rl_sel
    assert float(np.mean(syn)) > 0.0, syn
    report(
        "A8",
        f"em selection {em_mean:.3f} (min {np.min(em_sel):.3f}), rl {rl_mean:.3f}, "
        f"auto-over-forced synergy {np.mean(syn):+.3f}",
    )


# ---------------------------------------------------------------------------
# A9 — Determinism & round-trip
# ---------------------------------------------------------------------------

def test_a9_determinism_and_roundtrip(tmp_path):
    specs = env.generate_suite(30, 12, "balanced")
    queries = env.suite_queries(specs)
    backend = rollout.SimulationBackend(specs, queries)
    cfg = Config(seed=3, em_iterations=3, K=4, subsample_size=2)
    dirs = [tmp_path / "run1", tmp_path / "run2"]
    for d in dirs:
        optim.em_train(cfg, queries, backend, out_dir=d)
    compared = 0
    for rel in sorted(p.relative_to(dirs[0]) for p in dirs[0].rglob("*") if p.is_file()):
        b1 = (dirs[0] / rel).read_bytes()
        b2 = (dirs[1] / rel).read_bytes()
        assert b1 == b2, f"artifact differs: {rel}"
        compared += 1
    assert compared >= 3 * 4 + 1  # 4 sidecars per iteration plus metrics.csv

    # JSONL schema round-trips on the produced artifacts
    it_dir = dirs[0] / "iter0002"
    ds = curation.read_curated(it_dir / "curated.jsonl")
    back = tmp_path / "rt.jsonl"
    curation.write_curated(ds, back)
    assert back.read_bytes() == (it_dir / "curated.jsonl").read_bytes()
    params, header = policy_mod.load_checkpoint(it_dir / "checkpoint.jsonl")
    re_ckpt = tmp_path / "ckpt.jsonl"
    policy_mod.save_checkpoint(params, re_ckpt, header["config_hash"])
    assert re_ckpt.read_bytes() == (it_dir / "checkpoint.jsonl").read_bytes()
    suite_path = tmp_path / "suite.jsonl"
    env.write_suite(specs, suite_path)
    assert env.read_suite(suite_path) == specs
    report("A9", f"{compared} artifacts byte-identical across two seeded runs; schemas round-trip")


# ---------------------------------------------------------------------------
# A10 — LLM-mode dry run against the in-process stub endpoint
# ---------------------------------------------------------------------------

def _scripted_transport(round_targets: dict[str, int], golds: dict[str, str]):
    def script(payload):
        text = "\n".join(m["content"] for m in payload["messages"])
        qid = next((q for q in round_targets if q in text), None)
        assert qid is not None, "prompt does not mention a known query"
        if "without writing code" in text:
            return f"Direct reasoning.\n\\boxed{{{golds[qid]}}}"
        done_rounds = text.count("```output:")
        if done_rounds < round_targets[qid]:
            return f"Round {done_rounds + 1}.\n```python\ncompute({done_rounds + 1})\n```"
        return f"All computed.\n\\boxed{{{golds[qid]}}}"

    return llm_bridge.ScriptedTransport(script)


def test_a10_llm_dry_run(tmp_path):
    round_targets = {"qa": 0, "qb": 1, "qc": 2, "qd": 3}
    from emtir.core import Query

    queries = [Query(qid, f"problem {qid}: add things", str(10 + i)) for i, qid in enumerate(round_targets)]
    golds = {q.id: q.gold_answer for q in queries}
    endpoint = llm_bridge.EndpointConfig(
        base_url="http://stub", model="stub", max_retries=0, backoff_base_s=0.0
    )
    transport = _scripted_transport(round_targets, golds)
    from emtir.executor import CallableExecutor, ExecOutcome

    executor = CallableExecutor(lambda code: ExecOutcome("result: 4", "ok"))
    backend = rollout.LLMBackend(endpoint, queries, executor, transport=transport, max_rounds=3)

    K = 2
    params = policy_mod.init_params({q.id: 2 for q in queries})
    trajs = []
    for q in queries:
        result = rollout.probe(rollout.ProbePlan(q.id, K=K), params, backend, np.random.default_rng(0))
        assert not result.incomplete
        trajs.extend(result.trajectories)
    for t in trajs:
        validate_segments(t.segments)
        assert t.reward == 1  # scripts answer the gold
    dist = analysis.round_distribution(trajs)
    expected = {0: 4 * K + K, 1: K, 2: K, 3: K}  # cot arms all answer directly
    assert dist == expected

    qtable = curation.estimate_q(trajs)
    strategy = curation.reference_strategy(params, qtable, alpha=4.0, variant=VARIANT_MAIN)
    dataset = curation.subsample(trajs, strategy, M=2, rng=np.random.default_rng(1), provenance={"seed": 0})
    export_path = tmp_path / "training_data.jsonl"
    llm_bridge.export_training_data(dataset, {q.id: q for q in queries}, export_path)
    n_records = llm_bridge.validate_export_file(export_path)
    assert n_records == len(dataset.examples) == 2 * len(queries)

    burst_cfg = llm_bridge.EndpointConfig(
        base_url="http://stub", model="stub", max_parallel=8, backoff_base_s=0.0
    )
    burst = llm_bridge.ScriptedTransport(["ok"] * 64, delay_s=0.005)
    results = llm_bridge.batch_generate(burst_cfg, ["p"] * 64, transport=burst)
    assert all(not isinstance(r, Exception) for r in results)
    assert burst.max_inflight <= burst_cfg.max_parallel
    report(
        "A10",
        f"rounds {dist} match the script, {n_records} exported records schema-valid, "
        f"burst max in-flight {burst.max_inflight} <= {burst_cfg.max_parallel}",
    )
