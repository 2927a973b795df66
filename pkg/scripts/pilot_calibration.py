"""Pilot calibration for the acceptance experiments.

Runs the training-efficiency, exploration-collapse, and selection-accuracy
protocols across seeds and prints per-seed statistics. The numbers chosen
from these runs (budgets, learning rates, alpha, SFT strengths) are
committed in configs/acceptance.toml; re-running this script reproduces the
evidence behind them.

Usage: python scripts/pilot_calibration.py [a6|a7|a8|all] [--seeds N]
"""

from __future__ import annotations

import argparse
import sys
import time
from dataclasses import replace

import numpy as np

from emtir import analysis, env, optim, policy as policy_mod, rollout
from emtir.core import Config


def suite_backend(seed, n, code_bias=2.5):
    specs = env.generate_suite(seed, n, "balanced")
    queries = env.suite_queries(specs)
    return specs, queries, rollout.SimulationBackend(specs, queries, code_bias=code_bias)


def imitation_init(specs, queries, backend, seed, sft_steps, lr):
    # SFT starts from a base policy that leans to reasoning in both branches
    # (uniform trigger): the non-demonstrated branch stays weak at code until
    # something trains it, which is what makes exploration genuinely hard
    rng = np.random.default_rng(10_000 + seed)
    demos = optim.style_pure_demos(specs, rng)
    base = policy_mod.init_params(
        {s.query_id: s.T for s in specs}, kind=policy_mod.INIT_REASON_FAVORING, trigger_bias=0.0
    )
    cfg = Config(seed=seed, sft_steps=sft_steps, learning_rate=lr)
    state = optim.baseline_train(
        optim.KIND_IMITATION, cfg, queries, backend, init_policy=base, demos=demos
    )
    return state.policy, demos


def run_a6(seeds, em_iters, suite_seed=61, n_queries=200, alpha=12.0, lr=0.2, eps=0.3,
           M=8, sft_steps=200, sft_lr=2.0):
    specs, queries, backend = suite_backend(suite_seed, n_queries)
    oracle = float(np.mean([env.oracle_optimal_reward(s) for s in specs]))
    qids = [q.id for q in queries]
    rows = []
    for seed in seeds:
        t0 = time.time()
        init, _ = imitation_init(specs, queries, backend, seed, sft_steps, sft_lr)
        base_cfg = Config(seed=seed, K=8, subsample_size=M, alpha=alpha, learning_rate=lr,
                          clip_eps=eps, em_iterations=em_iters, baseline_iterations=2 * em_iters)
        em = optim.em_train(base_cfg, queries, backend, init_policy=init)
        rl = optim.baseline_train(optim.KIND_ONPOLICY, base_cfg, queries, backend, init_policy=init)
        base = optim.baseline_train(optim.KIND_BASE_RL, base_cfg, queries, backend)
        em_r = optim.exact_pass1(em.policy, specs) / oracle
        rl_r = optim.exact_pass1(rl.policy, specs) / oracle
        base_inv = optim.mean_invocation(base.policy, qids)
        assert em.interactions == rl.interactions == base.interactions
        rows.append((seed, em_r, rl_r, base_inv, time.time() - t0))
        print(f"  seed {seed}: em={em_r:.4f} rl={rl_r:.4f} base_inv={base_inv:.4f} ({rows[-1][4]:.0f}s)")
    em_rs = np.array([r[1] for r in rows])
    rl_rs = np.array([r[2] for r in rows])
    invs = np.array([r[3] for r in rows])
    wins = int(np.sum(em_rs > rl_rs))
    print(f"A6: em mean={em_rs.mean():.4f} min={em_rs.min():.4f} | rl mean={rl_rs.mean():.4f} "
          f"| wins={wins}/{len(seeds)} | base_inv max={invs.max():.4f} | budget={2 * em_iters * 8 * n_queries}")
    return rows


def run_a7(seeds, em_iters=30, suite_seed=62, n_queries=60, sft_steps=10, sft_lr=0.2):
    specs, queries, backend = suite_backend(suite_seed, n_queries)
    mono = 0
    lower = 0
    for seed in seeds:
        init, _ = imitation_init(specs, queries, backend, seed, sft_steps, sft_lr)
        cfg = Config(seed=seed, K=8, subsample_size=8, alpha=12.0, learning_rate=0.2,
                     clip_eps=0.3, em_iterations=em_iters, baseline_iterations=2 * em_iters)
        em_log, rl_log = [], []
        optim.em_train(cfg, queries, backend, init_policy=init, rollout_sink=em_log.append)
        optim.baseline_train(optim.KIND_ONPOLICY, cfg, queries, backend, init_policy=init,
                             rollout_sink=rl_log.append)
        b_em = analysis.invocation_histogram(em_log)
        b_rl = analysis.invocation_histogram(rl_log)
        is_mono = b_rl.extremity[0] <= b_rl.extremity[1] <= b_rl.extremity[2]
        is_lower = b_em.extremity[2] < b_rl.extremity[2]
        mono += is_mono
        lower += is_lower
        print(f"  seed {seed}: rl extremity {[round(e, 3) for e in b_rl.extremity]} mono={is_mono} "
              f"em final {b_em.extremity[2]:.3f} lower={is_lower}")
    print(f"A7: monotone {mono}/{len(seeds)}, em lower {lower}/{len(seeds)}")


def run_a8(seeds, em_iters=100, suite_seed=63, n_queries=120, alpha=12.0, lr=0.2,
           eps=0.3, sft_steps=200, sft_lr=2.0, n_eval=8):
    specs, queries, backend = suite_backend(suite_seed, n_queries)
    em_sel, rl_sel, em_syn = [], [], []
    for seed in seeds:
        init, _ = imitation_init(specs, queries, backend, seed, sft_steps, sft_lr)
        cfg = Config(seed=seed, K=8, subsample_size=8, alpha=alpha, learning_rate=lr,
                     clip_eps=eps, em_iterations=em_iters, baseline_iterations=2 * em_iters)
        em = optim.em_train(cfg, queries, backend, init_policy=init)
        rl = optim.baseline_train(optim.KIND_ONPOLICY, cfg, queries, backend, init_policy=init)
        rng = np.random.default_rng(50_000 + seed)
        ev_em = analysis.evaluate_arms(em.policy, backend, queries, n_eval, rng)
        ev_rl = analysis.evaluate_arms(rl.policy, backend, queries, n_eval, rng)
        rep_em = analysis.selection_report(ev_em)
        rep_rl = analysis.selection_report(ev_rl)
        syn = rep_em["auto_acc"] - max(rep_em["cot_acc"], rep_em["code_acc"])
        em_sel.append(rep_em["selection_accuracy"])
        rl_sel.append(rep_rl["selection_accuracy"])
        em_syn.append(syn)
        print(f"  seed {seed}: em_sel={rep_em['selection_accuracy']:.3f} rl_sel={rep_rl['selection_accuracy']:.3f} "
              f"syn={syn:+.3f} decisive={rep_em['decisive_count']:.0f}")
    print(f"A8: em_sel mean={np.mean(em_sel):.3f} min={np.min(em_sel):.3f} | "
          f"rl_sel mean={np.mean(rl_sel):.3f} range=({np.min(rl_sel):.3f},{np.max(rl_sel):.3f}) | "
          f"syn mean={np.mean(em_syn):+.3f}")


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("which", nargs="?", default="all", choices=("a6", "a7", "a8", "all"))
    ap.add_argument("--seeds", type=int, default=10)
    ap.add_argument("--em-iters", type=int, default=150)
    args = ap.parse_args()
    seeds = list(range(args.seeds))
    t0 = time.time()
    if args.which in ("a6", "all"):
        print("== A6 (training efficiency) ==")
        run_a6(seeds, em_iters=args.em_iters)
    if args.which in ("a7", "all"):
        print("== A7 (exploration collapse) ==")
        run_a7(seeds)
    if args.which in ("a8", "all"):
        print("== A8 (selection accuracy) ==")
        run_a8(seeds)
    print(f"total {time.time() - t0:.0f}s")


if __name__ == "__main__":
    sys.exit(main())
