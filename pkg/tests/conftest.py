from __future__ import annotations

import numpy as np
import pytest

from emtir import env, policy as policy_mod, rollout


@pytest.fixture
def small_suite():
    return env.generate_suite(seed=7, n_queries=6, profile="balanced")


@pytest.fixture
def small_queries(small_suite):
    return env.suite_queries(small_suite)


@pytest.fixture
def small_backend(small_suite, small_queries):
    return rollout.SimulationBackend(small_suite, small_queries, code_bias=2.5)


@pytest.fixture
def small_policy(small_suite):
    return policy_mod.init_params({s.query_id: s.T for s in small_suite})


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_policy(specs, rng, scale=1.0):
    trigger = {}
    modes = {}
    for s in specs:
        trigger[s.query_id] = rng.normal(0, scale, size=2)
        modes[s.query_id] = rng.normal(0, scale, size=(2, s.T, 2))
    return policy_mod.PolicyParams(trigger=trigger, modes=modes, version=0)
