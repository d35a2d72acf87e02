"""Shared fixtures: a small synthetic scenario family and derived tasks."""

import numpy as np
import pytest

from scenmeta import tasks as tasks_mod


@pytest.fixture(scope="session")
def small_family():
    log, table = tasks_mod.gen_synthetic_family(
        n_scenarios=10, users_per=20, items_per=30, d_latent=8, noise=0.5, seed=7
    )
    return log, table


@pytest.fixture(scope="session")
def small_tasks(small_family):
    log, _table = small_family
    return tasks_mod.build_tasks(log, shots=8, seed=0)


@pytest.fixture(scope="session")
def small_table(small_family):
    return small_family[1]


@pytest.fixture()
def rng():
    return np.random.default_rng(0)
