import random

import pytest
from hypothesis import HealthCheck, settings

from gcent.domain import Template
from gcent.experiment import ExperimentConfig, run_warmup
from gcent.gridworld import make_task

# the sandbox box is slow and single-core; wall-clock deadlines just flake
settings.register_profile(
    "suite",
    deadline=None,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("suite")


@pytest.fixture(scope="session")
def stacking_task():
    return make_task(Template.STACKING)


@pytest.fixture(scope="session")
def insertion_task():
    return make_task(Template.INSERTION)


@pytest.fixture(scope="session")
def appliance_task():
    return make_task(Template.APPLIANCE)


@pytest.fixture(scope="session")
def typing_task():
    return make_task(Template.TYPING)


@pytest.fixture(scope="session")
def warmup_store():
    """The canonical seed dataset: 20 noisy teleop demos on stacking, seed 0.
    Session-scoped because several modules train against it."""
    return run_warmup(ExperimentConfig(Template.STACKING, seed=0))


@pytest.fixture()
def rng():
    return random.Random(0xC0FFEE)
