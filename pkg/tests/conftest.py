import pytest

from marginrepair import RepairHyper, SynthConfig, generate, repair


@pytest.fixture(scope="session")
def seed33_problem():
    return generate(SynthConfig(seed=33))


@pytest.fixture(scope="session")
def seed33_outcome(seed33_problem):
    prob = seed33_problem
    return repair(prob.model, prob.repair_set, prob.remain_set, RepairHyper())
