import numpy as np
import pytest

from recdemand.params import ModelParameters, SequenceWeights, random_like
from recdemand.simulator import WorldConfig, generate_ground_truth, simulate_panel


def random_params(n_goods=6, dim=3, n_slots=3, max_len=5, hidden=4, scale=0.5, seed=0):
    rng = np.random.default_rng(seed)
    template = ModelParameters.zeros(n_goods, dim, n_slots, max_len, hidden)
    return random_like(template, scale, rng)


def small_world(**overrides):
    base = dict(n_users=60, n_goods=30, dim=4, horizon=8, capacities=(1, 2, 3), n_categories=3,
                hidden=8, seed=3)
    base.update(overrides)
    return WorldConfig(**base)


@pytest.fixture(scope="session")
def world():
    config = small_world()
    truth = generate_ground_truth(config)
    log = simulate_panel(truth, config)
    return config, truth, log


ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def record_criterion(number: int, ok: bool, detail: str) -> None:
    ACCEPTANCE[number] = (bool(ok), detail)
    print(f"criterion {number}: {'PASS' if ok else 'FAIL'} {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}")
