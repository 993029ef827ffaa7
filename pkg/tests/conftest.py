import numpy as np
import pytest

from mixedmds import ingest, model, sampler


def make_state(S=3, H=2, n=(2, 1), seed=0, **over):
    """Random valid state on a small design."""
    rng = np.random.default_rng(seed)
    group = np.repeat(np.arange(len(n)), n)
    fields = dict(
        eta=rng.normal(size=(S, H)),
        w_group=rng.uniform(0.5, 1.5, size=len(n)),
        w_ind=rng.uniform(0.5, 1.5, size=(group.size, H)),
        phi=rng.uniform(0.5, 2.0, size=(S, H)),
        mgp_delta=rng.uniform(0.5, 2.0, size=H),
        sigma2=rng.uniform(0.05, 0.2, size=len(n)),
        group=group,
    )
    fields.update(over)
    return model.ModelState(**fields)


def make_data(state, seed=1):
    d = model.simulate_distances(state, np.random.default_rng(seed))
    return model.DistanceDataset(d=np.maximum(d, 1e-6), group=state.group, S=state.S)


@pytest.fixture
def small_state():
    return make_state()


@pytest.fixture
def small_data(small_state):
    return make_data(small_state)


@pytest.fixture(scope="session")
def synthetic():
    return ingest.generate_synthetic(ingest.SyntheticSpec())


@pytest.fixture(scope="session")
def short_chain(synthetic):
    data, truth = synthetic
    hp = model.Hyperparameters(D_T="auto")
    return sampler.run_chain(data, hp, schedule=sampler.Schedule(1500, 500, 5), seed=3)


# one line per acceptance criterion, printed in the terminal summary
ACCEPTANCE_RESULTS = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_RESULTS, key=int):
        ok, detail = ACCEPTANCE_RESULTS[key]
        terminalreporter.write_line(f"criterion {key}: {'PASS' if ok else 'FAIL'}  {detail}")
