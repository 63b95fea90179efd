import numpy as np
import pytest

from ddbsense import attacks, ddb, fusion, spectrum


@pytest.fixture(scope="session")
def scenario():
    return spectrum.heterogeneous_scenario(seed=1)


@pytest.fixture(scope="session")
def train_set(scenario):
    return spectrum.generate_dataset(scenario, 5000, seed=10)


@pytest.fixture(scope="session")
def test_set(scenario):
    return spectrum.generate_dataset(scenario, 2000, seed=11)


@pytest.fixture(scope="session")
def model(train_set):
    return fusion.train(train_set, fusion.TrainConfig(seed=3))


@pytest.fixture(scope="session")
def surrogate(scenario, model):
    obs = spectrum.generate_dataset(scenario, 5000, seed=12)
    return attacks.train_surrogate(obs.values, model.classify(obs.values))


@pytest.fixture(scope="session")
def direction(scenario):
    return ddb.lrt_direction(scenario.scale_h0, scenario.scale_h1, scenario.sample_count)


def random_affine(n=20, seed=0):
    """Affine classifier whose boundary passes through the middle of [0, 10]^n."""
    rng = np.random.default_rng(seed)
    w = rng.normal(size=n)
    b = -float(w @ np.full(n, 5.0))
    return fusion.FusionClassifier.affine(w, b), w, b


@pytest.fixture
def affine():
    return random_affine()


_verdicts = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_verdicts] = []


@pytest.fixture
def verdict(request):
    """Record one PASS/FAIL line; all lines are printed in the terminal summary."""
    lines = request.config.stash[_verdicts]

    def record(label, ok, detail=""):
        line = f"{'PASS' if ok else 'FAIL'} {label}" + (f": {detail}" if detail else "")
        lines.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_verdicts, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
