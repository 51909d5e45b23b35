import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, str(Path(__file__).parent))

settings.register_profile("default", deadline=None, max_examples=50,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

FIXTURES = Path(__file__).parent / "fixtures"
SEEDS = (0, 1, 2)


@pytest.fixture(scope="session")
def fixtures_dir():
    return FIXTURES


@pytest.fixture(scope="session")
def default_streams():
    from pignn.datagen import GenConfig, bundle_to_graph, generate_stream

    return {seed: bundle_to_graph(generate_stream(GenConfig(seed=seed))) for seed in SEEDS}


@pytest.fixture(scope="session")
def method_runs(default_streams):
    """Every method on the default T = 6 stream for three seeds, default config."""
    import time

    from pignn.algo import TrainConfig, continual_run
    from pignn.baselines import BaselineMethod, run_baseline

    tick = time.perf_counter()
    runs = {}
    for seed, data in default_streams.items():
        cfg = TrainConfig(seed=seed)
        runs[("pi-gnn", seed)] = continual_run(data, cfg)
        for kind in ("retrain", "online", "pretrain"):
            runs[(kind, seed)] = run_baseline(BaselineMethod(kind), data, cfg)
    runs["elapsed"] = time.perf_counter() - tick
    return runs


@pytest.fixture(scope="session")
def pi_run(method_runs):
    return method_runs[("pi-gnn", 0)]


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# -- acceptance report --------------------------------------------------------------
# Tests marked ``criterion(n, title)`` get one PASS/FAIL line in the terminal
# summary; a test may attach a one-line detail via ``record_detail``.

_REPORT = pytest.StashKey[dict]()


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")
    config.stash[_REPORT] = {}


@pytest.fixture
def record_detail(request):
    def record(text):
        request.node.user_properties.append(("detail", text))
        print(text)
    return record


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        detail = "; ".join(v for k, v in item.user_properties if k == "detail")
        item.config.stash[_REPORT][mark.args[0]] = (mark.args[1], rep.passed, detail)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    report = config.stash[_REPORT]
    if not report:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(report):
        title, ok, detail = report[n]
        terminalreporter.write_line(f"criterion {n:>2} {'PASS' if ok else 'FAIL'}  {title}" + (f" | {detail}" if detail else ""))
