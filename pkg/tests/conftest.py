import numpy as np
import pytest
import torch

torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def toy_set():
    """Four small synthetic samples shared by data/CLI tests."""
    from evlines.scenes import toy_samples

    return toy_samples(4, seed=7)


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is not None and rep.when == "call":
        rep.user_properties.append(("criterion", marker.args))


def pytest_terminal_summary(terminalreporter):
    rows = []
    for status in ("passed", "failed"):
        for rep in terminalreporter.stats.get(status, []):
            props = dict(rep.user_properties)
            if "criterion" in props:
                number, title = props["criterion"]
                rows.append((number, "PASS" if status == "passed" else "FAIL", title, props.get("detail", "")))
    if rows:
        terminalreporter.section("acceptance criteria")
        for number, verdict, title, detail in sorted(rows):
            terminalreporter.write_line(f"criterion {number:2d}: {verdict}  {title}  [{detail}]")
