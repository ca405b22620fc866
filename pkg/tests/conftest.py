import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


TINY_OVERRIDES = dict(
    corpus__references=5, corpus__points=400, corpus__kinds="color_noise,downsample",
    projection__render_size=32, projection__crop_size=16, projection__views=2,
    model__patch_size=8, model__dim=8, model__heads=2, model__blocks=1,
    model__context_tokens=2, model__text_blocks=1, model__text_heads=2,
    train__epochs=2, train__batch_size=4, train__folds=5,
)


@pytest.fixture
def tiny_cfg():
    """A configuration small enough to train in well under a second per epoch."""
    from pcqa.config import default_config

    cfg = default_config().updated(**TINY_OVERRIDES)
    cfg.validate()
    return cfg


# -- acceptance summary --------------------------------------------------------
# Tests marked ``criterion(n)`` roll up into one PASS/FAIL line per criterion.

_criteria: dict[int, list[str]] = {}
_details: dict[int, list[str]] = {}


def pytest_runtest_logreport(report):
    number = getattr(report, "criterion", None)
    if number is None:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        _criteria.setdefault(number, []).append(report.outcome)
        for name, text in report.user_properties:
            if name == "detail":
                _details.setdefault(number, []).append(text)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    marker = item.get_closest_marker("criterion")
    if marker is not None:
        outcome.get_result().criterion = marker.args[0]


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        outcomes = _criteria[number]
        verdict = "PASS" if all(o == "passed" for o in outcomes) else "FAIL"
        passed = sum(o == "passed" for o in outcomes)
        terminalreporter.write_line(f"criterion {number}: {verdict} ({passed}/{len(outcomes)} checks)")
        for text in _details.get(number, []):
            terminalreporter.write_line(f"    {text}")
