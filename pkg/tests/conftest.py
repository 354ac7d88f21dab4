import numpy as np
import pytest
import torch

from lesionseg.core_types import ModelConfig

torch.set_num_threads(1)

TINY_CHANNELS = (4, 8, 16, 32, 64)


@pytest.fixture
def tiny_cfg():
    return ModelConfig(num_streams=2, stage_channels=TINY_CHANNELS, input_size=(16, 16),
                       swin_heads=2, cross_heads=2)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_CRITERIA = {}
_NOTES = {}


@pytest.fixture
def note(request):
    """Attach a measured value to the acceptance summary line of the current criterion."""
    number = request.node.get_closest_marker("criterion").args[0]
    return lambda text: _NOTES.setdefault(number, []).append(text)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number, title = marker.args
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        status = "PASS" if report.passed else ("SKIP" if report.skipped else "FAIL")
        _CRITERIA[number] = (title, status, getattr(report, "duration", 0.0))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        title, status, seconds = _CRITERIA[number]
        terminalreporter.write_line(f"criterion {number:2d} {status}: {title} ({seconds:.1f} s)")
        for text in _NOTES.get(number, []):
            terminalreporter.write_line(f"    {text}")
