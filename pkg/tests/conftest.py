import pytest
import torch

from dcae.model import preset


@pytest.fixture
def tiny_config():
    """f32 with base width 8 and no extra blocks: the cheapest valid f32 model."""
    return preset("f32c32", base_width=8, blocks_per_stage=[1, 0, 0, 0, 0, 1])


@pytest.fixture
def images64():
    return torch.rand(2, 3, 64, 64, generator=torch.Generator().manual_seed(0)) * 2 - 1


_criteria: dict[int, tuple[str, str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion verdict")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or not (rep.when == "call" or rep.failed):
        return
    number, title = marker.args
    detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
    status = "PASS" if rep.passed else "FAIL"
    if _criteria.get(number, ("PASS",))[0] == "FAIL":
        return
    _criteria[number] = (status, title, detail)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        status, title, detail = _criteria[number]
        line = f"{status} criterion {number:2d}: {title}"
        terminalreporter.write_line(f"{line} [{detail}]" if detail else line)
