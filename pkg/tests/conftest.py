import numpy as np
import pytest

from lightcap.model import CGRUDecoder, ModelConfig

_CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    n = marker.args[0]
    detail = dict(item.user_properties).get("detail", "")
    if report.when == "call" or (report.when == "setup" and report.failed):
        _CRITERIA[n] = ("PASS" if report.passed else "FAIL", detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        status, detail = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n}: {status}  {detail}".rstrip())


def tiny_cfg(**kw):
    base = dict(d=4, h=6, v_dim=5, vocab_size=9, dtype="float64", max_len=6,
                mha_heads=2, mha_regions=3, mha_feat_dim=4)
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture
def tiny_model():
    return CGRUDecoder(tiny_cfg(), seed=3)


@pytest.fixture
def rng():
    return np.random.default_rng(0)
