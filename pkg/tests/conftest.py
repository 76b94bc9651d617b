import time

import pytest
from hypothesis import HealthCheck, settings

from absorbmc.cli import main
from absorbmc.config import bundled_presets
from absorbmc.lattice_walk import WalkConfig
from absorbmc.model_fit import build_param_table

settings.register_profile(
    "repo", deadline=None, max_examples=60, suppress_health_check=[HealthCheck.too_slow], derandomize=True
)
settings.load_profile("repo")

EXEMPT = "exempt-final-arrival"

# q grid of the 3-D receptor tables used by the queue and concentration checks
Q_GRID_3D = (0.0, 0.05, 0.1, 0.25, 0.5, 0.75, 1.0)
Q_GRID_1D = (0.25, 0.3, 0.35, 0.4, 0.45, 0.5, 0.55, 0.6, 0.65, 0.7, 0.75, 0.8, 0.85, 0.9, 0.95, 1.0)


@pytest.fixture(scope="session")
def table_1d_receiver():
    """x = m = 10 in 1-D over q >= 0.25, with datasets."""
    return build_param_table(WalkConfig(1), (10,), (10,), Q_GRID_1D, convention=EXEMPT, return_data=True)


@pytest.fixture(scope="session")
def tables_3d():
    """Receivers at (6,0,0) and (8,0,0) in 3-D, keyed by site, with datasets."""
    out = {}
    for site in ((6, 0, 0), (8, 0, 0)):
        out[site] = build_param_table(WalkConfig(3), site, site, Q_GRID_3D, convention=EXEMPT, return_data=True)
    return out


def _run_command(preset):
    from absorbmc.config import load_config

    return load_config(None, preset)["command"]


@pytest.fixture(scope="session")
def preset_runs(tmp_path_factory):
    """Every bundled preset run once: name -> (exit code, output dir, seconds)."""
    out = {}
    for name in bundled_presets():
        d = tmp_path_factory.mktemp(name)
        t0 = time.perf_counter()
        code = main([_run_command(name), "--preset", name, "--out", str(d)])
        out[name] = (code, d, time.perf_counter() - t0)
    return out


# acceptance reporting: one line per criterion in the terminal summary

_CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(num, title): acceptance criterion checked by this test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    num, title = mark.args
    if rep.when == "call" or (rep.when == "setup" and rep.outcome != "passed"):
        detail = getattr(item, "criterion_detail", "")
        _CRITERIA[num] = (title, rep.outcome, detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for num in sorted(_CRITERIA):
        title, outcome, detail = _CRITERIA[num]
        status = "PASS" if outcome == "passed" else "FAIL"
        tr.write_line(f"[{status}] criterion {num:>2}: {title}" + (f" -- {detail}" if detail else ""))
