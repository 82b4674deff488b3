import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_pairs():
    """Three short reverberant/clean feature pairs (about 25 frames each)."""
    from dereverb.dataset import make_synthetic_clean, reverberate
    from dereverb.rir import ROOMS, sample_scene, simulate_rir
    from dereverb.training import make_pair

    out = []
    for i, wave in enumerate(make_synthetic_clean(3, 0.4, seed=9)):
        rir = simulate_rir(sample_scene(ROOMS["A"], (0.2, 0.5), [9, i]))
        clean, reverb = reverberate(wave, rir)
        out.append(make_pair(f"tiny{i}", reverb, clean))
    return out


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by a test")


_CRITERIA = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or rep.when != "call" and not (rep.when == "setup" and rep.failed):
        return
    detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
    _CRITERIA[mark.args[0]] = (mark.args[1], rep.passed, detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        title, ok, detail = _CRITERIA[n]
        line = f"criterion {n:2d} {'PASS' if ok else 'FAIL'}  {title}"
        terminalreporter.write_line(line + (f"  [{detail}]" if detail else ""))
