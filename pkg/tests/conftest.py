import contextlib
import time

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from probe_vio.geometry import StereoCamera

settings.register_profile(
    "default", deadline=None, max_examples=60, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")

_ACCEPTANCE: dict[int, str] = {}


@pytest.fixture
def criterion():
    """Context manager recording one acceptance line, PASS or FAIL."""

    @contextlib.contextmanager
    def record(number: int, title: str, budget_s: float | None = None):
        start = time.perf_counter()
        info: dict = {}
        try:
            yield info
        except BaseException as exc:
            _ACCEPTANCE[number] = f"[{number}] FAIL {title}: {str(exc).splitlines()[0] if str(exc) else type(exc).__name__}"
            raise
        elapsed = time.perf_counter() - start
        detail = ", ".join(f"{k}={v}" for k, v in info.items())
        line = f"[{number}] PASS {title} ({elapsed:.1f} s{', ' + detail if detail else ''})"
        if budget_s is not None and elapsed > budget_s:
            _ACCEPTANCE[number] = f"[{number}] FAIL {title}: runtime {elapsed:.1f} s over budget {budget_s:.0f} s"
            raise AssertionError(f"runtime {elapsed:.1f} s exceeds {budget_s} s")
        _ACCEPTANCE[number] = line
        print(line)

    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for n in sorted(_ACCEPTANCE):
        terminalreporter.write_line(_ACCEPTANCE[n])


@pytest.fixture
def cam():
    return StereoCamera(f=450.0, b=0.5, c_u=320.0, c_v=240.0, image_width=640, image_height=480)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def moving_training():
    """Model trained on a short moving-object sequence, shared by several suites."""
    from probe_vio.scenarios import moving_object
    from probe_vio.simulator import generate
    from probe_vio.training import TrainingConfig, train_model

    result = generate(moving_object(seed=100, frames=40), keep_images=False)
    return result, train_model(result.dataset, TrainingConfig(iterations=10, seed=0))
