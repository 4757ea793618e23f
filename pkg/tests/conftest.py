import time

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from moldxai.config import build_config
from moldxai.lstm import init_params

settings.register_profile("default", deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

# criterion number -> (passed, detail); filled by tests/test_acceptance.py
ACCEPTANCE = {}


_SESSION_START = time.perf_counter()


def pytest_collection_modifyitems(items):
    # acceptance runs last so its summary follows every unit suite
    items.sort(key=lambda item: "test_acceptance.py" in item.nodeid)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    minutes = (time.perf_counter() - _SESSION_START) / 60
    terminalreporter.write_line(f"full test session: {minutes:.1f} min")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture
def small_model():
    """Random 8/4/4 model on 5 features with non-trivial biases."""
    model = init_params(list(range(5)), (8, 4, 4), seed=1)
    rng = np.random.default_rng(0)
    for layer in model.layers:
        layer.b[:] = rng.normal(scale=0.5, size=layer.b.shape)
    model.b_out = 0.3
    return model


@pytest.fixture(scope="session")
def desk_run(tmp_path_factory):
    """The whole pipeline at the desk profile, run once per session (~15 min)."""
    from moldxai.pipeline import run_all

    workdir = tmp_path_factory.mktemp("desk")
    cfg = build_config(profile="desk")
    t0 = time.perf_counter()
    out = run_all(cfg, workdir, log_fn=lambda msg: None)
    out["elapsed"] = time.perf_counter() - t0
    out["cfg"] = cfg
    out["workdir"] = workdir
    return out
