import os
import sys
import time

import pytest


def pytest_configure():
    # Ensure `src/` is on sys.path for src-layout imports.
    root = os.path.dirname(os.path.dirname(__file__))
    src = os.path.join(root, "src")
    if src not in sys.path:
        sys.path.insert(0, src)


THREE_BUS = """
# toy network, values in p.u.
name three-bus
bus 1 slack 0 0 0 1.02
bus 2 pv 0.2 0.05 0.6 1.01
bus 3 pq 0.9 0.3
branch 1 2 0.02 0.06 0.03
branch 1 3 0.08 0.24 0.025
branch 2 3 0.06 0.18 0.02
"""


def env_flag(name: str) -> bool:
    return os.getenv(name, "").lower() in {"1", "true", "yes", "on"}


@pytest.fixture(scope="session")
def ieee30():
    from fdia_dae.casefile import load_bundled_case

    return load_bundled_case("ieee30")


@pytest.fixture(scope="session")
def three_bus():
    from fdia_dae.casefile import load_case

    return load_case(THREE_BUS)


@pytest.fixture()
def slow():
    if not env_flag("RUN_SLOW_TESTS"):
        pytest.skip("RUN_SLOW_TESTS not enabled")


DESK_SAMPLES = 5000


@pytest.fixture(scope="session")
def desk_run(tmp_path_factory):
    """One desk-scale simulate/train/evaluate run shared by the slow tests.

    Returns the output directory, the CLI arguments that address it and the
    wall-clock seconds the three commands took.
    """

    if not env_flag("RUN_SLOW_TESTS"):
        pytest.skip("RUN_SLOW_TESTS not enabled")
    from fdia_dae.cli import main

    out = tmp_path_factory.mktemp("desk")
    argv = ["--seed", "0", "--set", f"output_dir={out}", "--set", f"dataset.sample_count={DESK_SAMPLES}"]
    started = time.perf_counter()
    with pytest.MonkeyPatch.context() as mp:
        mp.delenv("FDIA_OUTPUT_DIR", raising=False)
        for command in ("simulate", "train", "evaluate"):
            assert main([command, *argv]) == 0, command
    return out, argv, time.perf_counter() - started
