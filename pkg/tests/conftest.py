import sys
import time
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from mpcappset.experiment import compare_methods, example1_config, example2_config, run_experiment


@pytest.fixture(scope="session")
def ex1_run(tmp_path_factory):
    """Full example-1 pipeline, shared by the acceptance criteria."""
    cfg = example1_config()
    out = tmp_path_factory.mktemp("ex1_run")
    t0 = time.perf_counter()
    report = run_experiment(cfg, out)
    elapsed = time.perf_counter() - t0
    return {"config": cfg, "report": report, "out": out, "elapsed": elapsed}


@pytest.fixture(scope="session")
def ex1_compare():
    cfg = example1_config()
    t0 = time.perf_counter()
    report = compare_methods(cfg)
    elapsed = time.perf_counter() - t0
    return {"config": cfg, "report": report, "elapsed": elapsed}


@pytest.fixture(scope="session")
def ex2_run(tmp_path_factory):
    cfg = example2_config()
    out = tmp_path_factory.mktemp("ex2_run")
    t0 = time.perf_counter()
    report = run_experiment(cfg, out)
    elapsed = time.perf_counter() - t0
    return {"config": cfg, "report": report, "out": out, "elapsed": elapsed}
