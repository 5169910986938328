import time

import pytest

from opstress import pipeline as pl


def pytest_collection_modifyitems(config, items):
    # the expensive end-to-end checks run last so failures elsewhere show early
    items.sort(key=lambda item: item.get_closest_marker("slow") is not None)


@pytest.fixture(scope="session")
def desk_run(tmp_path_factory):
    """The full desk pipeline on the frozen seed, run once per session."""
    out = tmp_path_factory.mktemp("desk")
    cfg = pl.PipelineConfig()
    t0 = time.perf_counter()
    result = pl.run_pipeline(cfg, out)
    result["wall"] = time.perf_counter() - t0
    result["out"] = out
    result["config"] = cfg
    return result
