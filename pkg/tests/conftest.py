import json
import os
import sys
from pathlib import Path

import pytest
import torch

sys.path.insert(0, str(Path(__file__).resolve().parent))


@pytest.fixture(scope="session", autouse=True)
def single_threaded_torch():
    torch.set_num_threads(1)


@pytest.fixture(scope="session")
def reference():
    """The cached reference toy training run (built on first use).

    Override the cache location with INPAINTER_REFCACHE. Building from
    scratch trains codec/base/branch at the full toy budgets and benchmarks
    200 held-out scenes; on one CPU core that takes a few hours, after which
    every later pytest run reuses the cache.
    """
    import refrun

    cache = Path(os.environ.get("INPAINTER_REFCACHE", refrun.DEFAULT_CACHE))
    cache = refrun.build(cache)
    meta = json.loads((cache / "meta.json").read_text())
    report = json.loads((cache / "report.json").read_text())
    return {"cache": cache, "meta": meta, "report": report}
