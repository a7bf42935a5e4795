import os
import sys

import pytest

# Flat top-level packages (common, trainer, matcher) are imported from the repo root
sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))


def pytest_collection_modifyitems(config, items):
    if os.getenv("LANDMATCH_RUN_SLOW") == "1":
        return
    skip_slow = pytest.mark.skip(reason="set LANDMATCH_RUN_SLOW=1 to run desk-scale tests")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)
