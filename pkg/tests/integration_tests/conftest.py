from typing import List

import pytest


def pytest_collection_modifyitems(config: pytest.Config, items: List[pytest.Item]) -> None:
    """Skip ``slow`` runs unless the marker expression asks for them."""
    if "slow" in (config.getoption("markexpr") or ""):
        return
    skip = pytest.mark.skip(reason="end-to-end run; select with -m slow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)
