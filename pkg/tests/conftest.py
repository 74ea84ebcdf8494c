import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from regionwx.grid import GridSpec, VariableInventory  # noqa: E402
from regionwx.store import compute_stats, generate_synthetic  # noqa: E402


@pytest.fixture(scope="session")
def toy_grid():
    return GridSpec.toy()


@pytest.fixture(scope="session")
def toy_inventory(toy_grid):
    return VariableInventory.for_grid(toy_grid)


@pytest.fixture(scope="session")
def toy_store(tmp_path_factory, toy_grid, toy_inventory):
    root = tmp_path_factory.mktemp("store") / "toy"
    return generate_synthetic(root, toy_grid, toy_inventory, 48, seed=1, precip_crop_lat=26.0)


@pytest.fixture(scope="session")
def toy_stats(toy_store):
    return compute_stats(toy_store, "train")


ACCEPTANCE_KEY = pytest.StashKey[dict]()


@pytest.fixture
def acceptance(request):
    """Records one pass/fail line per acceptance criterion for the terminal summary."""
    lines = request.config.stash.setdefault(ACCEPTANCE_KEY, {})

    def record(number: int, ok: bool, detail: str):
        line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        lines[number] = line
        print(line)

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(ACCEPTANCE_KEY, {})
    if lines:
        terminalreporter.write_sep("=", "acceptance criteria")
        for number in sorted(lines):
            terminalreporter.write_line(lines[number])
