import json

import numpy as np
import pytest

from undermap.geodata import dataset_from_arrays


def write_records(path, rows):
    with open(path, "w", encoding="utf-8") as fh:
        for rid, lat, lon, style in rows:
            fh.write(json.dumps({"id": rid, "lat": lat, "lon": lon, "style": style}) + "\n")
    return path


@pytest.fixture
def records_file(tmp_path):
    def make(rows, name="city.jsonl"):
        return write_records(tmp_path / name, rows)
    return make


@pytest.fixture
def random_dataset():
    def make(n=500, K=8, seed=0, box=(10.0, 40.0, 1.0, 1.0)):
        rng = np.random.default_rng(seed)
        w, s, W, H = box
        return dataset_from_arrays("rand", K, w + W * rng.random(n), s + H * rng.random(n),
                                   rng.integers(0, K, n))
    return make


@pytest.fixture
def criterion(request):
    """Record one acceptance line; printed in the terminal summary."""
    results = request.config.stash.setdefault(_ACCEPTANCE, [])

    def check(name, ok, detail):
        line = f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}"
        results.append(line)
        print(line)
        assert ok, line
    return check


_ACCEPTANCE = pytest.StashKey[list]()


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
