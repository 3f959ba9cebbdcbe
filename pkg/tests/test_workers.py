"""
Tests for the ordered parallel map.

Run directly:
    python tests/test_workers.py

Or with pytest:
    pytest tests/test_workers.py -v
"""

import sys
import threading
import time
from pathlib import Path
sys.path.insert(0, str(Path(__file__).parent.parent))

import pytest

from src.workers import parallel_map


def test_preserves_order():
    def slow_square(x):
        time.sleep(0.001 * (10 - x))
        return x * x

    assert parallel_map(slow_square, range(10), threads=4) == [x * x for x in range(10)]
    assert parallel_map(slow_square, range(10), threads=1) == [x * x for x in range(10)]


def test_single_thread_runs_inline():
    seen = set()
    parallel_map(lambda _: seen.add(threading.get_ident()), range(5), threads=1)
    assert seen == {threading.get_ident()}


def test_empty_and_generator_input():
    assert parallel_map(str, [], threads=3) == []
    assert parallel_map(str, (i for i in range(3)), threads=2) == ["0", "1", "2"]


def test_exceptions_propagate():
    def fail(x):
        if x == 2:
            raise ValueError("boom")
        return x

    with pytest.raises(ValueError, match="boom"):
        parallel_map(fail, range(4), threads=2)


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v"]))
