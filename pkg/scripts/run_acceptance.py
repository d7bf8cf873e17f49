"""Run the acceptance criteria and print one PASS/FAIL line per criterion.

    python scripts/run_acceptance.py
"""
import sys
from pathlib import Path

import pytest

if __name__ == "__main__":
    tests = Path(__file__).resolve().parents[1] / "tests" / "test_acceptance.py"
    sys.exit(pytest.main([str(tests), "-q", "-s", "-p", "no:cacheprovider"]))
