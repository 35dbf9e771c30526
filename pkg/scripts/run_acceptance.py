"""Print one PASS/FAIL line per acceptance criterion; exit 1 if any fails."""

import runpy
from pathlib import Path

if __name__ == "__main__":
    runpy.run_path(str(Path(__file__).resolve().parents[1] / "tests" / "test_acceptance.py"), run_name="__main__")
