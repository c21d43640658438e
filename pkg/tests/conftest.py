import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))


def random_boxes(rng: np.random.Generator, n: int, min_size: float = 0.02,
                 max_size: float = 0.5) -> np.ndarray:
    wh = rng.uniform(min_size, max_size, size=(n, 2))
    centers = rng.uniform(wh / 2, 1 - wh / 2)
    return np.concatenate([centers, wh], axis=1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    report = sys.modules.get("test_acceptance")
    if report is None or not report.REPORT:
        return
    lines = report.REPORT
    terminalreporter.section("acceptance criteria")
    for key in sorted(k for k in lines if isinstance(k, int)):
        terminalreporter.write_line(lines[key])
    if "table" in lines:
        terminalreporter.write_line("")
        terminalreporter.write_line("ablation table (per seed and per-mode mean):")
        for line in lines["table"].splitlines():
            terminalreporter.write_line(line)
