import numpy as np
import pytest

from dsbridge.engine import SourceConfig, train_source
from dsbridge.model import load_checkpoint, save_checkpoint

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def cached_source(request, seed: int):
    """Default-recipe source model for ``seed``, trained once and kept in the pytest cache."""
    cfg = SourceConfig(seed=seed)
    key = f"dsbridge_source_e{cfg.epochs}_n{cfg.samples}_s{seed}"
    path = request.config.cache.mkdir(key)
    if (path / "manifest.json").exists():
        return load_checkpoint(path)
    params = train_source(cfg)
    save_checkpoint(params, path)
    return load_checkpoint(path)


@pytest.fixture(scope="session")
def source0(request):
    return cached_source(request, 0)


@pytest.fixture
def report_criterion():
    """Record one acceptance line; printed in the terminal summary."""
    def record(number: int, name: str, ok: bool, detail: str = ""):
        status = "PASS" if ok else "FAIL"
        ACCEPTANCE_LINES.append(f"[{number:02d}] {status}  {name}  {detail}".rstrip())
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
