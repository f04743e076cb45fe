import numpy as np
import pytest
from hypothesis import settings

from nanovoice.config import ExperimentConfig
from nanovoice.experiments import cmd_pretrain

settings.register_profile("default", deadline=None, max_examples=40)
settings.load_profile("default")

_CRITERIA = []


@pytest.fixture(scope="session")
def pretrained(tmp_path_factory):
    """Pretrained toy net (default config), its loss curve and config; built once per session."""
    out = tmp_path_factory.mktemp("pretrained")
    cfg = ExperimentConfig(out=str(out))
    net, report = cmd_pretrain(cfg)
    losses = np.array([row["loss"] for row in report.rows])
    return net, losses, cfg


@pytest.fixture(scope="session")
def net(pretrained):
    return pretrained[0]


@pytest.fixture
def rng(request):
    return np.random.default_rng(abs(hash(request.node.name)) % 2**32)


@pytest.fixture(scope="session")
def criterion():
    """Record a pass/fail line for the acceptance summary printed at the end of the run."""

    def record(number, ok, detail):
        line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        _CRITERIA.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_CRITERIA, key=lambda s: int(s.split(":")[0].split()[1])):
            terminalreporter.write_line(line)
