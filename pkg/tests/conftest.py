import os
import sys

import pytest

# Repo root on sys.path, the way main.py sets up its imports
REPO_ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
sys.path.insert(0, REPO_ROOT)

from core.config import RunConfig  # noqa: E402
from core.diagnostics import ProbeLogger  # noqa: E402
from simulator.network import SimulatedNetwork  # noqa: E402
from simulator.scenario import scenario_from_dict  # noqa: E402

FIXTURES = os.path.join(REPO_ROOT, "fixtures")


def fixture_path(name: str) -> str:
    return os.path.join(FIXTURES, name)


@pytest.fixture
def logger(tmp_path):
    return ProbeLogger(str(tmp_path), echo=False)


@pytest.fixture
def make_scenario():
    def build(**data):
        data.setdefault("isp", "test-isp")
        return scenario_from_dict(data)
    return build


@pytest.fixture
def sim_network(logger):
    """Start a SimulatedNetwork for a scenario; stopped at teardown"""
    started = []

    def start(scenario, control_count=5):
        network = SimulatedNetwork(scenario, control_count, logger).start()
        started.append(network)
        return network

    yield start
    for network in started:
        network.stop()


@pytest.fixture
def fast_config(tmp_path):
    """RunConfig with the slow constants shrunk for loopback tests"""
    return RunConfig(
        output_dir=str(tmp_path / "out"),
        dns_timeout=2.0,
        tcp_retries=1,
        tcp_retry_delay=0.0,
        tcp_timeout=2.0,
        http_timeout=5.0,
        sni_timeout=3.0,
        sni_retries=1,
        parallelism=8,
        sni_parallelism=8,
    )
