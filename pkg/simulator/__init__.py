# Simulated censoring network
from simulator.dns_sim import DnsSimulator, spawn_dns_sim
from simulator.endpoint import CENSOR, CONTROL, transcript
from simulator.events import Transcript, TranscriptEvent
from simulator.http_sim import HttpSimulator, spawn_http_sim
from simulator.network import SimulatedNetwork
from simulator.scenario import CensorScenario, expected_censored, load_scenario, load_scenario_file
from simulator.sni_sim import SniReflector, spawn_sni_sim

__all__ = [
    "CENSOR", "CONTROL", "CensorScenario", "DnsSimulator", "HttpSimulator",
    "SimulatedNetwork", "SniReflector", "Transcript", "TranscriptEvent",
    "expected_censored", "load_scenario", "load_scenario_file",
    "spawn_dns_sim", "spawn_http_sim", "spawn_sni_sim", "transcript",
]
