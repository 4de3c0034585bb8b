"""
Blockprobe - Simulated Network

One censoring endpoint set (resolver, middlebox, SNI filter) for the test
side and N clean endpoint sets for the control side, wired into a RunConfig
so the probe pipeline runs against them unchanged.

There is a single clean reflector. The test side reaches it through the SNI
filter; the control side reaches it through a control relay tunnel.
"""

from dataclasses import replace
from typing import List, Optional

from core.config import DnsChannel, RunConfig, Vantage
from core.diagnostics import ProbeLogger
from simulator.dns_sim import DnsSimulator
from simulator.endpoint import CENSOR, CONTROL, SimEndpoint
from simulator.events import Transcript
from simulator.http_sim import HttpSimulator
from simulator.scenario import CensorScenario
from simulator.sni_sim import SniReflector

DEFAULT_CONTROLS = 5
DOH_CONTROLS = 2


class SimulatedNetwork:
    """Context manager owning every endpoint of one simulated ISP"""

    def __init__(self, scenario: CensorScenario, control_count: int = DEFAULT_CONTROLS,
                 logger: Optional[ProbeLogger] = None):
        if control_count < 1:
            raise ValueError("control_count must be >= 1")
        self.scenario = scenario
        self.control_count = control_count
        self.logger = logger
        self.transcript = Transcript()
        self.control_transcript = Transcript()

        self.test_dns = DnsSimulator(scenario, CENSOR, "test", self.transcript)
        self.test_http = HttpSimulator(scenario, CENSOR, "test", self.transcript)
        self.control_dns: List[DnsSimulator] = []
        self.control_http: List[HttpSimulator] = []
        for i in range(control_count):
            label = f"control-{i}"
            self.control_dns.append(DnsSimulator(scenario, CONTROL, label, self.control_transcript))
            self.control_http.append(HttpSimulator(scenario, CONTROL, label, self.control_transcript,
                                                   stratum=(i, control_count)))
        self.control_sni = SniReflector(scenario, CONTROL, "control", self.control_transcript)
        self.test_sni = SniReflector(scenario, CENSOR, "test", self.transcript, upstream=self.control_sni)
        self._started: List[SimEndpoint] = []

    @property
    def endpoints(self) -> List[SimEndpoint]:
        return [self.test_dns, self.test_http, self.test_sni,
                *self.control_dns, *self.control_http, self.control_sni]

    def start(self) -> "SimulatedNetwork":
        try:
            for endpoint in self.endpoints:
                endpoint.start()
                self._started.append(endpoint)
        except Exception:
            self.stop()
            raise
        if self.logger:
            self.logger.log_info(f"Simulated network for {self.scenario.isp} up: "
                                 f"{self.control_count} control sets")
            for key, value in self.describe().items():
                self.logger.log_config(key, value)
        return self

    def stop(self):
        for endpoint in reversed(self._started):
            endpoint.stop()
        self._started.clear()

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()

    def test_channel(self) -> DnsChannel:
        host, port = self.test_dns.udp_address
        return DnsChannel("sim-test", "udp53", host=host, port=port)

    def control_channels(self) -> List[DnsChannel]:
        """Clean resolvers over UDP, the last DOH_CONTROLS over DoH"""
        channels = []
        for i, endpoint in enumerate(self.control_dns):
            if i >= self.control_count - DOH_CONTROLS:
                channels.append(DnsChannel(f"sim-control-{i}", "doh", url=endpoint.doh_url))
            else:
                host, port = endpoint.udp_address
                channels.append(DnsChannel(f"sim-control-{i}", "udp53", host=host, port=port))
        return channels

    def test_vantage(self) -> Vantage:
        host, port = self.test_http.proxy_address
        return Vantage("sim-test", "relay", host, port)

    def control_vantages(self) -> List[Vantage]:
        return [Vantage(f"sim-control-{i}", "relay", *endpoint.proxy_address)
                for i, endpoint in enumerate(self.control_http)]

    def run_config(self, base: Optional[RunConfig] = None) -> RunConfig:
        """base with channels, vantages and reflectors pointing at this network"""
        return replace(
            base or RunConfig(),
            isp=self.scenario.isp,
            test_channel=self.test_channel(),
            control_channels=self.control_channels(),
            test_vantage=self.test_vantage(),
            control_vantages=self.control_vantages(),
            test_reflector=tuple(self.test_sni.address),
            control_reflector=tuple(self.control_sni.address),
        )

    def describe(self):
        return {
            "Test resolver": "udp://%s:%d" % self.test_dns.udp_address,
            "Test DoH": self.test_dns.doh_url,
            "Test middlebox": "http://%s:%d" % self.test_http.proxy_address,
            "Test reflector": "%s:%d" % self.test_sni.address,
            "Control resolvers": [c.to_dict()["address"] for c in self.control_channels()],
            "Control proxies": ["http://%s:%d" % e.proxy_address for e in self.control_http],
            "Control reflector": "%s:%d" % self.control_sni.address,
        }
