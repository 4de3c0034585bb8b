"""
Blockprobe - Simulated HTTP Middlebox and Origins

An HTTP proxy on loopback. Probes send absolute-URI GET requests
("GET http://<ip>/" with the Host header set to the domain) and CONNECT
requests for TCP handshakes. The censoring role applies tcp_rules and
http_rules before reaching the origin; the control role reaches the origin
directly. CONNECT to a loopback address opens a real tunnel to that simulator
endpoint; any other target is answered from the scenario alone.

Origin bodies carry a padding comment whose length is drawn per
(seed, endpoint, domain, ip, fetch index). Control endpoint i of k draws from
the i-th stratum of [0, length_jitter], so the control lengths always spread
across the jitter range.
"""

import random
import socket
import threading
from collections import defaultdict
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Dict, Optional, Tuple
from urllib.parse import urlsplit

from simulator.endpoint import CENSOR, SimEndpoint, is_loopback, relay_streams, reset_connection
from simulator.events import Transcript
from simulator.scenario import CensorScenario

# Upper bound on how long a dropped request is held open
DROP_HOLD = 60.0
TUNNEL_TIMEOUT = 10.0


def padding_length(seed: int, label: str, domain: str, ip: str, index: int,
                   jitter: int, stratum: Optional[Tuple[int, int]] = None) -> int:
    """Padding bytes for one fetch; stratum is (i, k) for control endpoint i of k"""
    if jitter <= 0:
        return 0
    u = random.Random(f"{seed}:{label}:{domain}:{ip}:{index}").random()
    if stratum is None:
        return int(jitter * u)
    i, k = stratum
    return int(jitter * (i + u) / k)


def padded_body(base_body: str, padding: int) -> bytes:
    """Base body plus a padding comment; the comment adds no element tags"""
    return (base_body + "<!-- " + "x" * padding + " -->").encode("utf-8")


class HttpSimulator(SimEndpoint):
    """Middlebox/proxy endpoint; proxy_address is set by start()"""

    proxy_address = None

    def __init__(self, scenario: CensorScenario, role: str = CENSOR, label: str = "test",
                 transcript: Optional[Transcript] = None, stratum: Optional[Tuple[int, int]] = None):
        super().__init__(scenario, role, label, transcript)
        self.stratum = stratum
        self._fetch_index: Dict[Tuple[str, str], int] = defaultdict(int)
        self._index_lock = threading.Lock()

    def next_fetch_index(self, domain: str, ip: str) -> int:
        with self._index_lock:
            index = self._fetch_index[(domain, ip)]
            self._fetch_index[(domain, ip)] += 1
        return index

    def origin_response(self, domain: str, ip: str):
        """(status, headers, body) served by the origin of domain"""
        origin = self.scenario.origin(domain)
        index = self.next_fetch_index(domain, ip)
        padding = padding_length(self.scenario.seed, self.label, domain, ip, index,
                                 origin.length_jitter, self.stratum)
        headers = {"content-type": "text/html; charset=utf-8"}
        if origin.location:
            headers["location"] = origin.location
        headers.update(origin.headers)
        return origin.status, headers, padded_body(origin.base_body, padding)

    def start(self) -> "HttpSimulator":
        server = self._bind(ThreadingHTTPServer, _ProxyHandler)
        self.proxy_address = self._serve(server)
        return self


class _ProxyHandler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"
    server_version = "origin/1.0"

    @property
    def endpoint(self) -> HttpSimulator:
        return self.server.endpoint

    @property
    def peer(self) -> str:
        return f"{self.client_address[0]}:{self.client_address[1]}"

    def log_message(self, format, *args):
        pass

    def _reset(self, layer: str, target: str):
        self.endpoint.transcript.append(layer, "reset", self.peer, target=target)
        self.close_connection = True
        reset_connection(self.connection, self.rfile)

    def _hold(self):
        """Never answer; wait for the client to give up and close"""
        self.close_connection = True
        self.connection.settimeout(DROP_HOLD)
        try:
            while self.connection.recv(4096):
                pass
        except OSError:
            pass

    def _censor_reply(self, status: int, headers: Dict[str, str], body: bytes, event: str, domain: str):
        """Minimal injected response: no Server or Date header"""
        self.send_response_only(status)
        for key, value in headers.items():
            self.send_header(key, value)
        self.send_header("content-length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)
        self.endpoint.transcript.append("http", event, self.peer, domain=domain, status=status)

    def _connect_reply(self, status: int, event: str, target: str):
        self.send_response_only(status)
        self.send_header("content-length", "0")
        self.end_headers()
        self.endpoint.transcript.append("tcp", event, self.peer, target=target)

    def _tunnel(self, host: str, port: int, target: str):
        """Byte tunnel to another loopback endpoint"""
        try:
            upstream = socket.create_connection((host, port), timeout=TUNNEL_TIMEOUT)
        except OSError:
            self._connect_reply(502, "refused", target)
            return
        with upstream:
            self._connect_reply(200, "established", target)
            relay_streams(self.connection, upstream, TUNNEL_TIMEOUT)
        self.endpoint.transcript.append("tcp", "tunnel_closed", self.peer, target=target)

    def do_CONNECT(self):
        host, _, port_text = self.path.rpartition(":")
        target = self.path
        scenario = self.endpoint.scenario
        try:
            port = int(port_text)
        except ValueError:
            self.send_error(400)
            return
        self.endpoint.transcript.append("tcp", "connect", self.peer, target=target)

        rule = scenario.tcp_rule(host) if self.endpoint.censoring else "pass"
        if rule == "rst":
            self._reset("tcp", target)
            return
        self.close_connection = True
        if rule == "drop":
            self._connect_reply(504, "timeout", target)
        elif is_loopback(host):
            self._tunnel(host, port, target)
        elif port not in scenario.open_ports:
            self._connect_reply(502, "refused", target)
        else:
            self._connect_reply(200, "established", target)

    def do_GET(self):
        url = urlsplit(self.path)
        domain = (self.headers.get("host") or url.hostname or "").split(":")[0].lower()
        ip = url.hostname or ""
        port = url.port or 80
        endpoint = self.endpoint
        scenario = endpoint.scenario
        endpoint.transcript.append("http", "request", self.peer, domain=domain, ip=ip)

        if endpoint.censoring:
            rule = scenario.tcp_rule(ip)
            if rule == "rst":
                self._reset("tcp", f"{ip}:{port}")
                return
            if rule == "drop":
                self.endpoint.transcript.append("tcp", "timeout", self.peer, target=f"{ip}:{port}")
                self._hold()
                return

        if port not in scenario.open_ports or scenario.is_dead(domain):
            self.send_error(502)
            return

        if endpoint.censoring:
            rule = scenario.http_rule(domain)
            if rule.action == "rst":
                self._reset("http", domain)
                return
            if rule.action == "blockpage":
                headers = {"content-type": "text/html"}
                headers.update(rule.headers)
                self._censor_reply(rule.status or 200, headers, rule.body.encode("utf-8"), "blockpage", domain)
                return
            if rule.action == "redirect":
                self._censor_reply(rule.status or 302, {"location": rule.location}, b"", "redirect", domain)
                return
            if rule.action == "error":
                self._censor_reply(rule.status, dict(rule.headers), b"", "error", domain)
                return

        status, headers, body = endpoint.origin_response(domain, ip)
        self.send_response(status)
        for key, value in headers.items():
            self.send_header(key, value)
        self.send_header("content-length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)
        endpoint.transcript.append("http", "response", self.peer, domain=domain, status=status,
                                   length=len(body))


def spawn_http_sim(scenario: CensorScenario, role: str = CENSOR, label: str = "test",
                   transcript: Optional[Transcript] = None,
                   stratum: Optional[Tuple[int, int]] = None) -> HttpSimulator:
    return HttpSimulator(scenario, role, label, transcript, stratum).start()
