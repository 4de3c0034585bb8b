"""
Loopback server plumbing shared by the simulator endpoints.
"""

import ipaddress
import select
import socket
import socketserver
import struct
import threading
from typing import List, Optional, Tuple

from core.errors import SimulatorStartupError
from simulator.events import Transcript
from simulator.scenario import CensorScenario

LOOPBACK = "127.0.0.1"

CENSOR = "censor"
CONTROL = "control"


def reset_connection(sock: socket.socket, *files):
    """Close sock so the peer receives a TCP RST instead of a FIN"""
    try:
        sock.setsockopt(socket.SOL_SOCKET, socket.SO_LINGER, struct.pack("ii", 1, 0))
    except OSError:
        pass
    for f in files:
        try:
            f.close()
        except OSError:
            pass
    sock.close()


def is_loopback(host: str) -> bool:
    try:
        return ipaddress.ip_address(host).is_loopback
    except ValueError:
        return False


def relay_streams(client: socket.socket, upstream: socket.socket, idle_timeout: float = 10.0):
    """
    Copy bytes both ways until one side closes or stays idle.

    A reset from either side is passed on to the other as a reset.
    """
    peers = {client: upstream, upstream: client}
    while True:
        readable, _, _ = select.select(list(peers), [], [], idle_timeout)
        if not readable:
            return
        for sock in readable:
            other = peers[sock]
            try:
                data = sock.recv(65536)
            except OSError:
                reset_connection(other)
                return
            if not data:
                try:
                    other.shutdown(socket.SHUT_WR)
                except OSError:
                    pass
                return
            try:
                other.sendall(data)
            except OSError:
                return


class SimEndpoint:
    """
    One simulated network element bound to loopback ephemeral ports.

    role is CENSOR (test side, rules applied) or CONTROL (clean network);
    label identifies the endpoint in jitter derivation and transcripts.
    """

    def __init__(self, scenario: CensorScenario, role: str = CENSOR, label: str = "test",
                 transcript: Optional[Transcript] = None, host: str = LOOPBACK):
        if role not in (CENSOR, CONTROL):
            raise ValueError(f"unknown endpoint role '{role}'")
        self.scenario = scenario
        self.role = role
        self.label = label
        self.transcript = transcript if transcript is not None else Transcript()
        self.host = host
        self._servers: List[socketserver.BaseServer] = []
        self._threads: List[threading.Thread] = []
        self._serving: List[socketserver.BaseServer] = []

    @property
    def censoring(self) -> bool:
        return self.role == CENSOR

    def _bind(self, server_class, handler, *args, **kwargs):
        try:
            server = server_class((self.host, 0), handler, *args, **kwargs)
        except OSError as e:
            self.stop()
            raise SimulatorStartupError(f"{type(self).__name__} could not bind {self.host}: {e}")
        server.daemon_threads = True
        server.endpoint = self
        self._servers.append(server)
        return server

    def _serve(self, server) -> Tuple[str, int]:
        thread = threading.Thread(target=server.serve_forever, kwargs={"poll_interval": 0.1},
                                  name=f"{type(self).__name__}-{self.label}", daemon=True)
        thread.start()
        self._serving.append(server)
        self._threads.append(thread)
        return server.server_address[:2]

    def start(self) -> "SimEndpoint":
        raise NotImplementedError

    def stop(self):
        for server in self._serving:
            server.shutdown()
        for server in self._servers:
            server.server_close()
        for thread in self._threads:
            thread.join(timeout=2)
        self._servers.clear()
        self._serving.clear()
        self._threads.clear()

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()


def transcript(endpoint: SimEndpoint) -> Transcript:
    """Ordered event log of a spawned endpoint"""
    return endpoint.transcript
