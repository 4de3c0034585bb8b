"""
Blockprobe - Simulated Resolver

Answers A queries over UDP, TCP and DoH (POST /dns-query) on loopback.
The censoring role applies the scenario's dns_rules; the control role
answers every live domain from the zone. Dead domains are NXDOMAIN on both.
"""

import socketserver
import struct
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Optional

import dns.exception
import dns.flags
import dns.message
import dns.rcode
import dns.rdatatype
import dns.rrset

from simulator.endpoint import CENSOR, SimEndpoint
from simulator.events import Transcript
from simulator.scenario import CensorScenario

ANSWER_TTL = 60

_ERROR_RCODES = {
    "nxdomain": dns.rcode.NXDOMAIN,
    "servfail": dns.rcode.SERVFAIL,
    "refused": dns.rcode.REFUSED,
}


class DnsSimulator(SimEndpoint):
    """Resolver endpoint; address attributes are set by start()"""

    udp_address = None
    tcp_address = None
    doh_url: Optional[str] = None

    def answer(self, wire: bytes, peer: str, transport: str) -> Optional[bytes]:
        """Wire response for one query, or None to drop it"""
        try:
            query = dns.message.from_wire(wire)
        except dns.exception.DNSException:
            self.transcript.append("dns", "malformed", peer, transport=transport)
            return None

        response = dns.message.make_response(query)
        response.flags |= dns.flags.RA
        if not query.question:
            response.set_rcode(dns.rcode.FORMERR)
            return response.to_wire()

        question = query.question[0]
        domain = question.name.to_text(omit_final_dot=True).lower()
        self.transcript.append("dns", "query", peer, domain=domain, transport=transport)

        if self.scenario.is_dead(domain):
            response.set_rcode(dns.rcode.NXDOMAIN)
            self.transcript.append("dns", "response", peer, domain=domain, rcode="NXDOMAIN")
            return response.to_wire()

        rule = self.scenario.dns_rule(domain) if self.role == CENSOR else None
        action = rule.action if rule else "clean"

        if action == "drop":
            self.transcript.append("dns", "drop", peer, domain=domain)
            return None
        if action in _ERROR_RCODES:
            response.set_rcode(_ERROR_RCODES[action])
            self.transcript.append("dns", "response", peer, domain=domain, rcode=action.upper())
            return response.to_wire()

        ips = [rule.ip] if action in ("fixed_ip", "bogon") else self.scenario.zone_ips(domain)
        if question.rdtype == dns.rdatatype.A:
            response.answer.append(dns.rrset.from_text(question.name, ANSWER_TTL, "IN", "A", *ips))
        self.transcript.append("dns", "response", peer, domain=domain, rcode="NOERROR", ips=ips)
        return response.to_wire()

    def start(self) -> "DnsSimulator":
        udp = self._bind(socketserver.ThreadingUDPServer, _UdpHandler)
        tcp = self._bind(socketserver.ThreadingTCPServer, _TcpHandler)
        doh = self._bind(ThreadingHTTPServer, _DohHandler)
        self.udp_address = self._serve(udp)
        self.tcp_address = self._serve(tcp)
        host, port = self._serve(doh)
        self.doh_url = f"http://{host}:{port}/dns-query"
        return self


class _UdpHandler(socketserver.BaseRequestHandler):
    def handle(self):
        data, sock = self.request
        reply = self.server.endpoint.answer(data, f"{self.client_address[0]}:{self.client_address[1]}", "udp")
        if reply is not None:
            sock.sendto(reply, self.client_address)


class _TcpHandler(socketserver.StreamRequestHandler):
    def handle(self):
        peer = f"{self.client_address[0]}:{self.client_address[1]}"
        while True:
            prefix = self.rfile.read(2)
            if len(prefix) < 2:
                return
            (length,) = struct.unpack("!H", prefix)
            data = self.rfile.read(length)
            if len(data) < length:
                return
            reply = self.server.endpoint.answer(data, peer, "tcp")
            if reply is None:
                return
            self.wfile.write(struct.pack("!H", len(reply)) + reply)
            self.wfile.flush()


class _DohHandler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"

    def do_POST(self):
        if self.path.split("?", 1)[0] != "/dns-query":
            self.send_error(404)
            return
        length = int(self.headers.get("content-length") or 0)
        data = self.rfile.read(length)
        peer = f"{self.client_address[0]}:{self.client_address[1]}"
        reply = self.server.endpoint.answer(data, peer, "doh")
        if reply is None:
            self.send_error(504, "upstream timeout")
            return
        self.send_response(200)
        self.send_header("content-type", "application/dns-message")
        self.send_header("content-length", str(len(reply)))
        self.end_headers()
        self.wfile.write(reply)

    def log_message(self, format, *args):
        pass


def spawn_dns_sim(scenario: CensorScenario, role: str = CENSOR, label: str = "test",
                  transcript: Optional[Transcript] = None) -> DnsSimulator:
    return DnsSimulator(scenario, role, label, transcript).start()
