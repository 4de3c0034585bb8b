"""
Blockprobe - Simulated SNI Filter and Reflector

A TLS 1.3 server that completes handshakes for any server name using a
self-signed certificate. In the censoring role it first peeks at the
ClientHello and resets the connection when the SNI is on the scenario's
blocklist. A censoring endpoint given an upstream reflector acts as an
on-path filter: allowed connections are passed through to the upstream, so
the test side and a control relay end up at the same reflector.
"""

import datetime
import os
import socket
import socketserver
import ssl
import struct
import tempfile
import threading
import time
from typing import Optional, Tuple

from cryptography import x509
from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric import ec
from cryptography.x509.oid import NameOID

from simulator.endpoint import CENSOR, SimEndpoint, relay_streams, reset_connection
from simulator.events import Transcript
from simulator.scenario import CensorScenario

HANDSHAKE_TIMEOUT = 5.0
MAX_RECORD = 16384 + 5

_cert_lock = threading.Lock()
_cert_files: Optional[Tuple[str, str]] = None


def reflector_certificate() -> Tuple[str, str]:
    """(certfile, keyfile) of a self-signed certificate, created once per process"""
    global _cert_files
    with _cert_lock:
        if _cert_files is not None:
            return _cert_files

        key = ec.generate_private_key(ec.SECP256R1())
        name = x509.Name([x509.NameAttribute(NameOID.COMMON_NAME, "blockprobe-reflector")])
        now = datetime.datetime.now(datetime.timezone.utc)
        certificate = (
            x509.CertificateBuilder()
            .subject_name(name)
            .issuer_name(name)
            .public_key(key.public_key())
            .serial_number(x509.random_serial_number())
            .not_valid_before(now - datetime.timedelta(days=1))
            .not_valid_after(now + datetime.timedelta(days=365))
            .add_extension(x509.SubjectAlternativeName([x509.DNSName("reflector.invalid")]), critical=False)
            .sign(key, hashes.SHA256())
        )

        directory = tempfile.mkdtemp(prefix="blockprobe-reflector-")
        certfile = os.path.join(directory, "cert.pem")
        keyfile = os.path.join(directory, "key.pem")
        with open(certfile, "wb") as f:
            f.write(certificate.public_bytes(serialization.Encoding.PEM))
        with open(keyfile, "wb") as f:
            f.write(key.private_bytes(
                serialization.Encoding.PEM,
                serialization.PrivateFormat.PKCS8,
                serialization.NoEncryption(),
            ))
        _cert_files = (certfile, keyfile)
        return _cert_files


def tls13_server_context() -> ssl.SSLContext:
    context = ssl.SSLContext(ssl.PROTOCOL_TLS_SERVER)
    context.minimum_version = ssl.TLSVersion.TLSv1_3
    context.num_tickets = 0
    context.load_cert_chain(*reflector_certificate())
    return context


def extract_sni(data: bytes) -> Optional[str]:
    """server_name from a TLS ClientHello record, or None"""
    try:
        if len(data) < 5 or data[0] != 0x16:
            return None
        (record_len,) = struct.unpack("!H", data[3:5])
        body = data[5:5 + record_len]
        if not body or body[0] != 0x01:
            return None
        pos = 4 + 2 + 32  # handshake header, client_version, random
        session_id_len = body[pos]
        pos += 1 + session_id_len
        (cipher_len,) = struct.unpack("!H", body[pos:pos + 2])
        pos += 2 + cipher_len
        compression_len = body[pos]
        pos += 1 + compression_len
        (extensions_len,) = struct.unpack("!H", body[pos:pos + 2])
        pos += 2
        end = min(len(body), pos + extensions_len)
        while pos + 4 <= end:
            ext_type, ext_len = struct.unpack("!HH", body[pos:pos + 4])
            pos += 4
            if ext_type == 0:
                # server_name_list length, name_type, name length
                name_type = body[pos + 2]
                (name_len,) = struct.unpack("!H", body[pos + 3:pos + 5])
                if name_type != 0:
                    return None
                return body[pos + 5:pos + 5 + name_len].decode("ascii", errors="ignore").lower()
            pos += ext_len
    except (IndexError, struct.error):
        return None
    return None


def peek_client_hello(sock: socket.socket, timeout: float = HANDSHAKE_TIMEOUT) -> bytes:
    """First TLS record, read with MSG_PEEK so the TLS layer still sees it"""
    deadline = time.monotonic() + timeout
    data = b""
    while time.monotonic() < deadline:
        try:
            data = sock.recv(MAX_RECORD, socket.MSG_PEEK)
        except (socket.timeout, OSError):
            return data
        if not data:
            return data
        if len(data) >= 5 and len(data) >= 5 + struct.unpack("!H", data[3:5])[0]:
            return data
        time.sleep(0.005)
    return data


class SniReflector(SimEndpoint):
    """Reflector endpoint; address is set by start()"""

    address = None

    def __init__(self, scenario: CensorScenario, role: str = CENSOR, label: str = "test",
                 transcript: Optional[Transcript] = None, upstream: Optional["SniReflector"] = None):
        super().__init__(scenario, role, label, transcript)
        self.context = tls13_server_context()
        self.upstream = upstream

    def blocks(self, sni: Optional[str]) -> bool:
        return self.censoring and sni is not None and sni in self.scenario.sni_blocklist

    def start(self) -> "SniReflector":
        server = self._bind(socketserver.ThreadingTCPServer, _ReflectorHandler)
        self.address = self._serve(server)
        return self


class _ReflectorHandler(socketserver.BaseRequestHandler):
    def handle(self):
        endpoint: SniReflector = self.server.endpoint
        sock: socket.socket = self.request
        peer = f"{self.client_address[0]}:{self.client_address[1]}"
        sock.settimeout(HANDSHAKE_TIMEOUT)

        hello = peek_client_hello(sock)
        sni = extract_sni(hello)
        endpoint.transcript.append("tls", "client_hello", peer, sni=sni)

        if endpoint.blocks(sni):
            endpoint.transcript.append("tls", "reset", peer, sni=sni)
            reset_connection(sock)
            return

        if endpoint.upstream is not None:
            _pass_through(sock, endpoint, peer, sni)
            return

        try:
            tls = endpoint.context.wrap_socket(sock, server_side=True)
        except (ssl.SSLError, OSError) as e:
            endpoint.transcript.append("tls", "handshake_failed", peer, sni=sni, error=str(e))
            return
        endpoint.transcript.append("tls", "handshake_ok", peer, sni=sni)

        try:
            data = tls.recv(4096)
            if data:
                endpoint.transcript.append("tls", "app_data", peer, sni=sni, length=len(data))
        except (ssl.SSLError, OSError):
            pass
        finally:
            tls.close()


def _pass_through(sock: socket.socket, endpoint: SniReflector, peer: str, sni: Optional[str]):
    try:
        upstream = socket.create_connection(tuple(endpoint.upstream.address), timeout=HANDSHAKE_TIMEOUT)
    except OSError as e:
        endpoint.transcript.append("tls", "upstream_failed", peer, sni=sni, error=str(e))
        reset_connection(sock)
        return
    endpoint.transcript.append("tls", "forward", peer, sni=sni)
    with upstream:
        relay_streams(sock, upstream, HANDSHAKE_TIMEOUT)


def spawn_sni_sim(scenario: CensorScenario, role: str = CENSOR, label: str = "test",
                  transcript: Optional[Transcript] = None) -> SniReflector:
    return SniReflector(scenario, role, label, transcript).start()
