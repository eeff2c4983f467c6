"""Length-prefixed framing over TCP, optionally wrapped in mutual TLS.

A frame is a 4-byte big-endian length followed by that many payload bytes.
Certificates are self-signed and pinned: each side trusts exactly the peer
certificate(s) it was given, so hostname checks are off.
"""

from __future__ import annotations

import datetime
import logging
import socket
import socketserver
import ssl
import struct
import threading
from pathlib import Path
from typing import Callable

from cryptography import x509
from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric import ec
from cryptography.x509.oid import NameOID

from .errors import TransportError

log = logging.getLogger(__name__)

MAX_FRAME = 16 * 1024 * 1024
_LEN = struct.Struct(">I")


def recv_exact(sock: socket.socket, size: int) -> bytes:
    buf = bytearray()
    while len(buf) < size:
        chunk = sock.recv(size - len(buf))
        if not chunk:
            raise TransportError(f"connection closed after {len(buf)} of {size} bytes")
        buf += chunk
    return bytes(buf)


def send_frame(sock: socket.socket, payload: bytes) -> None:
    if len(payload) > MAX_FRAME:
        raise TransportError(f"frame of {len(payload)} bytes exceeds limit")
    sock.sendall(_LEN.pack(len(payload)) + payload)


def recv_frame(sock: socket.socket) -> bytes | None:
    """Read one frame; ``None`` on a clean close between frames."""
    first = sock.recv(_LEN.size)
    if not first:
        return None
    header = first + recv_exact(sock, _LEN.size - len(first)) if len(first) < _LEN.size else first
    (length,) = _LEN.unpack(header)
    if length > MAX_FRAME:
        raise TransportError(f"peer announced {length}-byte frame")
    return recv_exact(sock, length)


def parse_addr(addr: str) -> tuple[str, int]:
    host, sep, port = addr.rpartition(":")
    if not sep or not port.isdigit():
        raise ValueError(f"address must be HOST:PORT, got {addr!r}")
    return host.strip("[]") or "0.0.0.0", int(port)


# --------------------------------------------------------------------------
# certificates and TLS contexts
# --------------------------------------------------------------------------

def make_self_signed(common_name: str, days: int = 365) -> tuple[bytes, bytes]:
    """Return ``(key_pem, cert_pem)`` for a fresh P-256 self-signed certificate."""
    key = ec.generate_private_key(ec.SECP256R1())
    name = x509.Name([x509.NameAttribute(NameOID.COMMON_NAME, common_name)])
    now = datetime.datetime.now(datetime.timezone.utc)
    cert = (
        x509.CertificateBuilder()
        .subject_name(name)
        .issuer_name(name)
        .public_key(key.public_key())
        .serial_number(x509.random_serial_number())
        .not_valid_before(now - datetime.timedelta(minutes=5))
        .not_valid_after(now + datetime.timedelta(days=days))
        .add_extension(x509.BasicConstraints(ca=True, path_length=0), critical=True)
        .add_extension(x509.SubjectAlternativeName([x509.DNSName(common_name)]), critical=False)
        .sign(key, hashes.SHA256())
    )
    key_pem = key.private_bytes(
        serialization.Encoding.PEM, serialization.PrivateFormat.PKCS8, serialization.NoEncryption()
    )
    return key_pem, cert.public_bytes(serialization.Encoding.PEM)


def write_self_signed(out_dir: str | Path, name: str) -> tuple[Path, Path]:
    out = Path(out_dir)
    key_pem, cert_pem = make_self_signed(name)
    key_path, cert_path = out / f"{name}.key", out / f"{name}.crt"
    key_path.write_bytes(key_pem)
    key_path.chmod(0o600)
    cert_path.write_bytes(cert_pem)
    return key_path, cert_path


def server_context(cert: str | Path, key: str | Path, client_ca: str | Path) -> ssl.SSLContext:
    ctx = ssl.SSLContext(ssl.PROTOCOL_TLS_SERVER)
    ctx.minimum_version = ssl.TLSVersion.TLSv1_2
    ctx.load_cert_chain(str(cert), str(key))
    ctx.load_verify_locations(str(client_ca))
    ctx.verify_mode = ssl.CERT_REQUIRED
    return ctx


def client_context(cert: str | Path, key: str | Path, server_ca: str | Path) -> ssl.SSLContext:
    ctx = ssl.SSLContext(ssl.PROTOCOL_TLS_CLIENT)
    ctx.minimum_version = ssl.TLSVersion.TLSv1_2
    ctx.load_cert_chain(str(cert), str(key))
    ctx.load_verify_locations(str(server_ca))
    ctx.check_hostname = False
    ctx.verify_mode = ssl.CERT_REQUIRED
    return ctx


# --------------------------------------------------------------------------
# client and server
# --------------------------------------------------------------------------

class FramedClient:
    """Request/response client; reconnects lazily after failures."""

    def __init__(self, addr: str | tuple[str, int], ssl_context: ssl.SSLContext | None = None,
                 timeout: float = 5.0) -> None:
        self.addr = parse_addr(addr) if isinstance(addr, str) else addr
        self.ssl_context = ssl_context
        self.timeout = timeout
        self._sock: socket.socket | None = None
        self._lock = threading.Lock()

    def _connect(self) -> socket.socket:
        raw = socket.create_connection(self.addr, timeout=self.timeout)
        if self.ssl_context is None:
            return raw
        try:
            return self.ssl_context.wrap_socket(raw, server_hostname=self.addr[0])
        except (ssl.SSLError, OSError):
            raw.close()
            raise

    def request(self, payload: bytes) -> bytes:
        with self._lock:
            try:
                if self._sock is None:
                    self._sock = self._connect()
                send_frame(self._sock, payload)
                reply = recv_frame(self._sock)
                if reply is None:
                    raise TransportError("server closed the connection")
                return reply
            except (OSError, TransportError) as exc:
                self._close()
                if isinstance(exc, TransportError):
                    raise
                raise TransportError(str(exc)) from exc

    def _close(self) -> None:
        if self._sock is not None:
            try:
                self._sock.close()
            except OSError:
                pass
            self._sock = None

    def close(self) -> None:
        with self._lock:
            self._close()


Handler = Callable[[bytes], bytes]


class _FrameHandler(socketserver.BaseRequestHandler):
    def handle(self) -> None:
        server: FramedServer = self.server  # type: ignore[assignment]
        sock = self.request
        try:
            if server.ssl_context is not None:
                sock = server.ssl_context.wrap_socket(sock, server_side=True)
            while True:
                frame = recv_frame(sock)
                if frame is None:
                    return
                send_frame(sock, server.handler(frame))
        except (OSError, TransportError, ssl.SSLError) as exc:
            log.debug("connection from %s ended: %s", self.client_address, exc)


class FramedServer(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, addr: tuple[str, int], handler: Handler,
                 ssl_context: ssl.SSLContext | None = None) -> None:
        self.handler = handler
        self.ssl_context = ssl_context
        super().__init__(addr, _FrameHandler)

    @property
    def address(self) -> str:
        host, port = self.server_address[:2]
        return f"{host}:{port}"

    def start(self) -> threading.Thread:
        t = threading.Thread(target=self.serve_forever, name="framed-server", daemon=True)
        t.start()
        return t

    def stop(self) -> None:
        self.shutdown()
        self.server_close()
