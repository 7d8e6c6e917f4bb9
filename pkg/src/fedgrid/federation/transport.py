"""Stream-socket transport speaking the frame codec.

Protocol: a client connects and sends ``REGISTER`` (payload ``[m]``, its
parameter count); the coordinator answers ``ACK``. Each round the
coordinator sends ``PARAMS_DOWN`` and the client replies ``DELTA_UP``. An
``ACK`` with round ``SHUTDOWN_ROUND`` ends the session.
"""

from __future__ import annotations

import socket

import numpy as np

from .codec import HEADER_SIZE, MessageKind, RoundMessage, TruncatedFrameError, decode, encode, frame_length
from .rounds import SHUTDOWN_ROUND, Client, ProtocolError


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            raise TruncatedFrameError(f"connection closed after {len(buf)} of {n} bytes")
        buf.extend(chunk)
    return bytes(buf)


def read_frame(sock: socket.socket) -> RoundMessage:
    header = _recv_exact(sock, HEADER_SIZE)
    rest = _recv_exact(sock, frame_length(header) - HEADER_SIZE)
    return decode(header + rest)


def send_frame(sock: socket.socket, msg: RoundMessage) -> None:
    sock.sendall(encode(msg))


class RemoteClient:
    """Coordinator-side handle for a client connected over a socket."""

    def __init__(self, env_id: int, sock: socket.socket, theta_dim: int):
        self.env_id = env_id
        self.sock = sock
        self.theta_dim = theta_dim

    def exchange(self, msg: RoundMessage, local_steps: int) -> RoundMessage:
        if msg.payload.shape[0] != self.theta_dim:
            raise ProtocolError(f"env {self.env_id} registered {self.theta_dim} params, got {msg.payload.shape[0]}")
        send_frame(self.sock, msg)
        return read_frame(self.sock)


class SocketCoordinator:
    def __init__(self, host: str = "127.0.0.1", port: int = 0, timeout: float | None = 60.0):
        self.listener = socket.create_server((host, port))
        self.listener.settimeout(timeout)
        self.timeout = timeout
        self.clients: dict[int, RemoteClient] = {}

    @property
    def address(self) -> tuple[str, int]:
        return self.listener.getsockname()[:2]

    def accept(self, n_clients: int) -> list[RemoteClient]:
        while len(self.clients) < n_clients:
            conn, _ = self.listener.accept()
            conn.settimeout(self.timeout)
            reg = read_frame(conn)
            if reg.kind != MessageKind.REGISTER or reg.payload.shape != (1,):
                conn.close()
                raise ProtocolError(f"expected REGISTER, got {reg.kind.name}")
            if reg.env_id in self.clients:
                conn.close()
                raise ProtocolError(f"env {reg.env_id} registered twice")
            self.clients[reg.env_id] = RemoteClient(reg.env_id, conn, int(reg.payload[0]))
            send_frame(conn, RoundMessage(MessageKind.ACK, 0, reg.env_id, np.empty(0)))
        return [self.clients[e] for e in sorted(self.clients)]

    def close(self) -> None:
        for c in self.clients.values():
            try:
                send_frame(c.sock, RoundMessage(MessageKind.ACK, SHUTDOWN_ROUND, c.env_id, np.empty(0)))
            except OSError:
                pass
            c.sock.close()
        self.clients.clear()
        self.listener.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def serve_client(client: Client, address: tuple[str, int], local_steps: int, timeout: float | None = 60.0) -> int:
    """Run ``client`` against a coordinator until shutdown; returns rounds served."""
    served = 0
    with socket.create_connection(address, timeout=timeout) as sock:
        send_frame(sock, client.register_message())
        ack = read_frame(sock)
        if ack.kind != MessageKind.ACK:
            raise ProtocolError(f"registration not acknowledged: {ack.kind.name}")
        while True:
            msg = read_frame(sock)
            if msg.kind == MessageKind.ACK and msg.round == SHUTDOWN_ROUND:
                return served
            send_frame(sock, client.handle(msg, local_steps))
            served += 1
