"""Messages and transports between user agents and the coordinator.

Two message types cross the boundary: a `TradeProposal` carrying one
user's pairwise trade vectors, and a `CoordinatorBroadcast` carrying
that user's consensus row, dual row, the next penalty weight, and a
completion flag.  Both serialize to length-prefixed binary frames
(`[u32 length][u8 tag][payload]`, little-endian, length counting tag
plus payload) so the privacy property can be checked on raw bytes.

The in-process transport moves the same encoded frames through queues;
the socket transport moves them over TCP.  Both capture every frame in
`wire_frames` for auditing, and agents drive both through the same
`run_agent_loop`, which keeps runs bit-identical across transports.
"""

from __future__ import annotations

import queue
import selectors
import socket
import struct
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import DecodeError, ProtocolViolation, SynchronizationTimeout

TAG_PROPOSAL = 1
TAG_BROADCAST = 2
MAX_FRAME = 1 << 26


def _check_rows(rows, what) -> dict[int, np.ndarray]:
    out = {}
    length = None
    for j, vec in rows.items():
        vec = np.asarray(vec, dtype=np.float64)
        if vec.ndim != 1:
            raise ValueError(f"{what}[{j}] must be a vector")
        if length is None:
            length = vec.shape[0]
        elif vec.shape[0] != length:
            raise ValueError(f"{what} rows must share one length")
        out[int(j)] = vec
    return out


@dataclass
class TradeProposal:
    """One user's trade vectors for one round, keyed by counterparty id."""

    user_id: int
    iteration: int
    trades: dict[int, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        self.user_id = int(self.user_id)
        self.iteration = int(self.iteration)
        if self.iteration < 1:
            raise ValueError("iteration counts from 1")
        self.trades = _check_rows(self.trades, "trades")
        if self.user_id in self.trades:
            raise ValueError(f"user {self.user_id} cannot trade with itself")


@dataclass
class CoordinatorBroadcast:
    """Per-user reply: consensus row, dual row, next penalty weight, done."""

    iteration: int
    aux_row: dict[int, np.ndarray]
    dual_row: dict[int, np.ndarray]
    rho: float
    done: bool

    def __post_init__(self):
        self.iteration = int(self.iteration)
        self.rho = float(self.rho)
        self.done = bool(self.done)
        if self.rho <= 0:
            raise ValueError("rho must be positive")
        self.aux_row = _check_rows(self.aux_row, "aux_row")
        self.dual_row = _check_rows(self.dual_row, "dual_row")
        if set(self.aux_row) != set(self.dual_row):
            raise ValueError("aux_row and dual_row must cover the same ids")


def _encode_rows(rows: dict[int, np.ndarray]) -> tuple[bytes, int]:
    ids = sorted(rows)
    h = rows[ids[0]].shape[0] if ids else 0
    parts = []
    for j in ids:
        parts.append(struct.pack("<I", j))
        parts.append(rows[j].astype("<f8").tobytes())
    return b"".join(parts), h


def encode(message) -> bytes:
    """Serialize a message to one wire frame (length prefix included)."""
    if isinstance(message, TradeProposal):
        rows, h = _encode_rows(message.trades)
        payload = struct.pack("<IIII", message.user_id, message.iteration,
                              len(message.trades), h) + rows
        tag = TAG_PROPOSAL
    elif isinstance(message, CoordinatorBroadcast):
        ids = sorted(message.aux_row)
        h = message.aux_row[ids[0]].shape[0] if ids else 0
        parts = [struct.pack("<IdBII", message.iteration, message.rho,
                             int(message.done), len(ids), h)]
        for j in ids:
            parts.append(struct.pack("<I", j))
            parts.append(message.aux_row[j].astype("<f8").tobytes())
            parts.append(message.dual_row[j].astype("<f8").tobytes())
        payload = b"".join(parts)
        tag = TAG_BROADCAST
    else:
        raise TypeError(f"cannot encode {type(message).__name__}")
    body = struct.pack("<B", tag) + payload
    if len(body) > MAX_FRAME:
        raise ValueError(f"frame body of {len(body)} bytes exceeds {MAX_FRAME}")
    return struct.pack("<I", len(body)) + body


def _take(frame: bytes, offset: int, fmt: str):
    size = struct.calcsize(fmt)
    if offset + size > len(frame):
        raise DecodeError(f"truncated payload at offset {offset}")
    return struct.unpack_from(fmt, frame, offset), offset + size


def _take_floats(frame: bytes, offset: int, count: int) -> tuple[np.ndarray, int]:
    size = 8 * count
    if offset + size > len(frame):
        raise DecodeError(f"truncated float block at offset {offset}")
    vec = np.frombuffer(frame, dtype="<f8", count=count, offset=offset)
    return vec.astype(np.float64), offset + size


def decode(frame: bytes):
    """Parse one full wire frame back into a message."""
    if len(frame) < 5:
        raise DecodeError(f"frame of {len(frame)} bytes is shorter than the "
                          f"5-byte header")
    (length,) = struct.unpack_from("<I", frame, 0)
    if length > MAX_FRAME:
        raise DecodeError(f"length prefix {length} at offset 0 exceeds the "
                          f"{MAX_FRAME} byte cap")
    if length != len(frame) - 4:
        raise DecodeError(f"length prefix {length} at offset 0 does not match "
                          f"body of {len(frame) - 4} bytes")
    tag = frame[4]
    off = 5
    if tag == TAG_PROPOSAL:
        (user_id, iteration, n_rows, h), off = _take(frame, off, "<IIII")
        trades = {}
        for _ in range(n_rows):
            (j,), off = _take(frame, off, "<I")
            if j in trades:
                raise DecodeError(f"repeated counterparty {j} at offset {off}")
            trades[j], off = _take_floats(frame, off, h)
        if off != len(frame):
            raise DecodeError(f"{len(frame) - off} trailing bytes at offset {off}")
        try:
            return TradeProposal(user_id, iteration, trades)
        except ValueError as exc:
            raise DecodeError(str(exc)) from exc
    if tag == TAG_BROADCAST:
        (iteration, rho, done, n_rows, h), off = _take(frame, off, "<IdBII")
        aux, duals = {}, {}
        for _ in range(n_rows):
            (j,), off = _take(frame, off, "<I")
            if j in aux:
                raise DecodeError(f"repeated counterparty {j} at offset {off}")
            aux[j], off = _take_floats(frame, off, h)
            duals[j], off = _take_floats(frame, off, h)
        if off != len(frame):
            raise DecodeError(f"{len(frame) - off} trailing bytes at offset {off}")
        try:
            return CoordinatorBroadcast(iteration, aux, duals, rho, bool(done))
        except ValueError as exc:
            raise DecodeError(str(exc)) from exc
    raise DecodeError(f"unknown message tag {tag} at offset 4")


def split_frames(buf: bytes):
    """Split a byte buffer into complete frames plus the unread tail."""
    frames = []
    while len(buf) >= 4:
        (length,) = struct.unpack_from("<I", buf, 0)
        if length > MAX_FRAME:
            raise DecodeError(f"length prefix {length} exceeds the "
                              f"{MAX_FRAME} byte cap")
        if len(buf) < 4 + length:
            break
        frames.append(bytes(buf[:4 + length]))
        buf = buf[4 + length:]
    return frames, buf


class QueueChannel:
    """Agent endpoint of the in-process transport."""

    def __init__(self, transport: "InProcTransport", user_id: int):
        self._transport = transport
        self._user_id = int(user_id)
        self._inbox = transport._agent_inboxes[int(user_id)]

    def send(self, message):
        frame = encode(message)
        self._transport.wire_frames.append(frame)
        self._transport._proposal_queue.put(frame)

    def recv(self, timeout: float = 300.0):
        try:
            frame = self._inbox.get(timeout=timeout)
        except queue.Empty:
            raise SynchronizationTimeout(
                f"user {self._user_id}: no broadcast within {timeout}s")
        return decode(frame)

    def close(self):
        pass


class InProcTransport:
    """Queue-backed transport: same frames, no sockets.

    Agents obtain endpoints via `channel(user_id)`; the coordinator
    polls proposals and sends per-user broadcasts.  Every frame that
    crosses is recorded in `wire_frames`.
    """

    def __init__(self, expected_ids):
        self.expected_ids = tuple(sorted(int(u) for u in expected_ids))
        self.wire_frames: list[bytes] = []
        self._proposal_queue: queue.Queue = queue.Queue()
        self._agent_inboxes = {u: queue.Queue() for u in self.expected_ids}
        self._last_broadcast: dict[int, bytes] = {}

    def channel(self, user_id: int) -> QueueChannel:
        if int(user_id) not in self._agent_inboxes:
            raise ProtocolViolation(f"unknown user id {user_id}")
        return QueueChannel(self, user_id)

    def poll(self, timeout: float):
        try:
            frame = self._proposal_queue.get(timeout=max(timeout, 0.0))
        except queue.Empty:
            return None
        message = decode(frame)
        if not isinstance(message, TradeProposal):
            raise ProtocolViolation(
                f"expected a trade proposal, got {type(message).__name__}")
        return message

    def send_to(self, user_id: int, broadcast: CoordinatorBroadcast):
        frame = encode(broadcast)
        self.wire_frames.append(frame)
        self._last_broadcast[int(user_id)] = frame
        self._agent_inboxes[int(user_id)].put(frame)

    def rerequest(self, user_id: int) -> bool:
        frame = self._last_broadcast.get(int(user_id))
        if frame is None:
            return False
        self.wire_frames.append(frame)
        self._agent_inboxes[int(user_id)].put(frame)
        return True

    def close(self):
        pass


class SocketChannel:
    """Agent endpoint of the socket transport: one TCP connection."""

    def __init__(self, host: str, port: int, timeout: float = 300.0,
                 retries: int = 40):
        last = None
        for _ in range(retries):
            try:
                self._sock = socket.create_connection((host, port), timeout=5.0)
                break
            except OSError as exc:
                last = exc
                time.sleep(0.25)
        else:
            raise ConnectionError(f"cannot reach coordinator at {host}:{port}: {last}")
        self._sock.settimeout(timeout)
        self._buf = b""
        self._pending: list[bytes] = []

    def send(self, message):
        self._sock.sendall(encode(message))

    def recv(self, timeout: float | None = None):
        if timeout is not None:
            self._sock.settimeout(timeout)
        while not self._pending:
            try:
                chunk = self._sock.recv(65536)
            except socket.timeout:
                raise SynchronizationTimeout("no broadcast before the socket timeout")
            if not chunk:
                raise ProtocolViolation("coordinator closed the connection")
            self._buf += chunk
            frames, self._buf = split_frames(self._buf)
            self._pending.extend(frames)
        return decode(self._pending.pop(0))

    def close(self):
        try:
            self._sock.close()
        except OSError:
            pass


class SocketTransport:
    """Coordinator side of the TCP transport.

    Single-threaded: `poll` pumps accepts and reads, returning decoded
    proposals one at a time.  A connection is bound to a user id by the
    first proposal it delivers; broadcasts go back over that connection.
    """

    def __init__(self, expected_ids, host: str = "127.0.0.1", port: int = 0):
        self.expected_ids = tuple(sorted(int(u) for u in expected_ids))
        self.wire_frames: list[bytes] = []
        self._listener = socket.create_server((host, port))
        self._listener.setblocking(False)
        self.host, self.port = self._listener.getsockname()[:2]
        self._sel = selectors.DefaultSelector()
        self._sel.register(self._listener, selectors.EVENT_READ, "listen")
        self._bufs: dict[socket.socket, bytes] = {}
        self._conn_user: dict[socket.socket, int] = {}
        self._user_conn: dict[int, socket.socket] = {}
        self._ready: list[TradeProposal] = []
        self._last_broadcast: dict[int, bytes] = {}

    def _admit(self, frame: bytes, conn: socket.socket):
        self.wire_frames.append(frame)
        message = decode(frame)
        if not isinstance(message, TradeProposal):
            raise ProtocolViolation(
                f"expected a trade proposal, got {type(message).__name__}")
        bound = self._conn_user.get(conn)
        if bound is None:
            if message.user_id in self._user_conn:
                raise ProtocolViolation(
                    f"second connection claims user {message.user_id}")
            if message.user_id not in self.expected_ids:
                raise ProtocolViolation(f"unknown user id {message.user_id}")
            self._conn_user[conn] = message.user_id
            self._user_conn[message.user_id] = conn
        elif bound != message.user_id:
            raise ProtocolViolation(
                f"connection bound to user {bound} sent a proposal for "
                f"user {message.user_id}")
        self._ready.append(message)

    def _pump(self, timeout: float):
        events = self._sel.select(timeout=max(timeout, 0.0))
        for key, _ in events:
            if key.data == "listen":
                conn, _addr = self._listener.accept()
                conn.setblocking(False)
                self._sel.register(conn, selectors.EVENT_READ, "conn")
                self._bufs[conn] = b""
                continue
            conn = key.fileobj
            try:
                chunk = conn.recv(65536)
            except (BlockingIOError, InterruptedError):
                continue
            except OSError:
                self._drop(conn)
                continue
            if not chunk:
                self._drop(conn)
                continue
            self._bufs[conn] += chunk
            frames, self._bufs[conn] = split_frames(self._bufs[conn])
            for frame in frames:
                self._admit(frame, conn)

    def _drop(self, conn: socket.socket):
        self._sel.unregister(conn)
        uid = self._conn_user.pop(conn, None)
        if uid is not None:
            self._user_conn.pop(uid, None)
        self._bufs.pop(conn, None)
        conn.close()

    def poll(self, timeout: float):
        if self._ready:
            return self._ready.pop(0)
        deadline = time.monotonic() + max(timeout, 0.0)
        while not self._ready:
            left = deadline - time.monotonic()
            if left <= 0:
                return None
            self._pump(min(left, 0.25))
        return self._ready.pop(0)

    def send_to(self, user_id: int, broadcast: CoordinatorBroadcast):
        conn = self._user_conn.get(int(user_id))
        if conn is None:
            raise ProtocolViolation(f"no connection bound to user {user_id}")
        frame = encode(broadcast)
        self.wire_frames.append(frame)
        self._last_broadcast[int(user_id)] = frame
        conn.setblocking(True)
        try:
            conn.sendall(frame)
        finally:
            conn.setblocking(False)

    def rerequest(self, user_id: int) -> bool:
        frame = self._last_broadcast.get(int(user_id))
        conn = self._user_conn.get(int(user_id))
        if frame is None or conn is None:
            return False
        self.wire_frames.append(frame)
        conn.setblocking(True)
        try:
            conn.sendall(frame)
        finally:
            conn.setblocking(False)
        return True

    def close(self):
        for conn in list(self._bufs):
            self._drop(conn)
        self._sel.close()
        self._listener.close()


def barrier_collect(transport, n_expected: int, iteration: int,
                    timeout: float = 60.0) -> list[TradeProposal]:
    """Collect exactly one proposal per user for the given round.

    Proposals tagged with another round trigger one re-send of that
    user's last broadcast; a second bad tag or any duplicate is a
    protocol violation.  Running out of time names the silent users.
    """
    if n_expected < 1:
        raise ValueError("n_expected must be at least 1")
    proposals: dict[int, TradeProposal] = {}
    retried: set[int] = set()
    deadline = time.monotonic() + timeout
    while len(proposals) < n_expected:
        left = deadline - time.monotonic()
        if left <= 0:
            missing = tuple(u for u in transport.expected_ids
                            if u not in proposals)
            raise SynchronizationTimeout(
                f"round {iteration}: {n_expected - len(proposals)} of "
                f"{n_expected} proposals missing after {timeout}s "
                f"(users {list(missing)})", missing=missing)
        message = transport.poll(left)
        if message is None:
            continue
        if message.user_id in proposals:
            raise ProtocolViolation(
                f"round {iteration}: duplicate proposal from user "
                f"{message.user_id}")
        if message.iteration != iteration:
            if message.user_id in retried or not transport.rerequest(message.user_id):
                raise ProtocolViolation(
                    f"round {iteration}: user {message.user_id} sent a "
                    f"proposal tagged for round {message.iteration}")
            retried.add(message.user_id)
            continue
        proposals[message.user_id] = message
    return [proposals[u] for u in sorted(proposals)]


def run_agent_loop(agent, channel, rho1: float):
    """Drive one agent through the negotiation until the coordinator
    signals completion.  Identical over both transports."""
    from .agent import outbound_message

    agent.rho = float(rho1)
    k = 1
    while True:
        agent.iteration = k
        agent.solve_llp()
        message = outbound_message(agent)
        channel.send(message)
        while True:
            broadcast = channel.recv()
            if broadcast.iteration == k:
                break
            if broadcast.iteration == k - 1:
                channel.send(message)
                continue
            raise ProtocolViolation(
                f"user {agent.user_id}: expected a broadcast for round {k}, "
                f"got round {broadcast.iteration}")
        agent.receive(broadcast)
        if broadcast.done:
            return agent
        k += 1
