"""Socket pub/sub: a small broker plus the client-side backend.

Records are length-prefixed envelope bytes (u32 little-endian prefix).
Connections register topic filters with SUBSCRIBE control envelopes; the
broker forwards every other envelope to each connection holding a matching
filter. Per-connection reads are sequential, so a SUBSCRIBE is always
processed before anything the same peer publishes afterwards; the round
protocol builds its no-loss guarantee on exactly that ordering.
"""

import socket
import struct
import threading
import time

from fedanom.errors import TransportError, TruncatedPayloadError, WireFormatError
from fedanom.transport.envelope import (MAX_RECORD_BYTES, Envelope, MsgType,
                                        decode_envelope, encode_envelope,
                                        topic_matches)
from fedanom.transport.loopback import Subscription

DEFAULT_HOST = "127.0.0.1"
DEFAULT_PORT = 1883
CONNECT_ATTEMPTS = 6
BACKOFF_BASE_SECONDS = 0.1


def _read_exact(sock, n):
    # returns None on end-of-stream at a record boundary
    chunks = []
    got = 0
    while got < n:
        try:
            chunk = sock.recv(n - got)
        except OSError:
            return None if got == 0 else b"".join(chunks)
        if not chunk:
            return None if got == 0 else b"".join(chunks)
        chunks.append(chunk)
        got += len(chunk)
    return b"".join(chunks)


def read_frame(sock):
    """One framed record, or None on clean end-of-stream."""
    header = _read_exact(sock, 4)
    if header is None:
        return None
    if len(header) < 4:
        raise TruncatedPayloadError("stream ended inside frame prefix")
    (length,) = struct.unpack("<I", header)
    if length > MAX_RECORD_BYTES:
        raise WireFormatError(f"frame of {length} bytes exceeds limit")
    body = _read_exact(sock, length)
    if body is None or len(body) < length:
        raise TruncatedPayloadError("stream ended inside frame body")
    return body


def write_frame(sock, blob: bytes):
    sock.sendall(struct.pack("<I", len(blob)) + blob)


class _BrokerConn:
    def __init__(self, sock):
        self.sock = sock
        self.filters = []
        self.write_lock = threading.Lock()


class TcpBroker:
    """Accepts connections and fans envelopes out by topic filter."""

    def __init__(self, host: str = DEFAULT_HOST, port: int = DEFAULT_PORT):
        self.host = host
        self.port = port
        self._listener = None
        self._conns = []
        self._lock = threading.Lock()
        self._threads = []
        self._stopping = threading.Event()

    def start(self):
        listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        listener.bind((self.host, self.port))
        listener.listen()
        self._listener = listener
        self.port = listener.getsockname()[1]
        t = threading.Thread(target=self._accept_loop, daemon=True,
                             name="broker-accept")
        t.start()
        self._threads.append(t)
        return self

    @property
    def address(self):
        return self.host, self.port

    def _accept_loop(self):
        while not self._stopping.is_set():
            try:
                sock, _ = self._listener.accept()
            except OSError:
                return
            conn = _BrokerConn(sock)
            with self._lock:
                self._conns.append(conn)
            t = threading.Thread(target=self._serve, args=(conn,),
                                 daemon=True, name="broker-conn")
            t.start()
            self._threads.append(t)

    def _serve(self, conn):
        try:
            while True:
                blob = read_frame(conn.sock)
                if blob is None:
                    return
                env = decode_envelope(blob)
                if env.msg_type == MsgType.SUBSCRIBE:
                    conn.filters.append(env.payload.decode("utf-8"))
                    # echo as ack so subscribe() can block until the filter
                    # is live; prevents races across connections
                    with conn.write_lock:
                        write_frame(conn.sock, blob)
                elif env.msg_type == MsgType.UNSUBSCRIBE:
                    f = env.payload.decode("utf-8")
                    if f in conn.filters:
                        conn.filters.remove(f)
                elif env.msg_type == MsgType.SHUTDOWN:
                    self.stop()
                    return
                else:
                    self._forward(env.topic, blob)
        except (TransportError, OSError):
            return
        finally:
            self._drop(conn)

    def _forward(self, topic, blob):
        with self._lock:
            targets = [c for c in self._conns
                       if any(topic_matches(f, topic) for f in c.filters)]
        for conn in targets:
            try:
                with conn.write_lock:
                    write_frame(conn.sock, blob)
            except OSError:
                self._drop(conn)

    def _drop(self, conn):
        with self._lock:
            if conn in self._conns:
                self._conns.remove(conn)
        try:
            conn.sock.close()
        except OSError:
            pass

    def stop(self):
        if self._stopping.is_set():
            return
        self._stopping.set()
        if self._listener is not None:
            try:
                self._listener.close()
            except OSError:
                pass
        with self._lock:
            conns = list(self._conns)
            self._conns.clear()
        for conn in conns:
            try:
                conn.sock.close()
            except OSError:
                pass

    def serve_forever(self, poll_seconds: float = 0.2):
        """Block until stop() is called or a SHUTDOWN envelope arrives."""
        while not self._stopping.is_set():
            time.sleep(poll_seconds)

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()


def shutdown_broker(host: str, port: int):
    """Ask a running broker to stop; no-op if it is already gone."""
    try:
        with socket.create_connection((host, port), timeout=2.0) as sock:
            env = Envelope(topic="broker/control", msg_type=MsgType.SHUTDOWN,
                           round=0, sender_id="control")
            write_frame(sock, encode_envelope(env))
    except OSError:
        pass


class TcpBackend:
    """Publish/subscribe over a broker connection, with reconnect backoff
    only at connect time: the round protocol treats a mid-run drop as fatal.
    """

    def __init__(self, host: str = DEFAULT_HOST, port: int = DEFAULT_PORT,
                 connect_attempts: int = CONNECT_ATTEMPTS,
                 backoff_base: float = BACKOFF_BASE_SECONDS):
        self.host = host
        self.port = port
        self._sock = self._connect(connect_attempts, backoff_base)
        self._subs = []
        self._subs_lock = threading.Lock()
        self._write_lock = threading.Lock()
        self._closed = threading.Event()
        self._sub_seq = 0
        self._acked = set()
        self._ack_cond = threading.Condition()
        self._reader = threading.Thread(target=self._read_loop, daemon=True,
                                        name="backend-reader")
        self._reader.start()

    def _connect(self, attempts, base):
        last = None
        for k in range(attempts):
            try:
                return socket.create_connection((self.host, self.port))
            except OSError as err:
                last = err
                if k < attempts - 1:
                    time.sleep(base * 2 ** k)
        raise TransportError(
            f"broker {self.host}:{self.port} unreachable after "
            f"{attempts} attempts: {last}")

    def _read_loop(self):
        while not self._closed.is_set():
            try:
                blob = read_frame(self._sock)
            except (TransportError, OSError):
                return
            if blob is None:
                return
            env = decode_envelope(blob)
            if env.msg_type == MsgType.SUBSCRIBE:
                with self._ack_cond:
                    self._acked.add(env.round)
                    self._ack_cond.notify_all()
                continue
            with self._subs_lock:
                subs = [s for s in self._subs
                        if topic_matches(s.topic_filter, env.topic)]
            for sub in subs:
                sub._deliver(env)

    def publish(self, env: Envelope):
        if self._closed.is_set():
            raise TransportError("backend is closed")
        blob = encode_envelope(env)
        try:
            with self._write_lock:
                write_frame(self._sock, blob)
        except OSError as err:
            raise TransportError(f"publish failed: {err}") from None

    def subscribe(self, topic_filter: str,
                  ack_timeout: float = 10.0) -> Subscription:
        """Register a filter; blocks until the broker confirms it is live."""
        sub = Subscription(topic_filter)
        with self._subs_lock:
            self._subs.append(sub)
            self._sub_seq += 1
            seq = self._sub_seq
        control = Envelope(topic="broker/control", msg_type=MsgType.SUBSCRIBE,
                           round=seq, sender_id="",
                           payload=topic_filter.encode("utf-8"))
        self.publish(control)
        deadline = time.monotonic() + ack_timeout
        with self._ack_cond:
            while seq not in self._acked:
                remaining = deadline - time.monotonic()
                if remaining <= 0 or self._closed.is_set():
                    raise TransportError(
                        f"no broker ack for subscription {topic_filter!r}")
                self._ack_cond.wait(timeout=remaining)
            self._acked.discard(seq)
        return sub

    def close(self):
        if self._closed.is_set():
            return
        self._closed.set()
        try:
            self._sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self._sock.close()
        self._reader.join(timeout=2.0)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
