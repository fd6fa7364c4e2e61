"""In-process pub/sub hub.

Every published envelope is run through the byte codec, so loopback and TCP
deliver byte-identical content; the only differences between backends are
timing and threading. Deterministic when used from a single thread: fan-out
follows subscription order, and per-publisher FIFO order is preserved.

An optional fixed per-message delay models network latency for timing tests.
"""

import queue
import threading
import time

from fedanom.errors import TransportError
from fedanom.transport.envelope import (FRAME_PREFIX_BYTES, decode_envelope,
                                        encode_envelope, topic_matches)


class Subscription:
    """Delivery stream for one topic filter."""

    def __init__(self, topic_filter: str):
        self.topic_filter = topic_filter
        self._queue = queue.Queue()

    def get(self, timeout=None):
        """Next envelope; raises TransportError if none arrives in time."""
        try:
            if timeout == 0:
                return self._queue.get_nowait()
            return self._queue.get(timeout=timeout)
        except queue.Empty:
            raise TransportError(
                f"no message on {self.topic_filter!r} within "
                f"{timeout!r} seconds") from None

    def try_get(self):
        try:
            return self._queue.get_nowait()
        except queue.Empty:
            return None

    def _deliver(self, env):
        self._queue.put(env)


class LoopbackHub:
    """Shared in-process broker; participants publish and subscribe on it."""

    def __init__(self, message_delay: float = 0.0):
        if message_delay < 0:
            raise ValueError("message_delay must be non-negative")
        self.message_delay = message_delay
        self._subs = []
        self._lock = threading.Lock()
        self.messages_delivered = 0
        self.bytes_moved = 0

    def subscribe(self, topic_filter: str) -> Subscription:
        if not topic_filter:
            raise ValueError("topic filter must be non-empty")
        sub = Subscription(topic_filter)
        with self._lock:
            self._subs.append(sub)
        return sub

    def unsubscribe(self, sub: Subscription):
        with self._lock:
            if sub in self._subs:
                self._subs.remove(sub)

    def publish(self, env):
        # round-trip through the codec so subscribers see exactly what a
        # socket subscriber would see
        blob = encode_envelope(env)
        if self.message_delay:
            time.sleep(self.message_delay)
        with self._lock:
            targets = [s for s in self._subs
                       if topic_matches(s.topic_filter, env.topic)]
        for sub in targets:
            sub._deliver(decode_envelope(blob))
            self.messages_delivered += 1
            self.bytes_moved += FRAME_PREFIX_BYTES + len(blob)

    def close(self):
        with self._lock:
            self._subs.clear()


class LoopbackBackend:
    """Per-participant handle onto a shared LoopbackHub.

    Mirrors the TCP backend surface so orchestration code is
    backend-agnostic.
    """

    def __init__(self, hub: LoopbackHub):
        self.hub = hub
        self._subs = []

    def publish(self, env):
        self.hub.publish(env)

    def subscribe(self, topic_filter: str) -> Subscription:
        sub = self.hub.subscribe(topic_filter)
        self._subs.append(sub)
        return sub

    def close(self):
        for sub in self._subs:
            self.hub.unsubscribe(sub)
        self._subs.clear()
