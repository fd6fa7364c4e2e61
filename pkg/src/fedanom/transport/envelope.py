"""Message envelope, topic scheme, and the byte codec shared by backends.

Wire layout of one envelope (all integers little-endian):

    topic_len   u16
    topic       UTF-8 bytes
    msg_type    u8
    round       u32
    sender_len  u8
    sender_id   UTF-8 bytes
    payload_len u32
    payload     raw bytes

Stream framing (TCP) adds a u32 length prefix in front of the whole record.
``sent_at`` is a local monotonic timestamp and never crosses the wire.
"""

import enum
import struct
import time
from dataclasses import dataclass, field

from fedanom.errors import TruncatedPayloadError, WireFormatError

FRAME_PREFIX_BYTES = 4
MAX_RECORD_BYTES = 1 << 28  # sanity bound against garbage length prefixes


class MsgType(enum.IntEnum):
    REGISTER = 1
    REGISTER_ACK = 2
    DATASET_ASSIGN = 3
    GLOBAL_MODEL = 4
    MODEL_UPDATE = 5
    MSE_SEQUENCE = 6
    GLOBAL_THRESHOLD = 7
    DONE = 8
    # broker control codes; never seen by application handlers
    SUBSCRIBE = 200
    UNSUBSCRIBE = 201
    SHUTDOWN = 202


@dataclass
class Envelope:
    topic: str
    msg_type: MsgType
    round: int
    sender_id: str
    payload: bytes = b""
    sent_at: float = field(default_factory=time.monotonic, compare=False)

    def __post_init__(self):
        if not self.topic:
            raise ValueError("topic must be non-empty")
        if not 0 <= self.round < 2 ** 32:
            raise ValueError("round out of u32 range")
        self.msg_type = MsgType(self.msg_type)


def encode_envelope(env: Envelope) -> bytes:
    topic = env.topic.encode("utf-8")
    sender = env.sender_id.encode("utf-8")
    if len(topic) > 0xFFFF:
        raise WireFormatError("topic too long")
    if len(sender) > 0xFF:
        raise WireFormatError("sender id too long")
    return b"".join([
        struct.pack("<H", len(topic)),
        topic,
        struct.pack("<BIB", int(env.msg_type), env.round, len(sender)),
        sender,
        struct.pack("<I", len(env.payload)),
        env.payload,
    ])


def decode_envelope(blob: bytes) -> Envelope:
    try:
        (topic_len,) = struct.unpack_from("<H", blob, 0)
        offset = 2
        if len(blob) < offset + topic_len:
            raise TruncatedPayloadError("envelope truncated in topic")
        topic = blob[offset:offset + topic_len].decode("utf-8")
        offset += topic_len
        msg_type, round_, sender_len = struct.unpack_from("<BIB", blob, offset)
        offset += 6
        if len(blob) < offset + sender_len:
            raise TruncatedPayloadError("envelope truncated in sender id")
        sender = blob[offset:offset + sender_len].decode("utf-8")
        offset += sender_len
        (payload_len,) = struct.unpack_from("<I", blob, offset)
        offset += 4
    except struct.error:
        raise TruncatedPayloadError("envelope truncated in header") from None
    except UnicodeDecodeError:
        raise WireFormatError("envelope strings are not valid UTF-8") from None
    payload = blob[offset:offset + payload_len]
    if len(payload) != payload_len:
        raise TruncatedPayloadError(
            f"payload declares {payload_len} bytes, got {len(payload)}")
    if len(blob) != offset + payload_len:
        raise WireFormatError(
            f"{len(blob) - offset - payload_len} trailing bytes after payload")
    try:
        msg_type = MsgType(msg_type)
    except ValueError:
        raise WireFormatError(f"unknown msg_type {msg_type}") from None
    return Envelope(topic=topic, msg_type=msg_type, round=round_,
                    sender_id=sender, payload=payload)


def envelope_size(env: Envelope) -> int:
    """Total on-stream size of an envelope, frame prefix included."""
    return FRAME_PREFIX_BYTES + len(encode_envelope(env))


def server_topic(run_id: str, msg_type: MsgType) -> str:
    """Mailbox topic for messages addressed to the coordinating server."""
    return f"fediot/{run_id}/server/{msg_type.name.lower()}"


def client_topic(run_id: str, client_id: str, msg_type: MsgType) -> str:
    """Mailbox topic for messages addressed to one client."""
    return f"fediot/{run_id}/client/{client_id}/{msg_type.name.lower()}"


def server_filter(run_id: str) -> str:
    return f"fediot/{run_id}/server/#"


def client_filter(run_id: str, client_id: str) -> str:
    return f"fediot/{run_id}/client/{client_id}/#"


def topic_matches(topic_filter: str, topic: str) -> bool:
    """Exact match, or prefix match for filters ending in the # wildcard."""
    if topic_filter == "#":
        return True
    if topic_filter.endswith("/#"):
        base = topic_filter[:-2]
        return topic == base or topic.startswith(base + "/")
    return topic_filter == topic
