"""Pub/sub transport: envelope codec, model wire format, two backends."""

from fedanom.transport.envelope import (Envelope, MsgType, client_filter,
                                        client_topic, decode_envelope,
                                        encode_envelope, envelope_size,
                                        server_filter, server_topic,
                                        topic_matches)
from fedanom.transport.loopback import LoopbackBackend, LoopbackHub, Subscription
from fedanom.transport.stats import CommStats, RoundCost, RoundMarks, measure_round
from fedanom.transport.tcp import TcpBackend, TcpBroker, shutdown_broker
from fedanom.transport.wire import decode_model, encode_model, encoded_model_size

__all__ = [
    "Envelope", "MsgType", "client_filter", "client_topic", "decode_envelope",
    "encode_envelope", "envelope_size", "server_filter", "server_topic",
    "topic_matches", "LoopbackBackend", "LoopbackHub", "Subscription",
    "CommStats", "RoundCost", "RoundMarks", "measure_round", "TcpBackend",
    "TcpBroker", "shutdown_broker", "decode_model", "encode_model",
    "encoded_model_size",
]
