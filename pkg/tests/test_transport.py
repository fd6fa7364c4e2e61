import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import small_config
from fedanom import nn
from fedanom.errors import (BadMagicError, FingerprintMismatchError,
                            TransportError, TruncatedPayloadError,
                            VersionMismatchError, WireFormatError)
from fedanom import transport
from fedanom.transport import (Envelope, LoopbackBackend, LoopbackHub, MsgType,
                               TcpBackend, TcpBroker, decode_envelope,
                               decode_model, encode_envelope, encode_model,
                               encoded_model_size, envelope_size,
                               topic_matches)


def toy_model():
    cfg = nn.AutoencoderConfig(input_dim=2, encoder_rates=(0.5,), seed=3)
    return cfg, nn.init_autoencoder(cfg)


class TestEnvelopeCodec:
    def test_round_trip_basic(self):
        env = Envelope(topic="fediot/run1/server/model_update",
                       msg_type=MsgType.MODEL_UPDATE, round=7,
                       sender_id="device-03", payload=b"\x00\x01\x02")
        back = decode_envelope(encode_envelope(env))
        assert back.topic == env.topic
        assert back.msg_type == env.msg_type
        assert back.round == env.round
        assert back.sender_id == env.sender_id
        assert back.payload == env.payload

    def test_empty_payload(self):
        env = Envelope(topic="t", msg_type=MsgType.DONE, round=0, sender_id="")
        back = decode_envelope(encode_envelope(env))
        assert back.payload == b""
        assert back.sender_id == ""

    def test_layout_is_exact(self):
        env = Envelope(topic="ab", msg_type=MsgType.REGISTER, round=5,
                       sender_id="c", payload=b"xyz")
        expected = (struct.pack("<H", 2) + b"ab"
                    + struct.pack("<BIB", 1, 5, 1) + b"c"
                    + struct.pack("<I", 3) + b"xyz")
        assert encode_envelope(env) == expected

    def test_truncated_rejected(self):
        blob = encode_envelope(Envelope(topic="topic", msg_type=MsgType.DONE,
                                        round=1, sender_id="s", payload=b"abc"))
        for cut in (1, 4, len(blob) - 1):
            with pytest.raises(TruncatedPayloadError):
                decode_envelope(blob[:cut])

    def test_trailing_bytes_rejected(self):
        blob = encode_envelope(Envelope(topic="t", msg_type=MsgType.DONE,
                                        round=0, sender_id="s"))
        with pytest.raises(WireFormatError):
            decode_envelope(blob + b"\x00")

    def test_unknown_msg_type_rejected(self):
        env = Envelope(topic="t", msg_type=MsgType.DONE, round=0, sender_id="s")
        blob = bytearray(encode_envelope(env))
        blob[2 + 1] = 99  # msg_type byte sits right after the topic
        with pytest.raises(WireFormatError, match="99"):
            decode_envelope(bytes(blob))

    def test_bad_round_rejected(self):
        with pytest.raises(ValueError):
            Envelope(topic="t", msg_type=MsgType.DONE, round=-1, sender_id="s")
        with pytest.raises(ValueError):
            Envelope(topic="t", msg_type=MsgType.DONE, round=2 ** 32,
                     sender_id="s")

    def test_empty_topic_rejected(self):
        with pytest.raises(ValueError):
            Envelope(topic="", msg_type=MsgType.DONE, round=0, sender_id="s")

    def test_envelope_size_accounts_frame_prefix(self):
        env = Envelope(topic="t", msg_type=MsgType.DONE, round=0, sender_id="s")
        assert envelope_size(env) == len(encode_envelope(env)) + 4

    @settings(deadline=None, max_examples=200)
    @given(
        topic=st.text(min_size=1, max_size=60),
        msg_type=st.sampled_from([m for m in MsgType if m < 200]),
        round_=st.integers(0, 2 ** 32 - 1),
        sender=st.text(max_size=40),
        payload=st.binary(max_size=256),
    )
    def test_round_trip_property(self, topic, msg_type, round_, sender, payload):
        env = Envelope(topic=topic, msg_type=msg_type, round=round_,
                       sender_id=sender, payload=payload)
        back = decode_envelope(encode_envelope(env))
        assert (back.topic, back.msg_type, back.round, back.sender_id,
                back.payload) == (topic, msg_type, round_, sender, payload)


class TestTopics:
    def test_scheme(self):
        assert (transport.server_topic("r1", MsgType.MODEL_UPDATE)
                == "fediot/r1/server/model_update")
        assert (transport.client_topic("r1", "dev-2", MsgType.GLOBAL_MODEL)
                == "fediot/r1/client/dev-2/global_model")

    def test_exact_match(self):
        assert topic_matches("a/b", "a/b")
        assert not topic_matches("a/b", "a/c")

    def test_wildcard(self):
        assert topic_matches("fediot/r1/server/#", "fediot/r1/server/register")
        assert topic_matches("a/#", "a")
        assert topic_matches("a/#", "a/b/c")
        assert not topic_matches("a/#", "ab")
        assert not topic_matches("fediot/r1/server/#", "fediot/r2/server/x")
        assert topic_matches("#", "anything/at/all")

    def test_filters_cover_their_topics(self):
        f = transport.server_filter("run")
        assert topic_matches(f, transport.server_topic("run", MsgType.REGISTER))
        cf = transport.client_filter("run", "d1")
        assert topic_matches(cf, transport.client_topic("run", "d1",
                                                        MsgType.GLOBAL_MODEL))
        assert not topic_matches(cf, transport.client_topic("run", "d2",
                                                            MsgType.GLOBAL_MODEL))


class TestModelWire:
    def test_toy_model_is_87_bytes(self):
        _, model = toy_model()
        assert len(encode_model(model)) == 4 + 1 + 8 + 2 + 2 * 8 + 7 * 8 == 87

    def test_golden_bytes(self):
        # layout oracle built with raw struct calls, no shared helpers
        cfg, model = toy_model()
        (w1, b1), (w2, b2) = model.layers
        expected = b"".join([
            b"FDIO",
            struct.pack("<BQH", 1, cfg.fingerprint(), 2),
            struct.pack("<II", 1, 2),
            struct.pack("<II", 2, 1),
            w1.tobytes(), b1.tobytes(),
            w2.tobytes(), b2.tobytes(),
        ])
        assert encode_model(model) == expected

    def test_canonical_model_length(self):
        cfg = nn.AutoencoderConfig(input_dim=115, seed=0)
        model = nn.init_autoencoder(cfg)
        blob = encode_model(model)
        assert len(blob) == 15 + 8 * 8 + 36626 * 8
        assert len(blob) == encoded_model_size(cfg)

    def test_round_trip_bit_exact(self):
        cfg, model = toy_model()
        back = decode_model(encode_model(model), cfg)
        assert nn.params_equal(back, model)
        assert back.config_fingerprint == model.config_fingerprint
        assert back.activation == cfg.activation

    def test_round_trip_many_random_models(self):
        rng = np.random.default_rng(5)
        for _ in range(25):
            cfg = small_config(rng)
            model = nn.init_autoencoder(cfg)
            for w, b in model.layers:
                w += rng.normal(size=w.shape)
                b += rng.normal(size=b.shape)
            assert nn.params_equal(decode_model(encode_model(model), cfg), model)

    def test_bad_magic(self):
        cfg, model = toy_model()
        blob = b"NOPE" + encode_model(model)[4:]
        with pytest.raises(BadMagicError):
            decode_model(blob, cfg)

    def test_version_mismatch(self):
        cfg, model = toy_model()
        blob = bytearray(encode_model(model))
        blob[4] = 9
        with pytest.raises(VersionMismatchError):
            decode_model(bytes(blob), cfg)

    def test_truncated_by_one(self):
        cfg, model = toy_model()
        blob = encode_model(model)
        with pytest.raises(TruncatedPayloadError):
            decode_model(blob[:-1], cfg)

    def test_truncated_header(self):
        cfg, _ = toy_model()
        with pytest.raises(TruncatedPayloadError):
            decode_model(b"FDIO\x01", cfg)

    def test_fingerprint_mismatch(self):
        _, model = toy_model()
        other = nn.AutoencoderConfig(input_dim=3, encoder_rates=(0.5,), seed=0)
        with pytest.raises(FingerprintMismatchError):
            decode_model(encode_model(model), other)

    def test_trailing_bytes(self):
        cfg, model = toy_model()
        with pytest.raises(WireFormatError, match="trailing"):
            decode_model(encode_model(model) + b"\x00", cfg)

    def test_decoded_arrays_are_writable_copies(self):
        cfg, model = toy_model()
        back = decode_model(encode_model(model), cfg)
        back.layers[0][0][0, 0] = 42.0  # must not raise


class TestLoopback:
    def test_publish_without_subscribers_is_dropped(self):
        hub = LoopbackHub()
        hub.publish(Envelope(topic="t", msg_type=MsgType.DONE, round=0,
                             sender_id="s"))
        assert hub.messages_delivered == 0

    def test_two_subscribers_both_receive(self):
        hub = LoopbackHub()
        a = hub.subscribe("t")
        b = hub.subscribe("t")
        hub.publish(Envelope(topic="t", msg_type=MsgType.DONE, round=3,
                             sender_id="s", payload=b"p"))
        for sub in (a, b):
            env = sub.get(timeout=0)
            assert env.round == 3
            assert env.payload == b"p"

    def test_fifo_per_publisher(self):
        hub = LoopbackHub()
        sub = hub.subscribe("t")
        for i in range(10):
            hub.publish(Envelope(topic="t", msg_type=MsgType.MODEL_UPDATE,
                                 round=i, sender_id="s"))
        got = [sub.get(timeout=0).round for _ in range(10)]
        assert got == list(range(10))

    def test_wildcard_subscription(self):
        hub = LoopbackHub()
        sub = hub.subscribe("fediot/r/server/#")
        hub.publish(Envelope(topic="fediot/r/server/register",
                             msg_type=MsgType.REGISTER, round=0, sender_id="c"))
        hub.publish(Envelope(topic="fediot/r/client/c/register_ack",
                             msg_type=MsgType.REGISTER_ACK, round=0,
                             sender_id="server"))
        assert sub.get(timeout=0).msg_type == MsgType.REGISTER
        assert sub.try_get() is None

    def test_get_timeout_raises(self):
        hub = LoopbackHub()
        sub = hub.subscribe("t")
        with pytest.raises(TransportError):
            sub.get(timeout=0)

    def test_unsubscribe_stops_delivery(self):
        hub = LoopbackHub()
        backend = LoopbackBackend(hub)
        sub = backend.subscribe("t")
        backend.close()
        hub.publish(Envelope(topic="t", msg_type=MsgType.DONE, round=0,
                             sender_id="s"))
        assert sub.try_get() is None

    def test_byte_accounting(self):
        hub = LoopbackHub()
        hub.subscribe("t")
        env = Envelope(topic="t", msg_type=MsgType.DONE, round=0,
                       sender_id="s", payload=b"12345")
        hub.publish(env)
        assert hub.bytes_moved == envelope_size(env)

    def test_delivery_is_codec_round_tripped(self):
        cfg, model = toy_model()
        hub = LoopbackHub()
        sub = hub.subscribe("t")
        hub.publish(Envelope(topic="t", msg_type=MsgType.GLOBAL_MODEL, round=0,
                             sender_id="s", payload=encode_model(model)))
        env = sub.get(timeout=0)
        assert nn.params_equal(decode_model(env.payload, cfg), model)


class TestTcp:
    def test_pub_sub_across_connections(self):
        with TcpBroker(port=0) as broker:
            with TcpBackend(*broker.address) as sender, \
                    TcpBackend(*broker.address) as receiver:
                sub = receiver.subscribe("fediot/r/server/#")
                env = Envelope(topic="fediot/r/server/register",
                               msg_type=MsgType.REGISTER, round=0,
                               sender_id="dev", payload=b"hello")
                sender.publish(env)
                got = sub.get(timeout=5.0)
                assert got.sender_id == "dev"
                assert got.payload == b"hello"

    def test_two_subscribers_both_receive(self):
        with TcpBroker(port=0) as broker:
            with TcpBackend(*broker.address) as a, \
                    TcpBackend(*broker.address) as b, \
                    TcpBackend(*broker.address) as sender:
                sa = a.subscribe("t")
                sb = b.subscribe("t")
                sender.publish(Envelope(topic="t", msg_type=MsgType.DONE,
                                        round=1, sender_id="s"))
                assert sa.get(timeout=5.0).round == 1
                assert sb.get(timeout=5.0).round == 1

    def test_fifo_order_many_messages(self):
        with TcpBroker(port=0) as broker:
            with TcpBackend(*broker.address) as sender, \
                    TcpBackend(*broker.address) as receiver:
                sub = receiver.subscribe("t")
                for i in range(50):
                    sender.publish(Envelope(topic="t",
                                            msg_type=MsgType.MODEL_UPDATE,
                                            round=i, sender_id="s"))
                got = [sub.get(timeout=5.0).round for _ in range(50)]
                assert got == list(range(50))

    def test_model_sized_payload(self):
        cfg = nn.AutoencoderConfig(input_dim=115, seed=1)
        model = nn.init_autoencoder(cfg)
        blob = encode_model(model)
        with TcpBroker(port=0) as broker:
            with TcpBackend(*broker.address) as sender, \
                    TcpBackend(*broker.address) as receiver:
                sub = receiver.subscribe("models")
                sender.publish(Envelope(topic="models",
                                        msg_type=MsgType.GLOBAL_MODEL,
                                        round=0, sender_id="s", payload=blob))
                got = sub.get(timeout=10.0)
                assert got.payload == blob
                assert nn.params_equal(decode_model(got.payload, cfg), model)

    def test_no_cross_topic_leak(self):
        with TcpBroker(port=0) as broker:
            with TcpBackend(*broker.address) as sender, \
                    TcpBackend(*broker.address) as receiver:
                sub = receiver.subscribe("fediot/r/client/a/#")
                sender.publish(Envelope(topic="fediot/r/client/b/global_model",
                                        msg_type=MsgType.GLOBAL_MODEL, round=0,
                                        sender_id="s"))
                sender.publish(Envelope(topic="fediot/r/client/a/global_model",
                                        msg_type=MsgType.GLOBAL_MODEL, round=9,
                                        sender_id="s"))
                assert sub.get(timeout=5.0).round == 9
                assert sub.try_get() is None

    def test_unreachable_broker_backoff_then_error(self):
        # grab a port with no listener behind it
        import socket
        probe = socket.socket()
        probe.bind(("127.0.0.1", 0))
        port = probe.getsockname()[1]
        probe.close()
        with pytest.raises(TransportError, match="unreachable"):
            TcpBackend("127.0.0.1", port, connect_attempts=2,
                       backoff_base=0.01)

    def test_shutdown_envelope_stops_broker(self):
        broker = TcpBroker(port=0).start()
        transport.shutdown_broker(*broker.address)
        deadline = 50
        while not broker._stopping.is_set() and deadline:
            import time
            time.sleep(0.02)
            deadline -= 1
        assert broker._stopping.is_set()

    def test_publish_after_close_rejected(self):
        with TcpBroker(port=0) as broker:
            backend = TcpBackend(*broker.address)
            backend.close()
            with pytest.raises(TransportError):
                backend.publish(Envelope(topic="t", msg_type=MsgType.DONE,
                                         round=0, sender_id="s"))


class TestStats:
    def test_basic_accumulation(self):
        marks = transport.RoundMarks(train_start=1.0, train_end=3.0,
                                     upload_start=3.5, receipt=4.5)
        stats = transport.measure_round(transport.CommStats(), marks, 0,
                                        agg_seconds=0.25, bytes_up=100,
                                        bytes_down=200)
        assert stats.compute_seconds == pytest.approx(2.0)
        assert stats.comm_seconds == pytest.approx(0.75)
        assert stats.agg_seconds == pytest.approx(0.25)
        assert stats.bytes_up == 100
        assert stats.bytes_down == 200
        assert len(stats.per_round) == 1
        assert stats.per_round[0].round == 0

    def test_unreported_aggregation_stays_in_comm(self):
        marks = transport.RoundMarks(1.0, 2.0, 2.0, 3.0)
        stats = transport.measure_round(transport.CommStats(), marks, 0)
        assert stats.comm_seconds == pytest.approx(1.0)
        assert stats.agg_seconds == 0.0

    def test_aggregation_clamped_to_window(self):
        marks = transport.RoundMarks(1.0, 2.0, 2.0, 2.5)
        stats = transport.measure_round(transport.CommStats(), marks, 0,
                                        agg_seconds=5.0)
        assert stats.comm_seconds == 0.0
        assert stats.agg_seconds == pytest.approx(0.5)

    def test_non_monotonic_marks_rejected(self):
        with pytest.raises(ValueError):
            transport.RoundMarks(train_start=2.0, train_end=1.0,
                                 upload_start=3.0, receipt=4.0)
        with pytest.raises(ValueError):
            transport.RoundMarks(train_start=1.0, train_end=2.0,
                                 upload_start=5.0, receipt=4.0)

    def test_totals_equal_sum_of_rounds(self):
        stats = transport.CommStats()
        rng = np.random.default_rng(0)
        t = 0.0
        for r in range(20):
            a, b, c = sorted(rng.uniform(0.0, 1.0, size=3))
            marks = transport.RoundMarks(t, t + a, t + b, t + c)
            t += c
            stats = transport.measure_round(stats, marks, r,
                                            bytes_up=10, bytes_down=20)
        assert stats.bytes_up == sum(e.bytes_up for e in stats.per_round) == 200
        assert stats.comm_seconds == pytest.approx(
            sum(e.comm_seconds for e in stats.per_round))
        assert stats.compute_seconds == pytest.approx(
            sum(e.compute_seconds for e in stats.per_round))

    def test_ratios_sum_to_one(self):
        marks = transport.RoundMarks(0.0, 2.0, 2.5, 4.0)
        stats = transport.measure_round(transport.CommStats(), marks, 0,
                                        agg_seconds=0.5)
        comm, compute, agg = stats.ratios()
        assert comm + compute + agg == pytest.approx(1.0)

    def test_empty_ratios_are_zero(self):
        assert transport.CommStats().ratios() == (0.0, 0.0, 0.0)
