"""Synchronous federated training with a global detection threshold.

One run proceeds in phases over the pub/sub transport:

  registration   clients announce themselves; the server pairs sorted client
                 names with sorted device ids and assigns one device each
  T rounds       server broadcasts (model, lr) per the cosine schedule;
                 every client trains locally with a fresh Adam optimizer and
                 uploads; the server waits for all K updates (round barrier)
                 and averages them uniformly
  threshold      clients score their benign eval split under the final
                 model; the server concatenates all score vectors, fits the
                 detection threshold, broadcasts it, and evaluates on the
                 combined test set

Determinism: training seeds derive from (master seed, device id, round), so
results depend only on (config, corpus, seed) and are identical across
transports; update averaging and score concatenation sort by device id to
fix floating-point evaluation order.

Two centralized baselines reuse the same step budget: per-device isolated
training and training on all devices' merged benign data.
"""

import hashlib
import struct
import threading
import time
import uuid
from dataclasses import dataclass, replace

import numpy as np

from fedanom import anomaly, nn
from fedanom.data import DeviceDataset, build_global_testset
from fedanom.errors import ConfigError, TrainingDivergedError, TransportError
from fedanom.transport import (CommStats, Envelope, LoopbackBackend,
                               LoopbackHub, MsgType, RoundMarks, TcpBackend,
                               TcpBroker, client_filter, client_topic,
                               decode_model, encode_model, envelope_size,
                               measure_round, server_filter, server_topic)

DEFAULT_INPUT_DIM = 115


@dataclass(frozen=True)
class FederationConfig:
    n_clients: int = 9
    total_rounds: int = 30
    local_epochs: int = 120
    batch_size: int = 64
    schedule: nn.LrSchedule = None
    alpha: float = 3.0
    model: nn.AutoencoderConfig = None

    def __post_init__(self):
        if self.n_clients < 1:
            raise ConfigError("n_clients must be at least 1")
        if self.total_rounds < 1:
            raise ConfigError("total_rounds must be at least 1")
        if self.local_epochs < 0:
            raise ConfigError("local_epochs must be non-negative")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be at least 1")
        if self.schedule is None:
            object.__setattr__(self, "schedule",
                               nn.LrSchedule(eta_max=1e-3, eta_min=0.0,
                                             total_rounds=self.total_rounds))
        if self.schedule.total_rounds != self.total_rounds:
            raise ConfigError("schedule length must equal total_rounds")
        if self.model is None:
            object.__setattr__(self, "model",
                               nn.AutoencoderConfig(input_dim=DEFAULT_INPUT_DIM))


@dataclass
class RoundUpdate:
    client_id: str
    round: int
    params: nn.ModelParams
    local_loss: float
    train_seconds: float
    bytes_uploaded: int = 0


@dataclass(frozen=True)
class GlobalThresholdReport:
    per_client_mse: dict
    tr_global: anomaly.DetectionThreshold


@dataclass(frozen=True)
class RunStats:
    """Instrumentation for one federated run."""

    wall_seconds: float
    lrs: tuple
    round_agg_seconds: tuple
    round_mean_loss: tuple
    round_eval_loss: tuple
    round_update_counts: tuple
    client_stats: dict
    bytes_client_to_server: int
    bytes_server_to_client: int

    def totals(self):
        """(comm, compute, agg) seconds summed over all clients."""
        comm = sum(s.comm_seconds for s in self.client_stats.values())
        compute = sum(s.compute_seconds for s in self.client_stats.values())
        agg = sum(self.round_agg_seconds)
        return comm, compute, agg

    def ratios(self):
        comm, compute, agg = self.totals()
        total = comm + compute + agg
        if total <= 0.0:
            return 0.0, 0.0, 0.0
        return comm / total, compute / total, agg / total


def derive_seed(master_seed: int, key: str, round_index: int) -> int:
    """Stable per-(device, round) seed; independent of transport or timing."""
    digest = hashlib.sha256(
        f"{master_seed}:{key}:{round_index}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def initial_model(config: FederationConfig, master_seed: int) -> nn.ModelParams:
    cfg = replace(config.model, seed=derive_seed(master_seed, "model-init", 0))
    return nn.init_autoencoder(cfg)


def train_epochs(model: nn.ModelParams, train: np.ndarray, lr: float,
                 epochs: int, batch_size: int, seed: int):
    """Mini-batch Adam on one matrix: seeded shuffle each epoch, short last
    batch kept, fresh optimizer state. Returns (model, mean last-epoch loss).
    """
    if train.shape[0] == 0:
        raise ValueError("training matrix is empty")
    state = nn.init_adam_state(model)
    model = model.copy()
    rng = np.random.default_rng(seed)
    n = train.shape[0]
    epoch_loss = float("nan")
    for _ in range(epochs):
        order = rng.permutation(n)
        losses = []
        for start in range(0, n, batch_size):
            batch = np.ascontiguousarray(train[order[start:start + batch_size]])
            loss, grads = nn.loss_and_grads(model, batch)
            model, state = nn.adam_step(model, grads, state, lr)
            losses.append(loss)
        epoch_loss = float(np.mean(losses))
    if epochs == 0:
        epoch_loss = float(np.mean(score_mse(model, train)))
    return model, epoch_loss


def local_train(global_params: nn.ModelParams, data: DeviceDataset, lr: float,
                epochs: int, batch_size: int, seed: int,
                round_index: int = 0) -> RoundUpdate:
    """One client's contribution to a round, with timing attached."""
    t0 = time.perf_counter()
    try:
        model, loss = train_epochs(global_params, data.train, lr, epochs,
                                   batch_size, seed)
    except TrainingDivergedError as err:
        raise TrainingDivergedError(
            f"device {data.device_id} round {round_index}: {err}") from err
    return RoundUpdate(
        client_id=data.device_id,
        round=round_index,
        params=model,
        local_loss=loss,
        train_seconds=time.perf_counter() - t0,
    )


def aggregate(updates) -> nn.ModelParams:
    """Uniform element-wise mean of the updates' parameters (weight 1/K).

    Updates are ordered by client id before averaging so the float result
    does not depend on arrival order.
    """
    updates = sorted(updates, key=lambda u: u.client_id)
    if not updates:
        raise ValueError("need at least one update")
    rounds = {u.round for u in updates}
    if len(rounds) != 1:
        raise ValueError(f"updates span multiple rounds: {sorted(rounds)}")
    prints = {u.params.config_fingerprint for u in updates}
    if len(prints) != 1:
        raise ValueError("updates carry different architectures")
    first = updates[0].params
    layers = []
    for k, (w0, b0) in enumerate(first.layers):
        for u in updates[1:]:
            if u.params.layers[k][0].shape != w0.shape:
                raise ValueError("update layer shapes differ")
        # mean taken as base + mean(deltas): identical updates then average
        # to themselves bit-for-bit, which plain sum/K does not guarantee
        w = w0 + np.mean(np.stack([u.params.layers[k][0] - w0
                                   for u in updates]), axis=0)
        b = b0 + np.mean(np.stack([u.params.layers[k][1] - b0
                                   for u in updates]), axis=0)
        layers.append((w, b))
    return nn.ModelParams(
        layers=layers,
        config_fingerprint=first.config_fingerprint,
        activation=first.activation,
        activate_output=first.activate_output,
    )


def global_threshold(per_client_mse: dict, alpha: float) -> GlobalThresholdReport:
    """Fit the detection cutoff over all clients' eval scores combined.

    Concatenation follows sorted client id, so the result is identical for
    any map ordering.
    """
    if not per_client_mse:
        raise ValueError("no client score vectors")
    for client, vec in per_client_mse.items():
        if np.asarray(vec).size == 0:
            raise ValueError(f"client {client} reported no scores")
    merged = np.concatenate([np.asarray(per_client_mse[k], dtype=np.float64)
                             for k in sorted(per_client_mse)])
    tr = anomaly.compute_threshold(merged, alpha=alpha)
    return GlobalThresholdReport(per_client_mse=dict(per_client_mse),
                                 tr_global=tr)


def score_mse(model: nn.ModelParams, features: np.ndarray,
              chunk_rows: int = 2048) -> np.ndarray:
    """Per-row reconstruction error, chunked at a fixed size so results do
    not depend on how large the input is."""
    features = np.ascontiguousarray(features, dtype=np.float64)
    out = np.empty(features.shape[0], dtype=np.float64)
    for start in range(0, features.shape[0], chunk_rows):
        chunk = features[start:start + chunk_rows]
        out[start:start + chunk_rows] = nn.mse_per_sample(
            chunk, nn.forward(model, chunk))
    return out


# ---------------------------------------------------------------------------
# message payload schemas

PHASE_TRAIN = 0
PHASE_THRESHOLD = 1

_GLOBAL_MODEL_HEAD = struct.Struct("<ddB")   # lr, prev agg seconds, phase
_MODEL_UPDATE_HEAD = struct.Struct("<dd")    # local loss, train seconds
_MSE_TAIL = struct.Struct("<ddQQ")           # comm s, compute s, bytes up/down
_THRESHOLD_BODY = struct.Struct("<ddddQ")    # tr, mean, std, alpha, n


def pack_global_model(lr, agg_seconds, phase, model) -> bytes:
    return _GLOBAL_MODEL_HEAD.pack(lr, agg_seconds, phase) + encode_model(model)


def unpack_global_model(payload, model_config):
    lr, agg_seconds, phase = _GLOBAL_MODEL_HEAD.unpack_from(payload, 0)
    model = decode_model(payload[_GLOBAL_MODEL_HEAD.size:], model_config)
    return lr, agg_seconds, phase, model


def pack_model_update(loss, train_seconds, model) -> bytes:
    return _MODEL_UPDATE_HEAD.pack(loss, train_seconds) + encode_model(model)


def unpack_model_update(payload, model_config):
    loss, train_seconds = _MODEL_UPDATE_HEAD.unpack_from(payload, 0)
    model = decode_model(payload[_MODEL_UPDATE_HEAD.size:], model_config)
    return loss, train_seconds, model


def pack_mse_sequence(scores, stats: CommStats) -> bytes:
    vec = np.ascontiguousarray(scores, dtype="<f8")
    return (struct.pack("<I", vec.size) + vec.tobytes()
            + _MSE_TAIL.pack(stats.comm_seconds, stats.compute_seconds,
                             stats.bytes_up, stats.bytes_down))


def unpack_mse_sequence(payload):
    (n,) = struct.unpack_from("<I", payload, 0)
    vec = np.frombuffer(payload, dtype="<f8", count=n, offset=4).copy()
    comm, compute, up, down = _MSE_TAIL.unpack_from(payload, 4 + 8 * n)
    return vec, CommStats(bytes_up=up, bytes_down=down, comm_seconds=comm,
                          compute_seconds=compute)


def pack_threshold(tr: anomaly.DetectionThreshold) -> bytes:
    return _THRESHOLD_BODY.pack(tr.tr, tr.mean_mse, tr.std_mse, tr.alpha,
                                tr.n_samples)


def unpack_threshold(payload) -> anomaly.DetectionThreshold:
    tr, mean, std, alpha, n = _THRESHOLD_BODY.unpack(payload)
    return anomaly.DetectionThreshold(tr=tr, mean_mse=mean, std_mse=std,
                                      alpha=alpha, n_samples=n)


# ---------------------------------------------------------------------------
# server and client state machines

class ServerManager:
    """Coordinates registration, the round loop, and the threshold phase.

    Granular step methods allow a deterministic single-threaded driver; the
    run() loop drives the same steps for threaded or multi-process use.
    """

    def __init__(self, backend, run_id: str, config: FederationConfig,
                 devices, master_seed: int, default_timeout=None,
                 eval_each_round: bool = True):
        if len(devices) != config.n_clients:
            raise ConfigError(
                f"{len(devices)} devices for {config.n_clients} clients")
        ids = [d.device_id for d in devices]
        if len(set(ids)) != len(ids):
            raise ConfigError("duplicate device ids")
        self.backend = backend
        self.run_id = run_id
        self.config = config
        self.devices = sorted(devices, key=lambda d: d.device_id)
        self.master_seed = master_seed
        self.default_timeout = default_timeout
        self.eval_each_round = eval_each_round
        self.sub = backend.subscribe(server_filter(run_id))
        self.model = initial_model(config, master_seed)
        self.mailbox = {}
        self.seen = set()
        self.round_agg_seconds = []
        self.round_update_counts = []
        self.round_mean_loss = []
        self.round_eval_loss = []
        self.lrs = []
        self.bytes_in = 0
        self.bytes_out = 0
        self.report = None
        self.metrics = None
        self.client_stats = {}
        self._pending = {}

    def _get(self, timeout):
        env = self.sub.get(timeout=self.default_timeout
                           if timeout is None else timeout)
        self.bytes_in += envelope_size(env)
        return env

    def _send(self, client_name, msg_type, round_index, payload=b""):
        env = Envelope(topic=client_topic(self.run_id, client_name, msg_type),
                       msg_type=msg_type, round=round_index,
                       sender_id="server", payload=payload)
        self.bytes_out += envelope_size(env)
        self.backend.publish(env)

    def wait_for_registrations(self, timeout=None):
        """Collect REGISTERs until every seat is taken (duplicates ignored)."""
        names = set()
        while len(names) < self.config.n_clients:
            try:
                env = self._get(timeout)
            except TransportError as err:
                raise TransportError(
                    f"registration: got {len(names)} of "
                    f"{self.config.n_clients} clients: {err}") from None
            if env.msg_type == MsgType.REGISTER and env.sender_id:
                names.add(env.sender_id)
        self.client_names = sorted(names)
        return self.client_names

    def assign_devices(self):
        """Pair sorted client names with sorted device ids, one each."""
        for name, device in zip(self.client_names, self.devices):
            self.mailbox[device.device_id] = name
            self._send(name, MsgType.REGISTER_ACK, 0)
            self._send(name, MsgType.DATASET_ASSIGN, 0,
                       device.device_id.encode("utf-8"))

    def broadcast_model(self, round_index: int):
        lr = nn.cosine_lr(self.config.schedule, round_index)
        self.lrs.append(lr)
        prev_agg = self.round_agg_seconds[-1] if self.round_agg_seconds else 0.0
        payload = pack_global_model(lr, prev_agg, PHASE_TRAIN, self.model)
        for device_id in sorted(self.mailbox):
            self._send(self.mailbox[device_id], MsgType.GLOBAL_MODEL,
                       round_index, payload)

    def collect_updates(self, round_index: int, timeout=None):
        """Round barrier: block until all K updates for this round arrived."""
        updates = self._pending.pop(round_index, {})
        while len(updates) < self.config.n_clients:
            try:
                env = self._get(timeout)
            except TransportError as err:
                missing = sorted(set(self.mailbox) - set(updates))
                raise TransportError(
                    f"round {round_index}: got {len(updates)} of "
                    f"{self.config.n_clients} updates; missing {missing}: "
                    f"{err}") from None
            if env.msg_type != MsgType.MODEL_UPDATE:
                continue
            key = (env.sender_id, env.round, env.msg_type)
            if key in self.seen:
                continue
            self.seen.add(key)
            if env.sender_id not in self.mailbox:
                raise TransportError(
                    f"update from unknown client {env.sender_id!r}")
            loss, train_seconds, model = unpack_model_update(
                env.payload, self.config.model)
            update = RoundUpdate(client_id=env.sender_id, round=env.round,
                                 params=model, local_loss=loss,
                                 train_seconds=train_seconds,
                                 bytes_uploaded=envelope_size(env))
            if env.round == round_index:
                updates[env.sender_id] = update
            else:
                self._pending.setdefault(env.round, {})[env.sender_id] = update
        return [updates[k] for k in sorted(updates)]

    def complete_round(self, updates):
        t0 = time.perf_counter()
        self.model = aggregate(updates)
        self.round_agg_seconds.append(time.perf_counter() - t0)
        self.round_update_counts.append(len(updates))
        self.round_mean_loss.append(
            float(np.mean([u.local_loss for u in updates])))
        if self.eval_each_round:
            self.round_eval_loss.append(float(np.mean(
                [np.mean(score_mse(self.model, d.eval)) for d in self.devices])))

    def run_round(self, round_index: int, timeout=None):
        self.broadcast_model(round_index)
        self.complete_round(self.collect_updates(round_index, timeout))

    def broadcast_final(self):
        prev_agg = self.round_agg_seconds[-1] if self.round_agg_seconds else 0.0
        payload = pack_global_model(0.0, prev_agg, PHASE_THRESHOLD, self.model)
        for device_id in sorted(self.mailbox):
            self._send(self.mailbox[device_id], MsgType.GLOBAL_MODEL,
                       self.config.total_rounds, payload)

    def collect_mse(self, timeout=None):
        vectors = {}
        while len(vectors) < self.config.n_clients:
            try:
                env = self._get(timeout)
            except TransportError as err:
                missing = sorted(set(self.mailbox) - set(vectors))
                raise TransportError(
                    f"threshold phase: missing scores from {missing}: "
                    f"{err}") from None
            if env.msg_type != MsgType.MSE_SEQUENCE:
                continue
            key = (env.sender_id, env.round, env.msg_type)
            if key in self.seen or env.sender_id not in self.mailbox:
                continue
            self.seen.add(key)
            vec, stats = unpack_mse_sequence(env.payload)
            vectors[env.sender_id] = vec
            self.client_stats[env.sender_id] = stats
        return vectors

    def finish_threshold(self, timeout=None):
        vectors = self.collect_mse(timeout)
        self.report = global_threshold(vectors, self.config.alpha)
        payload = pack_threshold(self.report.tr_global)
        for device_id in sorted(self.mailbox):
            self._send(self.mailbox[device_id], MsgType.GLOBAL_THRESHOLD,
                       self.config.total_rounds, payload)
        for device_id in sorted(self.mailbox):
            self._send(self.mailbox[device_id], MsgType.DONE,
                       self.config.total_rounds)
        return self.report

    def evaluate(self):
        features, labels = build_global_testset(self.devices)
        scores = score_mse(self.model, features)
        pred = anomaly.detect(scores, self.report.tr_global)
        self.metrics = anomaly.metrics(anomaly.confusion(pred, labels))
        return self.metrics

    def run(self, timeout=None):
        t0 = time.perf_counter()
        self.wait_for_registrations(timeout)
        self.assign_devices()
        for t in range(self.config.total_rounds):
            self.run_round(t, timeout)
        self.broadcast_final()
        self.finish_threshold(timeout)
        self.evaluate()
        return self._result(time.perf_counter() - t0)

    def _result(self, wall_seconds):
        stats = RunStats(
            wall_seconds=wall_seconds,
            lrs=tuple(self.lrs),
            round_agg_seconds=tuple(self.round_agg_seconds),
            round_mean_loss=tuple(self.round_mean_loss),
            round_eval_loss=tuple(self.round_eval_loss),
            round_update_counts=tuple(self.round_update_counts),
            client_stats=dict(self.client_stats),
            bytes_client_to_server=self.bytes_in,
            bytes_server_to_client=self.bytes_out,
        )
        return self.model, self.report, self.metrics, stats


class ClientManager:
    """One client's state machine: register, train per round, report scores."""

    def __init__(self, backend, run_id: str, client_name: str,
                 config: FederationConfig, dataset_resolver,
                 master_seed: int, default_timeout=None):
        self.backend = backend
        self.run_id = run_id
        self.client_name = client_name
        self.config = config
        self.resolve = dataset_resolver
        self.master_seed = master_seed
        self.default_timeout = default_timeout
        self.sub = backend.subscribe(client_filter(run_id, client_name))
        self.device = None
        self.stats = CommStats()
        self.threshold = None
        self._round = 0
        self._open_window = None  # (marks minus receipt, bytes_up, round)

    def _get(self, timeout):
        return self.sub.get(timeout=self.default_timeout
                            if timeout is None else timeout)

    def _publish(self, msg_type, round_index, payload=b""):
        env = Envelope(topic=server_topic(self.run_id, msg_type),
                       msg_type=msg_type, round=round_index,
                       sender_id=self.device.device_id if self.device else
                       self.client_name, payload=payload)
        self.backend.publish(env)
        return envelope_size(env)

    def send_register(self):
        self._publish(MsgType.REGISTER, 0)

    def _receive_assignment(self, timeout):
        assign = self._get(timeout)
        if assign.msg_type != MsgType.DATASET_ASSIGN:
            raise TransportError(f"expected dataset assignment, got "
                                 f"{assign.msg_type}")
        device_id = assign.payload.decode("utf-8")
        self.device = self.resolve(device_id)
        if self.device.device_id != device_id:
            raise ConfigError(
                f"resolver returned {self.device.device_id!r} for {device_id!r}")
        return device_id

    def complete_registration(self, timeout=None):
        ack = self._get(timeout)
        if ack.msg_type != MsgType.REGISTER_ACK:
            raise TransportError(f"expected registration ack, got {ack.msg_type}")
        return self._receive_assignment(timeout)

    def register(self, timeout=None, retry_interval=1.0):
        """Announce this client until the server acknowledges it.

        A REGISTER published before the server subscribes is dropped by the
        broker, so the announcement is re-sent periodically; the server
        collapses duplicates by sender name.
        """
        limit = self.default_timeout if timeout is None else timeout
        deadline = None if limit is None else time.monotonic() + limit
        while True:
            self.send_register()
            remaining = retry_interval
            if deadline is not None:
                remaining = min(remaining, deadline - time.monotonic())
                if remaining <= 0:
                    raise TransportError(
                        f"client {self.client_name}: no registration ack "
                        f"within {limit} seconds")
            try:
                ack = self.sub.get(timeout=remaining)
            except TransportError:
                continue
            if ack.msg_type != MsgType.REGISTER_ACK:
                raise TransportError(
                    f"expected registration ack, got {ack.msg_type}")
            break
        return self._receive_assignment(timeout)

    def _close_window(self, receipt, agg_seconds):
        if self._open_window is None:
            return
        (train_start, train_end, upload_start), bytes_up, round_index, \
            bytes_down = self._open_window
        marks = RoundMarks(train_start=train_start, train_end=train_end,
                           upload_start=upload_start, receipt=receipt)
        self.stats = measure_round(self.stats, marks, round_index,
                                   agg_seconds=agg_seconds, bytes_up=bytes_up,
                                   bytes_down=bytes_down)
        self._open_window = None

    def process_model(self, timeout=None):
        """Handle one GLOBAL_MODEL: train and upload, or enter the threshold
        phase. Returns the phase handled."""
        env = self._get(timeout)
        receipt = time.monotonic()
        if env.msg_type != MsgType.GLOBAL_MODEL:
            raise TransportError(f"expected a global model, got {env.msg_type}")
        lr, agg_seconds, phase, model = unpack_global_model(
            env.payload, self.config.model)
        self._close_window(receipt, agg_seconds)
        bytes_down = envelope_size(env)

        if phase == PHASE_THRESHOLD:
            t0 = time.monotonic()
            scores = score_mse(model, self.device.eval)
            self.stats = replace(
                self.stats,
                compute_seconds=self.stats.compute_seconds
                + (time.monotonic() - t0))
            self._publish(MsgType.MSE_SEQUENCE, env.round,
                          pack_mse_sequence(scores, self.stats))
            return PHASE_THRESHOLD

        round_index = env.round
        seed = derive_seed(self.master_seed, self.device.device_id, round_index)
        train_start = time.monotonic()
        update = local_train(model, self.device, lr, self.config.local_epochs,
                             self.config.batch_size, seed,
                             round_index=round_index)
        train_end = time.monotonic()
        payload = pack_model_update(update.local_loss, update.train_seconds,
                                    update.params)
        upload_start = time.monotonic()
        bytes_up = self._publish(MsgType.MODEL_UPDATE, round_index, payload)
        self._open_window = ((train_start, train_end, upload_start), bytes_up,
                             round_index, bytes_down)
        self._round = round_index + 1
        return PHASE_TRAIN

    def await_threshold(self, timeout=None):
        env = self._get(timeout)
        if env.msg_type != MsgType.GLOBAL_THRESHOLD:
            raise TransportError(f"expected the threshold, got {env.msg_type}")
        self.threshold = unpack_threshold(env.payload)
        return self.threshold

    def await_done(self, timeout=None):
        env = self._get(timeout)
        if env.msg_type != MsgType.DONE:
            raise TransportError(f"expected done, got {env.msg_type}")

    def run(self, timeout=None):
        self.register(timeout)
        while self.process_model(timeout) == PHASE_TRAIN:
            pass
        self.await_threshold(timeout)
        self.await_done(timeout)
        return self.threshold


# ---------------------------------------------------------------------------
# run drivers

def run_federated(config: FederationConfig, devices, transport: str = "loopback",
                  seed: int = 0, message_delay: float = 0.0,
                  broker_address=None, run_id=None, timeout: float = 300.0,
                  eval_each_round: bool = True):
    """Execute one full federated run; returns (model, report, metrics, stats).

    transport "loopback" runs everything on one thread, deterministically;
    "tcp" runs a broker, a server, and one thread per client over sockets.
    """
    if transport == "loopback":
        return _run_loopback(config, devices, seed, message_delay, run_id,
                             eval_each_round)
    if transport == "tcp":
        return _run_tcp(config, devices, seed, broker_address, run_id, timeout,
                        eval_each_round)
    raise ConfigError(f"unknown transport {transport!r}")


def _resolver(devices):
    table = {d.device_id: d for d in devices}

    def resolve(device_id):
        if device_id not in table:
            raise ConfigError(f"no dataset for device {device_id!r}")
        return table[device_id]

    return resolve


def _run_loopback(config, devices, seed, message_delay, run_id,
                  eval_each_round):
    run_id = run_id or uuid.uuid4().hex[:12]
    hub = LoopbackHub(message_delay=message_delay)
    t0 = time.perf_counter()
    server = ServerManager(LoopbackBackend(hub), run_id, config, devices,
                           seed, default_timeout=0,
                           eval_each_round=eval_each_round)
    clients = [
        ClientManager(LoopbackBackend(hub), run_id, f"client-{i:02d}", config,
                      _resolver(devices), seed, default_timeout=0)
        for i in range(config.n_clients)
    ]
    for c in clients:
        c.send_register()
    server.wait_for_registrations()
    server.assign_devices()
    for c in clients:
        c.complete_registration()
    for t in range(config.total_rounds):
        server.broadcast_model(t)
        for c in clients:
            c.process_model()
        server.complete_round(server.collect_updates(t))
    server.broadcast_final()
    for c in clients:
        c.process_model()
    server.finish_threshold()
    for c in clients:
        c.await_threshold()
        c.await_done()
    server.evaluate()
    return server._result(time.perf_counter() - t0)


def _run_tcp(config, devices, seed, broker_address, run_id, timeout,
             eval_each_round):
    run_id = run_id or uuid.uuid4().hex[:12]
    own_broker = None
    if broker_address is None:
        own_broker = TcpBroker(port=0).start()
        broker_address = own_broker.address
    backends = []
    errors = []
    try:
        server_backend = TcpBackend(*broker_address)
        backends.append(server_backend)
        server = ServerManager(server_backend, run_id, config, devices, seed,
                               default_timeout=timeout,
                               eval_each_round=eval_each_round)

        def client_main(index):
            try:
                backend = TcpBackend(*broker_address)
                backends.append(backend)
                client = ClientManager(backend, run_id, f"client-{index:02d}",
                                       config, _resolver(devices), seed,
                                       default_timeout=timeout)
                client.run()
            except Exception as err:  # surfaced after join
                errors.append(err)

        threads = [threading.Thread(target=client_main, args=(i,),
                                    name=f"client-{i:02d}", daemon=True)
                   for i in range(config.n_clients)]
        for t in threads:
            t.start()
        result = server.run(timeout)
        for t in threads:
            t.join(timeout=timeout)
        if errors:
            raise errors[0]
        return result
    finally:
        for backend in backends:
            backend.close()
        if own_broker is not None:
            own_broker.stop()


def run_single_device(device: DeviceDataset, config: FederationConfig,
                      seed: int = 0, testset=None):
    """Centralized baseline on one device's data with the same step budget
    as a federated run: T segments of E epochs, cosine LR across segments,
    fresh optimizer per segment. Returns (model, threshold, metrics).
    """
    model = initial_model(config, seed)
    for t in range(config.total_rounds):
        lr = nn.cosine_lr(config.schedule, t)
        model, _ = train_epochs(
            model, device.train, lr, config.local_epochs, config.batch_size,
            derive_seed(seed, device.device_id, t))
    scores = score_mse(model, device.eval)
    tr = anomaly.compute_threshold(scores, alpha=config.alpha)
    if testset is None:
        features, labels = device.test_features, device.test_labels
    else:
        features, labels = testset
    pred = anomaly.detect(score_mse(model, features), tr)
    return model, tr, anomaly.metrics(anomaly.confusion(pred, labels))


def run_combined(devices, config: FederationConfig, seed: int = 0,
                 testset=None):
    """Centralized baseline on all devices' merged benign data; threshold
    over the concatenated eval scores. Returns (model, threshold, metrics).
    """
    devices = sorted(devices, key=lambda d: d.device_id)
    if not devices:
        raise ValueError("need at least one device")
    merged = np.vstack([d.train for d in devices])
    # seed key is the joined id list, so one device reduces exactly to the
    # single-device baseline
    seed_key = "+".join(d.device_id for d in devices)
    model = initial_model(config, seed)
    for t in range(config.total_rounds):
        lr = nn.cosine_lr(config.schedule, t)
        model, _ = train_epochs(
            model, merged, lr, config.local_epochs, config.batch_size,
            derive_seed(seed, seed_key, t))
    scores = np.concatenate([score_mse(model, d.eval) for d in devices])
    tr = anomaly.compute_threshold(scores, alpha=config.alpha)
    if testset is None:
        features, labels = build_global_testset(devices)
    else:
        features, labels = testset
    pred = anomaly.detect(score_mse(model, features), tr)
    return model, tr, anomaly.metrics(anomaly.confusion(pred, labels))
