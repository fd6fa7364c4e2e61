"""Deep autoencoder: definition, training math, and the learning-rate schedule.

Everything trains in float64. The heavy lifting is delegated to the kernel
backend selected in fedanom.kernels; the functions here own validation,
the parameter containers, and the functional API.
"""

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

from fedanom import kernels
from fedanom.errors import ConfigError, TrainingDivergedError

ACTIVATIONS = ("tanh", "sigmoid")

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass(frozen=True)
class AutoencoderConfig:
    """Architecture of the symmetric autoencoder.

    Hidden sizes are fractions of the input width; each encoder layer gets
    round(rate * input_dim) units with exact halves rounded down (115 inputs
    with the default rates give 86/57/38/29). The decoder mirrors the encoder
    back up to input_dim.
    """

    input_dim: int
    encoder_rates: tuple = (0.75, 0.50, 0.33, 0.25)
    activation: str = "tanh"
    activate_output: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.input_dim < 1:
            raise ConfigError(f"input_dim must be positive, got {self.input_dim}")
        rates = tuple(float(r) for r in self.encoder_rates)
        object.__setattr__(self, "encoder_rates", rates)
        if not rates:
            raise ConfigError("encoder_rates must not be empty")
        for r in rates:
            if not 0.0 < r < 1.0:
                raise ConfigError(f"encoder rate {r} outside (0, 1)")
        if any(b >= a for a, b in zip(rates, rates[1:])):
            raise ConfigError(f"encoder_rates must be strictly decreasing: {rates}")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"activation must be one of {ACTIVATIONS}")
        if not 0 <= int(self.seed) < 2 ** 64:
            raise ConfigError("seed must fit in an unsigned 64-bit integer")
        for dim in self.hidden_dims():
            if dim < 1:
                raise ConfigError(
                    f"encoder rates {rates} collapse a layer of input_dim "
                    f"{self.input_dim} to zero units")

    def hidden_dims(self):
        """Encoder layer widths, nearest integer with ties rounded down."""
        return [int(math.ceil(r * self.input_dim - 0.5)) for r in self.encoder_rates]

    def layer_dims(self):
        """Full width chain input -> bottleneck -> input."""
        enc = self.hidden_dims()
        return [self.input_dim] + enc + enc[-2::-1] + [self.input_dim]

    def fingerprint(self):
        """64-bit architecture hash carried by serialized models."""
        key = "|".join([
            str(self.input_dim),
            ",".join(str(d) for d in self.layer_dims()),
            self.activation,
            str(int(self.activate_output)),
        ])
        digest = hashlib.sha256(key.encode("ascii")).digest()
        return int.from_bytes(digest[:8], "little")

    def act_id(self):
        return kernels.ACT_TANH if self.activation == "tanh" else kernels.ACT_SIGMOID


@dataclass(eq=False)
class ModelParams:
    """Ordered layer parameters: (weights [out, in], bias [out]) pairs."""

    layers: list
    config_fingerprint: int
    activation: str = "tanh"
    activate_output: bool = True

    def copy(self):
        return ModelParams(
            layers=[(w.copy(), b.copy()) for w, b in self.layers],
            config_fingerprint=self.config_fingerprint,
            activation=self.activation,
            activate_output=self.activate_output,
        )

    def weight_lists(self):
        return [w for w, _ in self.layers], [b for _, b in self.layers]

    def act_id(self):
        return kernels.ACT_TANH if self.activation == "tanh" else kernels.ACT_SIGMOID

    @property
    def input_dim(self):
        return self.layers[0][0].shape[1]

    def flatten(self):
        """All parameters as one vector, layer order, weights before bias."""
        chunks = []
        for w, b in self.layers:
            chunks.append(w.ravel())
            chunks.append(b)
        return np.concatenate(chunks)


def params_allclose(a, b, rtol=0.0, atol=0.0):
    if len(a.layers) != len(b.layers):
        return False
    for (wa, ba), (wb, bb) in zip(a.layers, b.layers):
        if wa.shape != wb.shape or ba.shape != bb.shape:
            return False
        if not (np.allclose(wa, wb, rtol=rtol, atol=atol)
                and np.allclose(ba, bb, rtol=rtol, atol=atol)):
            return False
    return True


def params_equal(a, b):
    """Bit-exact parameter comparison."""
    return params_allclose(a, b, rtol=0.0, atol=0.0)


@dataclass(eq=False)
class AdamState:
    """First/second moment accumulators shaped like the model."""

    m: list
    v: list
    step_count: int = 0
    beta1: float = ADAM_BETA1
    beta2: float = ADAM_BETA2
    epsilon: float = ADAM_EPS

    def copy(self):
        return AdamState(
            m=[(mw.copy(), mb.copy()) for mw, mb in self.m],
            v=[(vw.copy(), vb.copy()) for vw, vb in self.v],
            step_count=self.step_count,
            beta1=self.beta1, beta2=self.beta2, epsilon=self.epsilon,
        )


@dataclass(frozen=True)
class LrSchedule:
    """Cross-round cosine decay from eta_max down to eta_min."""

    eta_max: float
    eta_min: float = 0.0
    total_rounds: int = 30

    def __post_init__(self):
        if self.eta_max <= 0:
            raise ConfigError("eta_max must be positive")
        if self.eta_min < 0 or self.eta_min > self.eta_max:
            raise ConfigError("need 0 <= eta_min <= eta_max")
        if self.total_rounds < 1:
            raise ConfigError("total_rounds must be >= 1")


def cosine_lr(schedule, round_t):
    """Learning rate for round t: half-cosine from eta_max to eta_min."""
    t_max = schedule.total_rounds
    if not 0 <= round_t < t_max:
        raise ConfigError(f"round {round_t} outside [0, {t_max})")
    if t_max == 1:
        return schedule.eta_max
    span = schedule.eta_max - schedule.eta_min
    return schedule.eta_min + 0.5 * span * (1.0 + math.cos(math.pi * round_t / (t_max - 1)))


def param_count(config):
    """Total number of scalars across all weight matrices and biases."""
    dims = config.layer_dims()
    return sum(o * i + o for i, o in zip(dims, dims[1:]))


def init_autoencoder(config):
    """Seeded init: weights uniform in +-1/sqrt(in_dim), biases zero."""
    rng = np.random.default_rng(config.seed)
    dims = config.layer_dims()
    layers = []
    for in_dim, out_dim in zip(dims, dims[1:]):
        scale = 1.0 / math.sqrt(in_dim)
        w = rng.uniform(-scale, scale, size=(out_dim, in_dim))
        b = np.zeros(out_dim)
        layers.append((np.ascontiguousarray(w), b))
    return ModelParams(
        layers=layers,
        config_fingerprint=config.fingerprint(),
        activation=config.activation,
        activate_output=config.activate_output,
    )


def init_adam_state(model):
    zeros = lambda layers: [(np.zeros_like(w), np.zeros_like(b)) for w, b in layers]
    return AdamState(m=zeros(model.layers), v=zeros(model.layers))


def _check_batch(model, batch, op):
    batch = np.ascontiguousarray(batch, dtype=np.float64)
    if batch.ndim != 2:
        raise ValueError(f"{op} expects a 2-d batch, got shape {batch.shape}")
    if batch.shape[0] == 0:
        raise ValueError(f"{op} got an empty batch")
    if batch.shape[1] != model.input_dim:
        raise ValueError(
            f"{op}: batch width {batch.shape[1]} != model input {model.input_dim}")
    if not np.all(np.isfinite(batch)):
        raise ValueError(f"{op} got non-finite inputs")
    return batch


def forward(model, batch):
    """Reconstruct a batch through encoder and decoder."""
    batch = _check_batch(model, batch, "forward")
    ws, bs = model.weight_lists()
    return kernels.active.forward(ws, bs, model.act_id(), model.activate_output, batch)


def mse_per_sample(x, x_hat):
    """Per-row reconstruction error (1/d) * sum_i (x_i - xhat_i)^2."""
    x = np.ascontiguousarray(x, dtype=np.float64)
    x_hat = np.ascontiguousarray(x_hat, dtype=np.float64)
    if x.shape != x_hat.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {x_hat.shape}")
    return kernels.active.mse_per_sample(x, x_hat)


def loss_and_grads(model, batch):
    """Batch-mean reconstruction MSE and its exact gradients.

    Raises TrainingDivergedError if the loss comes back non-finite.
    """
    batch = _check_batch(model, batch, "backward")
    ws, bs = model.weight_lists()
    loss, dws, dbs = kernels.active.loss_and_grads(
        ws, bs, model.act_id(), model.activate_output, batch)
    if not math.isfinite(loss):
        raise TrainingDivergedError(f"non-finite training loss {loss}")
    return loss, list(zip(dws, dbs))


def backward(model, batch):
    """Gradient of the batch-mean reconstruction MSE, shaped like the model."""
    return loss_and_grads(model, batch)[1]


def adam_step(model, grads, state, lr):
    """Apply one bias-corrected Adam step, returning new (model, state)."""
    if not np.isfinite(lr) or lr < 0:
        raise ValueError(f"lr must be finite and non-negative, got {lr}")
    if len(grads) != len(model.layers):
        raise ValueError("gradient/model layer count mismatch")
    for (w, b), (dw, db) in zip(model.layers, grads):
        if w.shape != dw.shape or b.shape != db.shape:
            raise ValueError("gradient shapes do not match the model")
    new_model = model.copy()
    new_state = state.copy()
    new_state.step_count += 1
    ws, bs = new_model.weight_lists()
    kernels.active.adam_update(
        ws, bs,
        [dw for dw, _ in grads], [db for _, db in grads],
        [mw for mw, _ in new_state.m], [mb for _, mb in new_state.m],
        [vw for vw, _ in new_state.v], [vb for _, vb in new_state.v],
        new_state.step_count, lr, state.beta1, state.beta2, state.epsilon)
    assert_finite(new_model)
    return new_model, new_state


def assert_finite(model):
    for w, b in model.layers:
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
            raise TrainingDivergedError("non-finite model parameters")
