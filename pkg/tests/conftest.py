import math

import numpy as np
import pytest

from fedanom import kernels, nn


@pytest.fixture(params=kernels.available_backends())
def backend(request):
    """Run the test once per available kernel backend."""
    prev = kernels.active.name
    kernels.set_backend(request.param)
    yield request.param
    kernels.set_backend(prev)


def small_config(rng, max_dim=8):
    """Random tiny architecture for oracle checks."""
    input_dim = int(rng.integers(2, max_dim + 1))
    n_layers = int(rng.integers(1, 4))
    rates = sorted(rng.uniform(0.2, 0.95, size=n_layers), reverse=True)
    # keep rates strictly decreasing and every layer at least one unit wide
    rates = [r for i, r in enumerate(rates) if i == 0 or r < rates[i - 1] - 1e-6]
    rates = [r for r in rates if math.ceil(r * input_dim - 0.5) >= 1]
    if not rates:
        rates = [0.5]
    activation = "tanh" if rng.random() < 0.5 else "sigmoid"
    return nn.AutoencoderConfig(
        input_dim=input_dim,
        encoder_rates=tuple(rates),
        activation=activation,
        activate_output=bool(rng.random() < 0.8),
        seed=int(rng.integers(0, 2 ** 32)),
    )


def numeric_grads(model, batch, h=1e-4):
    """Central finite differences of the batch-mean reconstruction MSE."""

    def loss_of():
        out = nn.forward(model, batch)
        return float(np.mean((out - batch) ** 2))

    grads = []
    for w, b in model.layers:
        dw = np.zeros_like(w)
        db = np.zeros_like(b)
        for arr, darr in ((w, dw), (b, db)):
            flat = arr.reshape(-1)
            dflat = darr.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                upper = loss_of()
                flat[i] = orig - h
                lower = loss_of()
                flat[i] = orig
                dflat[i] = (upper - lower) / (2.0 * h)
        grads.append((dw, db))
    return grads


def max_relative_error(analytic, numeric):
    worst = 0.0
    for (aw, ab), (nw, nb) in zip(analytic, numeric):
        for a, n in ((aw, nw), (ab, nb)):
            denom = np.maximum(np.abs(n), 1e-6)
            worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    return worst
