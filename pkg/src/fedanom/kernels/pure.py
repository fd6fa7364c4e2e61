"""Numpy reference implementation of the training kernels.

Same call surface as the compiled twin (fedanom.kernels._core). Both operate
on parallel lists of C-contiguous float64 arrays: weights[k] has shape
(out_k, in_k), biases[k] has shape (out_k,). All update functions mutate
their inputs in place; callers that need value semantics copy first.

The two backends are individually deterministic but are NOT guaranteed
bit-identical to each other (different BLAS paths, libm vs numpy SIMD
transcendentals). Cross-backend agreement is tested to tight tolerances in
tests/test_kernels.py.
"""

import numpy as np

ACT_TANH = 0
ACT_SIGMOID = 1

name = "python"
compiled = False


def _activate(z, act):
    if act == ACT_TANH:
        return np.tanh(z)
    return 1.0 / (1.0 + np.exp(-z))


def _deriv_from_output(a, act):
    # activation derivative expressed through the activation's own output
    if act == ACT_TANH:
        return 1.0 - a * a
    return a * (1.0 - a)


def _activations(weights, biases, act, activate_output, x):
    layers = len(weights)
    acts = [x]
    a = x
    for k in range(layers):
        z = a @ weights[k].T
        z += biases[k]
        if k < layers - 1 or activate_output:
            a = _activate(z, act)
        else:
            a = z
        acts.append(a)
    return acts


def forward(weights, biases, act, activate_output, x):
    """Reconstruct a batch, returning the network output."""
    return _activations(weights, biases, act, activate_output, x)[-1]


def loss_and_grads(weights, biases, act, activate_output, x):
    """Mean reconstruction MSE over the batch and its exact gradient.

    Returns (loss, dweights, dbiases) with gradient arrays shaped like the
    corresponding parameters.
    """
    layers = len(weights)
    acts = _activations(weights, biases, act, activate_output, x)
    b, d = x.shape
    r = acts[-1] - x
    loss = float(np.mean(r * r))
    delta = (2.0 / (b * d)) * r
    if activate_output:
        delta = delta * _deriv_from_output(acts[-1], act)
    dws = [None] * layers
    dbs = [None] * layers
    for k in range(layers - 1, -1, -1):
        dws[k] = delta.T @ acts[k]
        dbs[k] = delta.sum(axis=0)
        if k > 0:
            delta = (delta @ weights[k]) * _deriv_from_output(acts[k], act)
    return loss, dws, dbs


def adam_update(weights, biases, dws, dbs, mw, mb, vw, vb,
                step, lr, beta1, beta2, eps):
    """One bias-corrected Adam step, in place.

    `step` is the 1-based count of the step being applied.
    """
    c1 = 1.0 - beta1 ** step
    c2 = 1.0 - beta2 ** step
    for param, grad, m, v in _param_iter(weights, biases, dws, dbs, mw, mb, vw, vb):
        m *= beta1
        m += (1.0 - beta1) * grad
        v *= beta2
        v += (1.0 - beta2) * (grad * grad)
        param -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


def _param_iter(weights, biases, dws, dbs, mw, mb, vw, vb):
    for k in range(len(weights)):
        yield weights[k], dws[k], mw[k], vw[k]
        yield biases[k], dbs[k], mb[k], vb[k]


def mse_per_sample(x, xhat):
    """Row-wise mean squared error between two equal-shape matrices."""
    r = xhat - x
    return np.mean(r * r, axis=1)
