"""Compare the pure-numpy and compiled kernel backends.

Times forward, loss+gradient, and Adam-update calls on the standard
115-feature autoencoder, then a short end-to-end training loop.

Run:  python3 benchmarks/bench_kernels.py [--batch 64] [--repeats 50]
"""

import argparse
import time

import numpy as np

from fedanom import kernels, nn


def time_call(fn, repeats):
    # one warm-up call, then best-of-N wall time
    fn()
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def bench_backend(name, batch_size, repeats):
    be = kernels.get_backend(name)
    cfg = nn.AutoencoderConfig(input_dim=115, seed=0)
    model = nn.init_autoencoder(cfg)
    state = nn.init_adam_state(model)
    rng = np.random.default_rng(0)
    batch = rng.uniform(0, 1, size=(batch_size, 115))

    ws, bs = model.weight_lists()
    act = model.act_id()

    rows = {}
    rows["forward"] = time_call(
        lambda: be.forward(ws, bs, act, model.activate_output, batch), repeats)
    rows["loss+grads"] = time_call(
        lambda: be.loss_and_grads(ws, bs, act, model.activate_output, batch),
        repeats)

    _, dws, dbs = be.loss_and_grads(ws, bs, act, model.activate_output, batch)
    mws = [mw for mw, _ in state.m]
    mbs = [mb for _, mb in state.m]
    vws = [vw for vw, _ in state.v]
    vbs = [vb for _, vb in state.v]
    rows["adam update"] = time_call(
        lambda: be.adam_update(ws, bs, dws, dbs, mws, mbs, vws, vbs,
                               1, 1e-3, nn.ADAM_BETA1, nn.ADAM_BETA2,
                               nn.ADAM_EPS),
        repeats)

    def train_steps():
        m = nn.init_autoencoder(cfg)
        s = nn.init_adam_state(m)
        for _ in range(20):
            _, grads = nn.loss_and_grads(m, batch)
            m, s = nn.adam_step(m, grads, s, lr=1e-3)

    kernels.set_backend(name)
    try:
        rows["20 train steps"] = time_call(train_steps, max(3, repeats // 10))
    finally:
        kernels.set_backend("auto")
    return rows


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--batch", type=int, default=64)
    parser.add_argument("--repeats", type=int, default=50)
    args = parser.parse_args()

    names = kernels.available_backends()
    print(f"backends: {', '.join(names)}   batch={args.batch}")
    results = {n: bench_backend(n, args.batch, args.repeats) for n in names}

    ops = list(next(iter(results.values())))
    width = max(len(op) for op in ops)
    header = f"{'op':<{width}}" + "".join(f"  {n:>12}" for n in names)
    if len(names) == 2:
        header += f"  {'speedup':>8}"
    print(header)
    print("-" * len(header))
    for op in ops:
        line = f"{op:<{width}}"
        for n in names:
            line += f"  {results[n][op] * 1e6:>10.1f}us"
        if len(names) == 2:
            a, b = (results[n][op] for n in names)
            line += f"  {a / b:>7.2f}x"
        print(line)


if __name__ == "__main__":
    main()
