"""Time the numba kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 50] [--epoch]

Each kernel runs on the row shapes the encoder actually sees at desk scale
(batch 64 with width 64, attention scores of shape [64*4*2, 2], the 128x128
retrieval matrix) plus one larger shape.  Outputs of the two backends are
compared before timing.  ``--epoch`` additionally times one training epoch
end to end in two subprocesses, one with ``LIGHTCRL_DISABLE_NUMBA=1``.
"""

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from lightcrl import kernels
from lightcrl._jit import HAVE_NUMBA


def _cases(rng):
    def mat(r, c):
        return np.ascontiguousarray(rng.standard_normal((r, c)))

    for r, c in ((64, 64), (512, 2), (128, 128), (4096, 256)):
        x = mat(r, c)
        g = mat(r, c)
        gain, bias = rng.standard_normal(c), rng.standard_normal(c)
        y = kernels.NUMPY_KERNELS["softmax_rows"](x)
        ly = kernels.NUMPY_KERNELS["log_softmax_rows"](x)
        _, xhat, rstd = kernels.NUMPY_KERNELS["layer_norm"](x, gain, bias, 1e-5)
        norms = kernels.NUMPY_KERNELS["row_norms"](x)
        unit = x / norms[:, None]
        shape = f"{r}x{c}"
        yield "softmax_rows", shape, (x,)
        yield "softmax_rows_backward", shape, (y, g)
        yield "log_softmax_rows", shape, (x,)
        yield "log_softmax_rows_backward", shape, (ly, g)
        yield "layer_norm", shape, (x, gain, bias, 1e-5)
        yield "layer_norm_backward", shape, (g, xhat, rstd, gain)
        yield "row_norms", shape, (x,)
        yield "l2_normalize_backward", shape, (unit, norms, g)
        if r == c:
            yield "partner_ranks", shape, (x,)


def _max_diff(a, b):
    if isinstance(a, tuple):
        return max(_max_diff(u, v) for u, v in zip(a, b))
    return float(np.max(np.abs(np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64))))


def bench_kernels(repeat):
    rng = np.random.default_rng(0)
    print(f"{'kernel':<28}{'shape':>10}{'numpy us':>12}{'numba us':>12}{'speedup':>9}{'max diff':>11}")
    for name, shape, args in _cases(rng):
        npf = kernels.NUMPY_KERNELS[name]
        nbf = kernels.NUMBA_KERNELS[name]
        diff = _max_diff(npf(*args), nbf(*args))  # also triggers compilation
        t_np = min(timeit.repeat(lambda: npf(*args), number=repeat, repeat=3)) / repeat * 1e6
        t_nb = min(timeit.repeat(lambda: nbf(*args), number=repeat, repeat=3)) / repeat * 1e6
        print(f"{name:<28}{shape:>10}{t_np:>12.1f}{t_nb:>12.1f}{t_np / t_nb:>8.2f}x{diff:>11.1e}")


_EPOCH_SNIPPET = """
import time
from lightcrl import init_parameters, standard_synthetic, TrainConfig, kernels
from lightcrl.train import Trainer, split_train_val
_, train, _ = standard_synthetic()
tr, va = split_train_val(train, 0.1, 0)
t = Trainer(init_parameters(32, 48, seed=0), tr, va, TrainConfig(max_epochs=1))
t.run_epoch()  # warm-up and compilation
t0 = time.perf_counter()
for _ in range(3):
    t.run_epoch()
print(kernels.BACKEND, (time.perf_counter() - t0) / 3)
"""


def bench_epoch():
    for disable in ("1", "0"):
        env = dict(os.environ, LIGHTCRL_DISABLE_NUMBA=disable)
        out = subprocess.run([sys.executable, "-c", _EPOCH_SNIPPET], env=env, capture_output=True, text=True, check=True)
        backend, seconds = out.stdout.split()
        print(f"one training epoch (8 steps + validation), {backend:>5}: {float(seconds) * 1e3:8.1f} ms")


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=50)
    p.add_argument("--epoch", action="store_true", help="also time a full training epoch per backend")
    args = p.parse_args()
    if not HAVE_NUMBA:
        sys.exit("numba is not installed; nothing to compare")
    print(f"active backend: {kernels.BACKEND}")
    bench_kernels(args.repeat)
    if args.epoch:
        bench_epoch()


if __name__ == "__main__":
    main()
