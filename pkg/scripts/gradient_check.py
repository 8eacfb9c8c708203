"""Analytic backprop vs central differences on a random batch.

Uses the finite-difference oracle under tests/, so needs the test extras.
"""
import argparse
import sys
import time
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "tests"))
import oracles  # noqa: E402

from mpdl.network import backward, forward, init_model  # noqa: E402


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--seed", type=int, default=12)
    ap.add_argument("--batch", type=int, default=8)
    ap.add_argument("--channels", type=int, default=4)
    ap.add_argument("--h", type=float, default=1e-5)
    args = ap.parse_args()

    model = init_model(args.channels, args.seed)
    rng = np.random.default_rng(args.seed)
    x = rng.random((args.batch, args.channels, 5, 5))
    y = rng.integers(0, 6, args.batch)
    _, cache = forward(model, x)
    analytic = backward(model, cache, y)
    t0 = time.perf_counter()
    numeric = oracles.fd_gradients(model.params, x, y, h=args.h)
    print(f"finite differences over {model.n_params()} parameters in {time.perf_counter() - t0:.1f}s")
    for name, a, b in zip(model.arch.param_names(), analytic, numeric):
        elem = np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-5)
        print(f"  {name:12s} tensor rel {oracles.tensor_rel_error(a, b):.2e}  max elem {elem.max():.2e}")


if __name__ == "__main__":
    main()
