"""Spline-kernel backend benchmark: compiled extension vs numpy reference.

Two views:
  1. Raw kernel timings (forward / backward / inverse) over batch sizes.
  2. One small conditional-flow fit per backend, run in subprocesses
     because the backend is chosen at import time.

Usage: python benchmarks/bench_kernels.py [--quick]
"""

import argparse
import subprocess
import sys
import time

import numpy as np

from causalflow.kernels import compiled_impl, numpy_impl
from causalflow.flows.spline import DEFAULT_BOUND, MIN_BIN, MIN_DERIVATIVE

_FIT_SNIPPET = """
import time

import numpy as np

from causalflow.kernels import BACKEND
from causalflow.training import FlowArch, TrainConfig, fit_flow

rng = np.random.default_rng(0)
x = rng.standard_normal((4000, 5))
y = 1.5 * x[:, 0] - x[:, 1] + rng.standard_normal(4000)
arch = FlowArch("conditional", hidden_width=64, depth=2, n_transforms=3,
                n_bins=8, learning_rate=1e-3)
cfg = TrainConfig(max_epochs=%d, patience=1000, n_trials=5,
                  outcome_kind="identity")
t0 = time.perf_counter()
flow, report = fit_flow((x[:3200], y[:3200]), (x[3200:], y[3200:]), arch, cfg, seed=1)
print(f"{BACKEND}: {time.perf_counter() - t0:.2f}s, "
      f"best val nll {report.best_val_nll:.6f} at epoch {report.best_epoch}")
"""


def _inputs(n: int, k: int, rng):
    u = rng.uniform(-5.0, 5.0, size=n)  # includes identity-tail traffic
    tw = rng.normal(size=(n, k))
    th = rng.normal(size=(n, k))
    td = rng.normal(size=(n, k - 1))
    return u, tw, th, td


def _best_of(fn, repeats: int) -> float:
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def bench_kernels(sizes, k: int, repeats: int) -> None:
    rng = np.random.default_rng(42)
    consts = (DEFAULT_BOUND, MIN_BIN, MIN_DERIVATIVE)
    print(f"{'kernel':<10} {'rows':>9} {'numpy':>10} {'compiled':>10} {'speedup':>8}")
    for n in sizes:
        u, tw, th, td = _inputs(n, k, rng)
        z, _ = numpy_impl.rqs_forward(u, tw, th, td, *consts)
        gz = rng.normal(size=n)
        gl = rng.normal(size=n)
        cases = {
            "forward": lambda impl: impl.rqs_forward(u, tw, th, td, *consts),
            "backward": lambda impl: impl.rqs_backward(u, tw, th, td, *consts, gz, gl),
            "inverse": lambda impl: impl.rqs_inverse(z, tw, th, td, *consts),
        }
        for name, call in cases.items():
            t_np = _best_of(lambda: call(numpy_impl), repeats)
            if compiled_impl is None:
                print(f"{name:<10} {n:>9} {t_np * 1e3:>8.1f}ms {'-':>10} {'-':>8}")
                continue
            t_c = _best_of(lambda: call(compiled_impl), repeats)
            print(f"{name:<10} {n:>9} {t_np * 1e3:>8.1f}ms {t_c * 1e3:>8.1f}ms "
                  f"{t_np / t_c:>7.2f}x")


def parity_note() -> None:
    if compiled_impl is None:
        print("compiled extension not built; numpy timings only")
        return
    rng = np.random.default_rng(7)
    u, tw, th, td = _inputs(50_000, 8, rng)
    consts = (DEFAULT_BOUND, MIN_BIN, MIN_DERIVATIVE)
    z_np, ld_np = numpy_impl.rqs_forward(u, tw, th, td, *consts)
    z_c, ld_c = compiled_impl.rqs_forward(u, tw, th, td, *consts)
    gap = max(float(np.max(np.abs(z_np - z_c))), float(np.max(np.abs(ld_np - ld_c))))
    print(f"forward parity on 50k rows: max abs gap {gap:.2e}")


def bench_fit(max_epochs: int) -> None:
    print(f"\nconditional-flow fit, {max_epochs} epochs, no early stop:")
    for env_extra in ({"CAUSALFLOW_NO_EXT": "1"}, {}):
        import os

        env = dict(os.environ)
        env.pop("CAUSALFLOW_NO_EXT", None)
        env.update(env_extra)
        out = subprocess.run(
            [sys.executable, "-c", _FIT_SNIPPET % max_epochs],
            capture_output=True, text=True, env=env,
        )
        print(out.stdout.strip() or out.stderr.strip())


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--quick", action="store_true", help="smaller sizes, fewer repeats")
    args = ap.parse_args()
    if args.quick:
        bench_kernels(sizes=(10_000, 100_000), k=8, repeats=3)
    else:
        bench_kernels(sizes=(10_000, 100_000, 400_000), k=8, repeats=5)
    parity_note()
    bench_fit(max_epochs=10 if args.quick else 40)
    return 0


if __name__ == "__main__":
    sys.exit(main())
