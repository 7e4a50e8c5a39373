"""Compare the numba and pure-numpy kernel backends at training shapes.

    python benchmarks/bench_kernels.py [--repeat 20]

Reports the best-of-N wall time per call for each kernel and for a full
forward/backward pass on one default batch, and checks that the two backends
return identical bytes.
"""

import argparse
import timeit

import numpy as np

from protopnetpp import kernels
from protopnetpp.losses import HyperParams, total_objective
from protopnetpp.model import build_model, forward


def cases(rng):
    # first conv of each stage on a batch of 8 64x64 images, padding 1
    xp = rng.normal(size=(8, 16, 66, 66)).astype(np.float32)
    cols = rng.normal(size=(8 * 32 * 32, 16 * 9))
    feats = np.maximum(rng.normal(size=(8, 32, 8, 8)), 0).astype(np.float32)
    protos = rng.uniform(size=(10, 32)).astype(np.float32)
    return {
        "im2col 8x16x66x66 k3 s1": (kernels.im2col, (xp, 3, 1, 64, 64)),
        "col2im 8x16x66x66 k3 s2": (kernels.col2im, (cols, 8, 16, 66, 66, 3, 2, 32, 32)),
        "pairwise_sqdist 8x32x8x8 M10": (kernels.pairwise_sqdist, (feats, protos)),
    }


def train_step(state, x, y):
    out = forward(state, x)
    loss = total_objective(out, state.prototypes.classes, y, HyperParams()).total
    for p in state.params():
        p.zero_grad()
    loss.backward()


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=20)
    args = parser.parse_args()
    if kernels.numba is None:
        raise SystemExit("numba is not installed; nothing to compare")
    rng = np.random.default_rng(0)
    saved = kernels.BACKEND
    rows = []
    for name, (fn, fargs) in cases(rng).items():
        times, outs = {}, {}
        for backend in ("numpy", "numba"):
            kernels.use_backend(backend)
            outs[backend] = fn(*fargs)  # also triggers compilation
            times[backend] = min(timeit.repeat(lambda: fn(*fargs), number=1, repeat=args.repeat))
        same = outs["numpy"].tobytes() == outs["numba"].tobytes()
        rows.append((name, times["numpy"], times["numba"], same))

    state = build_model(seed=0)
    x = rng.uniform(size=(8, 64, 64)).astype(np.float32)
    y = np.eye(2)[rng.integers(0, 2, 8)]
    times = {}
    for backend in ("numpy", "numba"):
        kernels.use_backend(backend)
        train_step(state, x, y)
        times[backend] = min(timeit.repeat(lambda: train_step(state, x, y), number=1, repeat=max(3, args.repeat // 4)))
    rows.append(("forward+backward batch 8", times["numpy"], times["numba"], None))
    kernels.use_backend(saved)

    print(f"{'kernel':<32} {'numpy ms':>10} {'numba ms':>10} {'speedup':>8}  identical")
    for name, tn, tb, same in rows:
        flag = "" if same is None else ("yes" if same else "NO")
        print(f"{name:<32} {tn * 1e3:>10.2f} {tb * 1e3:>10.2f} {tn / tb:>7.2f}x  {flag}")


if __name__ == "__main__":
    main()
