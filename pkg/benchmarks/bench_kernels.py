"""Compare the Cython and numpy im2col/col2im kernels, alone and inside a training step.

    python benchmarks/bench_kernels.py [--repeat 20]

The numpy path is what ``PROLAD_KERNELS=python`` selects at import time.
"""
import argparse
import timeit

import numpy as np

from prolad import kernels, nn
from prolad import tensor as T


def _kernel_case(n=64, c=16, size=16, k=3, stride=1):
    xp = np.random.default_rng(0).normal(size=(n, c, size + 2, size + 2))
    cols = kernels.im2col(xp, k, k, stride)
    return xp, cols, k, stride


def _backbone_step(bb, x, y):
    logits = T.matmul(bb(x), T.Tensor(np.eye(bb.embed_dim)[:, :4]))
    nn.cross_entropy(logits, y).backward()


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=20)
    args = p.parse_args(argv)

    try:
        kernels.use_backend("cython")
    except ImportError:
        print("Cython kernels are not built; only the numpy backend is available")
        return
    xp, cols, k, stride = _kernel_case()
    hp, wp = xp.shape[2:]
    bb = nn.Backbone(seed=0)
    x = np.random.default_rng(1).normal(size=(32, 3, 16, 16))
    y = np.arange(32) % 4

    results = {}
    for name in ("python", "cython"):
        kernels.use_backend(name)
        im = min(timeit.repeat(lambda: kernels.im2col(xp, k, k, stride), number=1, repeat=args.repeat))
        ci = min(timeit.repeat(lambda: kernels.col2im(cols, hp, wp, stride), number=1,
                               repeat=args.repeat))
        step = min(timeit.repeat(lambda: _backbone_step(bb, x, y), number=1,
                                 repeat=max(3, args.repeat // 4)))
        results[name] = (im, ci, step)

    # both backends must agree before their timings mean anything
    kernels.use_backend("python")
    ref = kernels.col2im(cols, hp, wp, stride), kernels.im2col(xp, k, k, stride)
    kernels.use_backend("cython")
    got = kernels.col2im(cols, hp, wp, stride), kernels.im2col(xp, k, k, stride)
    assert all(np.allclose(a, b, atol=1e-12) for a, b in zip(ref, got))

    print(f"{'operation':24s}{'numpy ms':>12s}{'cython ms':>12s}{'speedup':>10s}")
    for i, label in enumerate(["im2col 64x16x16x16", "col2im 64x16x16x16", "backbone fwd+bwd (32)"]):
        py, cy = results["python"][i] * 1e3, results["cython"][i] * 1e3
        print(f"{label:24s}{py:12.3f}{cy:12.3f}{py / cy:9.2f}x")


if __name__ == "__main__":
    main()
