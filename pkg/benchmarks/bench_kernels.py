"""Compare the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py
"""

import timeit

import numpy as np

from freedfml import _kernels_py, kernels


def main():
    if kernels.BACKEND != "cython":
        print("compiled kernels not built; nothing to compare")
        return
    from freedfml import _ckernels

    rng = np.random.default_rng(0)
    logits = rng.standard_normal((50, 5))
    other = rng.standard_normal((50, 5))
    labels = rng.integers(0, 5, size=50)
    weights = (rng.random(50) > 0.5).astype(np.float64)
    payload = rng.standard_normal(20_000).tobytes()

    cases = {
        "cross_entropy_fwd_bwd [50x5]": lambda m: m.cross_entropy_fwd_bwd(logits, labels),
        "kl_rows + kl_grads [50x5]": lambda m: m.kl_grads(*m.kl_rows(logits, other)[1:], weights),
        "log_softmax_rows [50x5]": lambda m: m.log_softmax_rows(logits),
        "fnv1a64 [160 kB]": lambda m: m.fnv1a64(payload),
    }
    print(f"{'kernel':32s} {'numpy us':>10s} {'cython us':>10s} {'speedup':>8s}")
    for name, fn in cases.items():
        number = 3 if "fnv" in name else 2000
        py = min(timeit.repeat(lambda: fn(_kernels_py), number=number, repeat=3)) / number
        cy = min(timeit.repeat(lambda: fn(_ckernels), number=number, repeat=3)) / number
        print(f"{name:32s} {py * 1e6:10.1f} {cy * 1e6:10.1f} {py / cy:8.1f}x")


if __name__ == "__main__":
    main()
