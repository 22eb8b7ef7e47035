"""Numba vs numpy timings for the two hot kernels.

Times the causal row softmax and the ELU+1 linear-attention recurrence,
forward and backward, at the desk training shape (batch 16, 4 heads,
N = 256, d_head = 32) and reports the speedup plus the max abs difference
between the two paths.

    python3 benchmarks/bench_kernels.py [--batch 16 --heads 4 --n 256 --d-head 32 --repeat 5]
"""
import argparse
import json
import timeit

import numpy as np

from sdlab import _kernels as K


def best_of(fn, repeat):
    fn()  # warm-up (and JIT compile on the first numba call)
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def cases(args):
    rng = np.random.default_rng(0)
    M = args.batch * args.heads
    x = rng.standard_normal((M, args.n, args.n)).astype(np.float32)
    g = rng.standard_normal(x.shape).astype(np.float32)
    y = K.causal_softmax_numpy(x)
    q = (np.abs(rng.standard_normal((M, args.n, args.d_head))) + 0.1).astype(np.float32)
    k = (np.abs(rng.standard_normal(q.shape)) + 0.1).astype(np.float32)
    v = rng.standard_normal(q.shape).astype(np.float32)
    go = rng.standard_normal(q.shape).astype(np.float32)
    out, den = K.linear_attention_numpy(q, k, v)
    f = K.DENOM_FLOOR
    return {
        "softmax_fwd": (lambda: K.causal_softmax_numba(x), lambda: K.causal_softmax_numpy(x)),
        "softmax_bwd": (lambda: K.causal_softmax_backward_numba(y, g), lambda: K.causal_softmax_backward_numpy(y, g)),
        "linattn_fwd": (lambda: K.linear_attention_numba(q, k, v, f)[0], lambda: K.linear_attention_numpy(q, k, v, f)[0]),
        "linattn_bwd": (lambda: K.linear_attention_backward_numba(q, k, v, out, den, go, f),
                        lambda: K.linear_attention_backward_numpy(q, k, v, out, den, go, f)),
    }


def max_diff(a, b):
    a = a if isinstance(a, tuple) else (a,)
    b = b if isinstance(b, tuple) else (b,)
    return max(float(np.abs(np.asarray(u, np.float64) - np.asarray(w, np.float64)).max()) for u, w in zip(a, b))


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--batch", type=int, default=16)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--n", type=int, default=256)
    p.add_argument("--d-head", type=int, default=32)
    p.add_argument("--repeat", type=int, default=5)
    p.add_argument("--json", help="also write the table as JSON")
    args = p.parse_args(argv)
    if not K.HAVE_NUMBA:
        raise SystemExit("numba is not importable; nothing to compare")

    rows = []
    print(f"{'kernel':<12} {'numba ms':>10} {'numpy ms':>10} {'speedup':>8} {'max|diff|':>10}")
    for name, (fast, ref) in cases(args).items():
        t_nb, t_np = best_of(fast, args.repeat), best_of(ref, args.repeat)
        diff = max_diff(fast(), ref())
        rows.append({"kernel": name, "numba_s": t_nb, "numpy_s": t_np, "speedup": t_np / t_nb, "max_abs_diff": diff})
        print(f"{name:<12} {t_nb * 1e3:>10.2f} {t_np * 1e3:>10.2f} {t_np / t_nb:>7.2f}x {diff:>10.1e}")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump({"shape": vars(args), "rows": rows}, fh, indent=2)


if __name__ == "__main__":
    main()
