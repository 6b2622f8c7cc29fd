"""Compare the numba and pure-numpy kernel paths.

    python benchmarks/bench_kernels.py [--n 20000] [--repeat 5]

Micro-benchmarks call both implementations directly; the end-to-end row runs
one inner training in a subprocess per backend so SPARSEQ_DISABLE_NUMBA takes
effect at import time.
"""
import argparse
import json
import os
import subprocess
import sys
import time

import numpy as np
import scipy.sparse as sp

from sparseq import _kernels


def best_of(fn, repeat):
    fn()  # warm-up (and numba compilation)
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def random_csr(n, avg_deg, seed):
    rng = np.random.default_rng(seed)
    m = sp.random(n, n, density=avg_deg / n, random_state=rng, format="csr")
    m = (m + m.T).tocsr()
    m.sort_indices()
    return m.indptr.astype(np.int64), m.indices.astype(np.int64), m.data.astype(np.float64)


END_TO_END = """
import json, sys, time
from sparseq import _kernels
from sparseq.tagcore import gen_planted_dataset, normalize_adjacency
from sparseq.nnkernel import TrainConfig, train_inner
g, clean, _ = gen_planted_dataset({n}, 32, 4, 0, 1.0, 0)
a = normalize_adjacency(g)
cfg = TrainConfig(hidden_dim=64, max_inner_steps={steps}, patience={steps})
train_inner(clean, a, g, TrainConfig(hidden_dim=64, max_inner_steps=2, patience=2))
t0 = time.perf_counter()
train_inner(clean, a, g, cfg)
print(json.dumps({{"backend": _kernels.backend_name(), "seconds": time.perf_counter() - t0}}))
"""


def end_to_end(n, steps, disable):
    env = dict(os.environ)
    if disable:
        env["SPARSEQ_DISABLE_NUMBA"] = "1"
    else:
        env.pop("SPARSEQ_DISABLE_NUMBA", None)
    out = subprocess.run([sys.executable, "-c", END_TO_END.format(n=n, steps=steps)], env=env,
                         capture_output=True, text=True, check=True)
    return json.loads(out.stdout.strip().splitlines()[-1])


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--n", type=int, default=20000)
    ap.add_argument("--d", type=int, default=64)
    ap.add_argument("--deg", type=float, default=10.0)
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--e2e-n", type=int, default=2000)
    ap.add_argument("--e2e-steps", type=int, default=50)
    args = ap.parse_args()

    if not _kernels.HAVE_NUMBA:
        print("numba is not installed; only the numpy path can be timed")
    indptr, indices, data = random_csr(args.n, args.deg, 0)
    dense = np.random.default_rng(1).standard_normal((args.n, args.d))
    logits = np.random.default_rng(2).standard_normal((args.n, 8))
    labels = np.random.default_rng(3).integers(0, 8, args.n)
    rows = np.arange(0, args.n, 2, dtype=np.int64)

    cases = [
        ("spmm", lambda: _kernels.spmm_numpy(indptr, indices, data, dense),
         lambda: _kernels.spmm_numba(indptr, indices, data, dense)),
        ("softmax_xent", lambda: _kernels.softmax_xent_numpy(logits, labels, rows),
         lambda: _kernels.softmax_xent_numba(logits, labels, rows)),
    ]
    print(f"N={args.n} D={args.d} nnz={indices.shape[0]}")
    print(f"{'kernel':<14}{'numpy (ms)':>12}{'numba (ms)':>12}{'speedup':>10}")
    for name, f_np, f_nb in cases:
        t_np = best_of(f_np, args.repeat)
        if _kernels.HAVE_NUMBA:
            ref, got = f_np(), f_nb()
            a, b = (ref, got) if name == "spmm" else (ref[1], got[1])
            assert np.allclose(a, b, rtol=1e-12, atol=1e-12), f"{name}: backends disagree"
            t_nb = best_of(f_nb, args.repeat)
            print(f"{name:<14}{1e3 * t_np:>12.2f}{1e3 * t_nb:>12.2f}{t_np / t_nb:>9.1f}x")
        else:
            print(f"{name:<14}{1e3 * t_np:>12.2f}{'-':>12}{'-':>10}")

    print(f"\ninner training, N={args.e2e_n}, {args.e2e_steps} steps")
    for disable in (True, False):
        if not disable and not _kernels.HAVE_NUMBA:
            continue
        r = end_to_end(args.e2e_n, args.e2e_steps, disable)
        print(f"  {r['backend']:<8}{r['seconds']:.3f} s")


if __name__ == "__main__":
    main()
