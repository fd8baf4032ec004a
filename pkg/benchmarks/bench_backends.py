"""Compare the numba and pure-numpy kernel backends.

The backend is chosen from the CORA_BACKEND environment variable at import
time, so each backend is timed in a fresh subprocess. Run as:

    python3 benchmarks/bench_backends.py
"""
import json
import os
import subprocess
import sys

_WORKER = r"""
import json
import time

import numpy as np

import cora
from cora import backends as K
from cora import network as N
from cora.quantizer import ClipScheme, QuantSpec
from cora.search import SearchConfig, search


def timeit(fn, repeat=5):
    fn()  # warm-up (also triggers jit compilation on the numba backend)
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


rng = np.random.default_rng(0)
results = {"backend": cora.BACKEND}

x = rng.normal(size=(32, 16, 32, 32))
results["im2col_3x3_32x16x32x32"] = timeit(
    lambda: K.im2col(x, 3, 3, 1, 1, 1, 1))

cols = K.im2col(x, 3, 3, 1, 1, 1, 1)
results["col2im_3x3_32x16x32x32"] = timeit(
    lambda: K.col2im(cols, 16, 32, 32, 3, 3, 1, 1, 1, 1))

results["maxpool_2x2_32x16x32x32"] = timeit(
    lambda: K.maxpool_forward(x, 2, 2))

# end-to-end: a short rank search on a small conv net
layers = [N.Conv(8, 1, 3, 3, padding=(1, 1)), N.ReLU(), N.MaxPool(2, 2),
          N.Conv(16, 8, 3, 3, padding=(1, 1)), N.ReLU(), N.AvgPool(2, 2),
          N.Flatten(), N.Dense(10, 16 * 4 * 4)]
weights = {0: rng.normal(size=(8, 1, 3, 3)) * 0.5,
           3: rng.normal(size=(16, 8, 3, 3)) * 0.2,
           7: rng.normal(size=(10, 256)) * 0.2}
model = N.Model(layers, weights, {}, (1, 16, 16), 10)
imgs = rng.normal(size=(128, 1, 16, 16))
labels = np.argmax(N.forward(model, imgs), axis=1)
spec = QuantSpec(bits=4, clip=ClipScheme.normal(4.0), mode="asymmetric")


def run_search():
    qm = N.quantize_model(model, spec)
    qm.ranks = np.ones(len(qm.conv_ids))
    search(qm, imgs, labels, SearchConfig(iterations=20, batch_size=32))


results["search_20_iters_2conv"] = timeit(run_search, repeat=3)
print(json.dumps(results))
"""


def measure(backend):
    env = dict(os.environ, CORA_BACKEND=backend)
    out = subprocess.run([sys.executable, "-c", _WORKER], env=env,
                         capture_output=True, text=True, check=True)
    return json.loads(out.stdout.strip().splitlines()[-1])


def main():
    rows = [measure("numpy"), measure("numba")]
    keys = [k for k in rows[0] if k != "backend"]
    width = max(len(k) for k in keys)
    print(f"{'kernel':<{width}}  {'numpy (s)':>12}  {'numba (s)':>12}  speedup")
    for k in keys:
        a, b = rows[0][k], rows[1][k]
        print(f"{k:<{width}}  {a:12.6f}  {b:12.6f}  {a / b:7.2f}x")


if __name__ == "__main__":
    main()
