"""Compiled vs numpy kernels: per-kernel timings and one full training step.

    python3 benchmarks/bench_kernels.py [--batch 32] [--N 16] [--channels 32] [--repeat 20]

Kernel timings call both implementations directly in this process. The
training-step timing runs a child process per backend, selected with
``LGN_PURE_PYTHON``.
"""

from __future__ import annotations

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from lgn.grad import _pykernels
from lgn.grad.kernels import grid_positions

try:
    from lgn.grad import _ckernels
except ImportError:  # extension not built
    _ckernels = None

STEP_SNIPPET = """
import timeit, numpy as np
from lgn.grad import BACKEND
from lgn.model import LGNModel, ModelConfig
from lgn.text import Vocabulary, pad_batch
from lgn.training import Adam, train_step
from lgn.data import Sample
from lgn.moments import MomentSpan, iou_field, valid_mask
from lgn.training import LabelConfig, label_field
b, n, c = {b}, {n}, {c}
rng = np.random.default_rng(0)
vocab = Vocabulary.build([["w%d" % i for i in range(10)]])
model = LGNModel(ModelConfig(N=n, d_v=c, d_h=c, d_s=c), vocab)
batch = [Sample("q%d" % i, "v%d" % i, rng.normal(size=(c, n, n)) * valid_mask(n), [2, 3, 4], MomentSpan(0.0, 8.0), 16.0)
         for i in range(b)]
labels = [label_field(iou_field(n, s.span, s.duration_s), valid_mask(n), LabelConfig()) for s in batch]
opt = Adam()
step = lambda: train_step(model, opt, batch, labels, np.random.default_rng(1))
step()
print(BACKEND, min(timeit.repeat(step, number=1, repeat={r})))
"""


def _best(fn, repeat: int) -> float:
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def kernel_rows(b: int, n: int, c: int, k: int, repeat: int):
    rng = np.random.default_rng(0)
    x_nchw = rng.normal(size=(b, c, n, n))
    x_nhwc = np.ascontiguousarray(x_nchw.transpose(0, 2, 3, 1))
    feats = rng.normal(size=(n, c))
    tri = grid_positions(n, n, np.triu(np.ones((n, n), dtype=bool)))
    cols = _pykernels.im2col(x_nchw, k)
    cols_tri = np.ascontiguousarray(_pykernels.im2col_nhwc(x_nhwc, k, tri))
    cases = [
        ("im2col", lambda m: m.im2col(x_nchw, k)),
        ("col2im", lambda m: m.col2im(cols, c, k)),
        ("im2col_nhwc[triu]", lambda m: m.im2col_nhwc(x_nhwc, k, tri)),
        ("col2im_nhwc[triu]", lambda m: m.col2im_nhwc(cols_tri, tri, n, n, c, k)),
        ("span_pool[max]", lambda m: m.span_pool(feats, "max")),
        ("span_pool[mean]", lambda m: m.span_pool(feats, "mean")),
    ]
    for name, run in cases:
        t_py = _best(lambda: run(_pykernels), repeat)
        if _ckernels is None:
            yield name, t_py, None, None
            continue
        t_c = _best(lambda: run(_ckernels), repeat)
        same = np.array_equal(run(_pykernels), run(_ckernels))
        yield name, t_py, t_c, same


def step_time(pure: bool, b: int, n: int, c: int, repeat: int) -> str:
    env = dict(os.environ)
    if pure:
        env["LGN_PURE_PYTHON"] = "1"
    else:
        env.pop("LGN_PURE_PYTHON", None)
    code = STEP_SNIPPET.format(b=b, n=n, c=c, r=repeat)
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    return out.stdout.strip()


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--batch", type=int, default=32)
    ap.add_argument("--N", type=int, default=16)
    ap.add_argument("--channels", type=int, default=32)
    ap.add_argument("--kernel", type=int, default=3)
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--no-step", action="store_true", help="skip the training-step comparison")
    args = ap.parse_args(argv)

    print(f"B={args.batch} N={args.N} C={args.channels} k={args.kernel}, best of {args.repeat}")
    print(f"{'kernel':<20}{'numpy ms':>10}{'cython ms':>11}{'speedup':>9}  identical")
    for name, t_py, t_c, same in kernel_rows(args.batch, args.N, args.channels, args.kernel, args.repeat):
        if t_c is None:
            print(f"{name:<20}{t_py * 1e3:>10.3f}{'n/a':>11}{'':>9}  (extension not built)")
        else:
            print(f"{name:<20}{t_py * 1e3:>10.3f}{t_c * 1e3:>11.3f}{t_py / t_c:>8.2f}x  {same}")
    if not args.no_step:
        print("\nfull training step (forward + backward + Adam), seconds:")
        for pure in (True, False):
            if not pure and _ckernels is None:
                continue
            backend, secs = step_time(pure, args.batch, args.N, args.channels, max(3, args.repeat // 4)).split()
            print(f"  {backend:<8}{float(secs):.4f}")


if __name__ == "__main__":
    main()
