"""Compare the compiled kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--json out.json]

Times each kernel on model-sized inputs and one full training step of the
default-width CNN x MLP model, once per backend, after checking that both
backends agree.
"""
import argparse
import json
import sys
import timeit

import numpy as np

from xflow import _backend, _pykernels
from xflow import autodiff as ad
from xflow.models import ModelConfig, build_model

try:
    from xflow import _ckernels
except ImportError:
    _ckernels = None


def kernel_cases(rng):
    x = rng.normal(size=(32, 16, 40, 30))
    cols = rng.normal(size=(32, 16 * 9, 38 * 28))
    pooled, idx = _pykernels.maxpool2x2(x)
    grad = rng.normal(size=pooled.shape)
    return {
        "im2col 32x16x40x30 k3": lambda k: k.im2col(x, 3, 3),
        "col2im 32x16x40x30 k3": lambda k: k.col2im(cols, 16, 40, 30, 3, 3),
        "maxpool 32x16x40x30": lambda k: k.maxpool2x2(x),
        "maxpool backward": lambda k: k.maxpool2x2_backward(grad, idx),
    }


def check_agreement(cases, backends):
    ref = backends["python"]
    for name, fn in cases.items():
        a = fn(ref)
        for other in backends.values():
            b = fn(other)
            for u, v in zip(a if isinstance(a, tuple) else (a,), b if isinstance(b, tuple) else (b,)):
                if not np.array_equal(u, v):
                    sys.exit(f"backends disagree on {name}")


def train_step_case(rng):
    cfg = ModelConfig(architecture="cnn_mlp", num_classes=10, height=32, width=32, mfcc_dim=26, t_avg=11)
    model = build_model(cfg).train()
    encoded = [model.encode_arrays(rng.random((11, 32, 32)), rng.normal(size=(11, 26))) for _ in range(32)]
    labels = np.arange(32) % 10

    def step(kernels):
        _backend.kernels = kernels
        for p in model.parameters():
            p.zero_grad()
        loss, _ = ad.softmax_cross_entropy(model.logits(encoded), labels)
        ad.backward(loss)

    return step


def best_time(fn, repeat):
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--json", dest="json_path")
    args = ap.parse_args(argv)

    backends = {"python": _pykernels}
    if _ckernels is not None:
        backends["cython"] = _ckernels
    else:
        print("compiled extension not built; timing the numpy fallback only")
    rng = np.random.default_rng(0)
    cases = kernel_cases(rng)
    check_agreement(cases, backends)
    step = train_step_case(rng)
    cases["train step cnn_mlp b32 32x32"] = step

    original = _backend.kernels
    results = {}
    try:
        for name, fn in cases.items():
            results[name] = {b: best_time(lambda: fn(k), args.repeat) for b, k in backends.items()}
    finally:
        _backend.kernels = original

    print(f"{'case':<32}" + "".join(f"{b:>12}" for b in backends) + ("    speedup" if len(backends) > 1 else ""))
    for name, times in results.items():
        line = f"{name:<32}" + "".join(f"{times[b] * 1e3:10.2f}ms" for b in backends)
        if len(backends) > 1:
            line += f"   {times['python'] / times['cython']:7.2f}x"
        print(line)
    if args.json_path:
        with open(args.json_path, "w", encoding="utf-8") as fh:
            json.dump(results, fh, indent=1, sort_keys=True)


if __name__ == "__main__":
    main()
