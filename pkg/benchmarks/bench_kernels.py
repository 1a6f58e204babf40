"""Compare the compiled kernels with the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 50]

Times each row kernel on attention-shaped inputs, checks the two backends
agree, then times one desk-scale training step under each backend.
"""
import argparse
import timeit

import numpy as np

from vidtext import kernels


def kernel_cases(rng):
    scores = rng.normal(size=(4096, 16))
    mask = (rng.random((4096, 16)) > 0.2).astype(np.uint8)
    mask[:, 0] = 1
    acts = rng.normal(size=(2048, 32))
    gain, bias = rng.normal(size=32), rng.normal(size=32)
    wide = rng.normal(size=(2048, 128))
    sm = kernels.softmax_rows(scores)
    return {
        "softmax_rows": lambda: kernels.softmax_rows(scores),
        "softmax_rows(mask)": lambda: kernels.softmax_rows(scores, mask),
        "softmax_rows_backward": lambda: kernels.softmax_rows_backward(sm, scores),
        "log_softmax_rows": lambda: kernels.log_softmax_rows(scores),
        "layer_norm_rows": lambda: kernels.layer_norm_rows(acts, gain, bias, 1e-5),
        "gelu": lambda: kernels.gelu(wide),
        "gelu_backward": lambda: kernels.gelu_backward(wide, wide),
    }


def training_step():
    from vidtext import data as synth
    from vidtext import model as M
    from vidtext import training as T
    from vidtext.config import parse_config

    cfg = parse_config(None, {"temporal": "1", "fusion": "1"})
    ds = synth.generate(T.synth_spec(cfg), 0)
    batch = synth.batches(ds, cfg.train.batch_size)[0]
    state = M.init_model(cfg.model, 0)

    def step():
        state.zero_grad()
        T.step_losses(state, batch, cfg).loss.backward()

    return step


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--repeat", type=int, default=50)
    args = ap.parse_args(argv)
    backends = kernels.available_backends()
    if "compiled" not in backends:
        print("compiled extension not built; only the numpy fallback is available")
    results = {}
    outputs = {}
    for b in backends:
        kernels.set_backend(b)
        cases = kernel_cases(np.random.default_rng(0))
        for name, fn in cases.items():
            results[(name, b)] = min(timeit.repeat(fn, number=1, repeat=args.repeat))
            outputs[(name, b)] = fn()
        step = training_step()
        step()
        results[("training step (desk, fusion)", b)] = min(timeit.repeat(step, number=1, repeat=max(3, args.repeat // 10)))

    names = list(dict.fromkeys(n for n, _ in results))
    print(f"{'kernel':<32}" + "".join(f"{b + ' ms':>14}" for b in backends) + ("   speedup" if len(backends) > 1 else ""))
    for n in names:
        row = f"{n:<32}" + "".join(f"{results[(n, b)] * 1e3:>14.3f}" for b in backends)
        if len(backends) > 1:
            row += f"{results[(n, 'python')] / results[(n, 'compiled')]:>9.2f}x"
        print(row)
    if len(backends) > 1:
        worst = 0.0
        for n, b in outputs:
            if b != "compiled":
                continue
            a, p = outputs[(n, "compiled")], outputs[(n, "python")]
            for x, y in zip(a if isinstance(a, tuple) else (a,), p if isinstance(p, tuple) else (p,)):
                worst = max(worst, float(np.max(np.abs(np.asarray(x) - np.asarray(y)))))
        print(f"max |compiled - python| over all kernel outputs: {worst:.2e}")


if __name__ == "__main__":
    main()
