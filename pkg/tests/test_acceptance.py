"""Acceptance suite: one PASS/FAIL line per criterion.

Run with ``pytest tests/test_acceptance.py -s`` (or as a script) to see the
lines; under plain ``pytest`` they are still emitted via the terminal.
The overfit criterion trains for about a minute on one core.
"""
import contextlib
import io
import json
import math
import sys
import tempfile
import time
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))
from helpers import captions, micro_config, perturbed_model  # noqa: E402

from vidtext import autodiff as ad  # noqa: E402
from vidtext import data as synth  # noqa: E402
from vidtext import metrics  # noqa: E402
from vidtext import model as M  # noqa: E402
from vidtext import nn  # noqa: E402
from vidtext import objectives as O  # noqa: E402
from vidtext import training as T  # noqa: E402
from vidtext.config import parse_config  # noqa: E402


# -- criterion 1 ---------------------------------------------------------------
def _op_cases(rng):
    def w(shape):
        return ad.Tensor(np.random.default_rng(1).uniform(-1, 1, shape))

    def lin(fn, shape):
        return lambda *xs: ad.sum(ad.mul(fn(*xs), w(shape)))

    A, B = rng.uniform(-2, 2, (3, 4)), rng.uniform(-2, 2, (4, 2))
    X = rng.uniform(-2, 2, (4, 8))
    P = rng.uniform(0.2, 2, (3, 4))
    mask = np.array([True, True, False, True])
    return [
        ("matmul", lin(ad.matmul, (3, 2)), [A, B]),
        ("matmul-batched", lin(ad.matmul, (2, 3, 2)), [rng.uniform(-2, 2, (2, 3, 4)), B]),
        ("add", lin(ad.add, (3, 4)), [A, P]),
        ("sub", lin(ad.sub, (3, 4)), [A, P]),
        ("mul", lin(ad.mul, (3, 4)), [A, P]),
        ("div", lin(ad.div, (3, 4)), [A, P]),
        ("scale", lin(lambda x: ad.scale(x, 2.5), (3, 4)), [A]),
        ("exp", lin(ad.exp, (3, 4)), [A]),
        ("log", lin(ad.log, (3, 4)), [P]),
        ("relu", lin(ad.relu, (3, 4)), [A]),
        ("gelu", lin(ad.gelu, (3, 4)), [A]),
        ("minimum", lin(lambda x: ad.minimum(x, 0.3), (3, 4)), [A]),
        ("sum", lin(lambda x: ad.sum(x, axis=0), (4,)), [A]),
        ("mean", lin(lambda x: ad.mean(x, axis=1), (3,)), [A]),
        ("concat", lin(lambda a, b: ad.concat([a, b], axis=0), (6, 4)), [A, P]),
        ("slice", lin(lambda x: ad.slice_rows(x, 1, 3), (2, 4)), [A]),
        ("reshape", lin(lambda x: ad.reshape(x, (2, 6)), (2, 6)), [A]),
        ("permute", lin(lambda x: ad.permute(ad.reshape(x, (3, 2, 2)), (1, 2, 0)), (2, 2, 3)), [A]),
        ("transpose", lin(ad.transpose, (4, 3)), [A]),
        ("take", lin(lambda x: ad.take(x, [0, 2, 2]), (3, 4)), [A]),
        ("softmax", lin(lambda x: ad.softmax(x, 1), (3, 4)), [A]),
        ("softmax-masked", lin(lambda x: ad.softmax(x, 1, mask=mask), (3, 4)), [A]),
        ("log_softmax", lin(lambda x: ad.log_softmax(x, 1), (3, 4)), [A]),
        ("layer_norm", lin(ad.layer_norm, (4, 8)), [X, rng.uniform(-2, 2, 8), rng.uniform(-2, 2, 8)]),
        ("l2_normalize", lin(lambda x: ad.l2_normalize(x, 1), (3, 4)), [A]),
        ("composite", lambda x: ad.mean(ad.mul(ad.log(ad.softmax(x, 1)), w((3, 4)))), [A]),
    ]


def _full_model_error():
    rng = np.random.default_rng(11)
    state = perturbed_model(micro_config(), 11, scale=0.2)
    frames = rng.uniform(size=(3, 3, 4, 4))
    toks = captions(rng, 3, 5, 9)
    eos, mask = M.caption_layout(toks)

    def f(*_):
        V, v = M.encode_video(ad.Tensor(frames), state, temporal=True)
        W, w, _ = M.encode_text(toks, state)
        score = lambda vi, ti: M.matching_score(M.fuse(ad.take(V, vi), ad.take(W, ti), eos[ti], mask[ti], state), state)  # noqa: E731
        return O.training_loss(ad.l2_normalize(v), ad.l2_normalize(w), T.tau_tensor(state), score_pairs=score, K=1).loss

    ts = [t for _, t in state.named()]
    return ad.grad_check(f, ts, 1e-5, abs_tol=1e-8)


def criterion_1():
    rng = np.random.default_rng(0)
    start = time.perf_counter()
    worst_op, worst_name = 0.0, ""
    for name, f, arrays in _op_cases(rng):
        err = ad.grad_check(f, [ad.Tensor(a.copy()) for a in arrays], 1e-5)
        if err > worst_op:
            worst_op, worst_name = err, name
    model_err = _full_model_error()
    elapsed = time.perf_counter() - start
    ok = worst_op < 1e-5 and model_err < 1e-4 and elapsed < 60
    return ok, f"ops max rel err {worst_op:.2e} ({worst_name}), full model {model_err:.2e}, {elapsed:.1f}s"


# -- criterion 2 ---------------------------------------------------------------
def criterion_2():
    rng = np.random.default_rng(2)
    ok = True
    for _ in range(200):
        n, m = rng.integers(1, 8, 2)
        S = rng.normal(0, 3, (n, m))
        D = metrics.dual_softmax(S)
        ok &= np.allclose(metrics.dual_softmax(S.T), D.T, rtol=0, atol=1e-12)
        ok &= np.allclose(metrics.dual_softmax(S + rng.normal(0, 10)), D, rtol=0, atol=1e-12)
        ok &= bool(np.all(D > 0) and np.all(D < 1) or D.size == 1 and D[0, 0] == 1.0)
    D = metrics.dual_softmax(np.array([[2.0, 0.0], [0.0, 2.0]]))
    sig = math.exp(2) / (math.exp(2) + 1)
    ok &= abs(D[0, 0] - sig**2) < 1e-9 and abs(D[1, 1] - sig**2) < 1e-9 and abs(D[0, 0] - 0.7758) < 5e-5
    return bool(ok), f"2x2 example diag {D[0, 0]:.10f} (oracle {sig**2:.10f}); 200 random matrices"


# -- criterion 3 ---------------------------------------------------------------
def _brute_rank(S, q, direction):
    n = S.shape[0]
    if direction == "t2v":
        return sum(1 for i in range(n) if S[i][q] >= S[q][q])
    return sum(1 for j in range(n) if S[q][j] >= S[q][q])


def _brute_report(r):
    n, s = len(r), sorted(r)
    med = s[n // 2] if n % 2 else (s[n // 2 - 1] + s[n // 2]) / 2
    return (sum(x <= 1 for x in r) / n, sum(x <= 5 for x in r) / n, sum(x <= 10 for x in r) / n, med, sum(r) / n)


def criterion_3():
    rng = np.random.default_rng(3)
    mismatches, ties = 0, 0
    for _ in range(100):
        S = np.round(rng.normal(size=(20, 20)), 1)
        src = rng.integers(0, 20, (25, 2))
        dst = rng.integers(0, 20, (25, 2))
        S[dst[:, 0], dst[:, 1]] = S[src[:, 0], src[:, 1]]
        S[np.arange(0, 20, 4), np.arange(1, 21, 4) % 20] = S[np.arange(0, 20, 4), np.arange(0, 20, 4)]
        for direction in ("t2v", "v2t"):
            fast = list(metrics.ranks(S, direction))
            slow = [_brute_rank(S, q, direction) for q in range(20)]
            rep = metrics.report(fast, direction)
            mismatches += fast != slow
            mismatches += (rep.r1, rep.r5, rep.r10, rep.mdr, rep.mnr) != _brute_report(slow)
            ties += sum(1 for q in range(20) for k in range(20) if k != q and
                        (S[k, q] if direction == "t2v" else S[q, k]) == S[q, q])
    return mismatches == 0, f"100 matrices x 2 directions, {ties} tied comparisons, {mismatches} mismatches"


# -- criterion 4 ---------------------------------------------------------------
def criterion_4():
    rng = np.random.default_rng(4)

    def unit(n, d):
        x = rng.normal(size=(n, d))
        return x / np.linalg.norm(x, axis=1, keepdims=True)

    v, w = ad.Tensor(unit(6, 8)), ad.Tensor(unit(6, 8))
    qv, qt = O.RepresentationQueue(16, 8), O.RepresentationQueue(16, 8)
    distilled = O.distilled_contrastive_loss(v, w, unit(6, 8), unit(6, 8), qv, qt, 0.07, 0.0).item()
    plain = O.contrastive_loss(O.cosine_sim_matrix(v, w), 0.07).item()
    y_m, y = rng.dirichlet(np.ones(6)), np.eye(6)[1]
    blend_ok = np.array_equal(O.blend_targets(y_m, y, 0.0), y) and np.array_equal(O.blend_targets(y_m, y, 1.0), y_m)
    s, t = M.init_model(M.ModelConfig(), 0), M.init_model(M.ModelConfig(), 1)
    kept = {k: x.data.copy() for k, x in t.named()}
    M.ema_update(t, s, 1.0)
    ema1 = all(kept[k].tobytes() == x.data.tobytes() for k, x in t.named())
    M.ema_update(t, s, 0.0)
    ema0 = all(t[k].data.tobytes() == x.data.tobytes() for k, x in s.named())
    ok = distilled == plain and blend_ok and ema1 and ema0
    return ok, f"distilled {distilled!r} vs plain {plain!r}; blend endpoints {blend_ok}; ema m=1 {ema1}, m=0 {ema0}"


# -- criterion 5 ---------------------------------------------------------------
def _micro_experiment(out_dir, **kw):
    from helpers import tiny_experiment
    return tiny_experiment(out_dir, **kw)


def criterion_5(tmp):
    cfg = _micro_experiment(tmp / "c5", fusion="1", batch_size=4, K=2, epochs=1)
    T.train(cfg)
    steps = [json.loads(x) for x in (tmp / "c5" / T.LOG_NAME).read_text().splitlines()]
    pairs = {r["fusion_pairs"] for r in steps if r["type"] == "step"}
    rng = np.random.default_rng(5)
    hits = 0
    for _ in range(10_000):
        B = int(rng.integers(2, 17))
        K = int(rng.integers(0, B))
        S = rng.integers(-3, 4, (B, B)).astype(float) if rng.random() < 0.5 else rng.normal(size=(B, B))
        tn, vn = O.select_hard_negatives(S, K)
        hits += int(np.any(tn == np.arange(B)[:, None]) or np.any(vn == np.arange(B)[:, None]))
    ok = pairs == {20} and hits == 0
    return ok, f"logged fusion pairs per step {sorted(pairs)} (expected 20); diagonal selections in 10000 trials: {hits}"


# -- criterion 6 ---------------------------------------------------------------
def overfit_config(out_dir):
    return parse_config(None, {"temporal": "1", "fusion": "1", "epochs": "300", "eval_every": "10",
                               "stop_r1": "0.95", "out_dir": str(out_dir)})


def criterion_6(tmp):
    cfg = overfit_config(tmp / "c6")
    ds = synth.generate(T.synth_spec(cfg), cfg.data.data_seed)
    start = time.perf_counter()
    res = T.train(cfg, ds)
    elapsed = time.perf_counter() - start
    plain_t, plain_v, _ = T.evaluate_checkpoint(res.checkpoint, ds, dual=False)
    dual_t, dual_v, _ = T.evaluate_checkpoint(res.checkpoint, ds, dual=True)
    epochs = res.evals[-1]["epoch"] + 1
    ok = (len(ds) == 64 and epochs <= 300 and plain_t.r1 >= 0.95 and plain_v.r1 >= 0.95
          and dual_t.r1 >= plain_t.r1 and dual_v.r1 >= plain_v.r1 and elapsed < 600)
    return ok, (f"{epochs} epochs, {elapsed:.0f}s: R@1 t2v {plain_t.r1:.3f} v2t {plain_v.r1:.3f}; "
                f"with dual t2v {dual_t.r1:.3f} v2t {dual_v.r1:.3f}")


# -- criterion 7 ---------------------------------------------------------------
ROWS = ["Base", "Base+M&D", "Base+Fusion", "Base+M&D+Fusion", "Base+Temp+Fusion", "Base+M&D+Dual",
        "Base+Temp+M&D+Fusion", "Base+Temp+Fusion+Dual"]


def criterion_7(tmp):
    from vidtext import cli
    out = tmp / "c7"
    with contextlib.redirect_stdout(io.StringIO()):
        code = cli.main(["ablate", "--epochs", "1", "--eval-every", "0", "--out-dir", str(out)])
    table = json.loads((out / "ablation.json").read_text())
    rows = {r["row"]: r for r in table["rows"]}
    structure = code == 0 and [r["row"] for r in table["rows"]] == ROWS
    reuse = True
    for dual, src in (("Base+M&D+Dual", "Base+M&D"), ("Base+Temp+Fusion+Dual", "Base+Temp+Fusion")):
        d = rows[dual]
        reuse &= (not d["trained"] and d["checkpoint_source_row"] == src
                  and d["checkpoint_sha256"] == rows[src]["checkpoint_sha256"]
                  and d["checkpoint_sha256"] == T.file_digest(d["checkpoint"]))
    ordered = all(r[s]["r1"] <= r[s]["r5"] <= r[s]["r10"] for r in table["rows"] for s in ("t2v", "v2t"))
    trained = sum(r["trained"] for r in table["rows"])
    return structure and reuse and ordered, (f"{len(table['rows'])} rows in order {structure}; dual rows reuse "
                                            f"checkpoints {reuse} ({trained} trainings); r1<=r5<=r10 {ordered}")


# -- criterion 8 ---------------------------------------------------------------
def criterion_8(tmp):
    cfg = parse_config(None, {"temporal": "1", "distill": "1", "fusion": "1", "epochs": "2", "eval_every": "1",
                              "out_dir": str(tmp / "c8")})
    outs = []
    for _ in range(2):
        T.train(cfg)
        outs.append(tuple((tmp / "c8" / n).read_bytes() for n in (T.CHECKPOINT_NAME, T.LOG_NAME)))
    same_run = outs[0] == outs[1]
    ckpt = tmp / "c8" / T.CHECKPOINT_NAME
    s, t, meta = M.load_checkpoint(ckpt)
    M.save_checkpoint(tmp / "c8" / "again.bin", s, t, {k: v for k, v in meta.items() if k != "model"})
    ckpt_rt = (tmp / "c8" / "again.bin").read_bytes() == ckpt.read_bytes()
    ds = synth.generate(T.synth_spec(cfg), 0)
    synth.save(ds, tmp / "c8" / "d.bin")
    synth.save(synth.load(tmp / "c8" / "d.bin"), tmp / "c8" / "d2.bin")
    data_rt = (tmp / "c8" / "d.bin").read_bytes() == (tmp / "c8" / "d2.bin").read_bytes()
    ok = same_run and ckpt_rt and data_rt
    return ok, f"identical checkpoint+log across runs {same_run}; checkpoint round trip {ckpt_rt}; dataset round trip {data_rt}"


# -- criterion 9 ---------------------------------------------------------------
def criterion_9():
    cfg = parse_config(None, {"n_angles": "5", "n_blob_counts": "5", "n_shades": "4", "temporal": "1"})
    ds = synth.generate(T.synth_spec(cfg), 0)
    state = M.init_model(cfg.model, cfg.train.seed)
    S = T.similarity_matrix(state, ds, temporal=True)
    t2v, v2t = metrics.evaluate(S)
    N = len(ds)
    # hits = fixed points of a uniform random permutation: mean 1, variance 1
    mean, sd = 1.0, 1.0
    hits = [round(r.r1 * N) for r in (t2v, v2t)]
    ok = N == 100 and all(abs(h - mean) <= 3 * sd for h in hits)
    return ok, f"N={N}: R@1 t2v {t2v.r1:.2f}, v2t {v2t.r1:.2f} (hits {hits}, null {mean:.0f} +/- {3 * sd:.0f})"


CRITERIA = {
    1: ("gradient fidelity", criterion_1, False),
    2: ("dual-softmax algebra", criterion_2, False),
    3: ("metric oracle equivalence", criterion_3, False),
    4: ("reduction identities", criterion_4, False),
    5: ("hard-negative accounting", criterion_5, True),
    6: ("overfit experiment", criterion_6, True),
    7: ("ablation harness", criterion_7, True),
    8: ("determinism and persistence", criterion_8, True),
    9: ("chance-level sanity", criterion_9, False),
}


def run(number, tmp):
    name, fn, needs_tmp = CRITERIA[number]
    ok, detail = fn(tmp) if needs_tmp else fn()
    line = f"criterion {number} [{name}]: {'PASS' if ok else 'FAIL'} - {detail}"
    return ok, line


@pytest.mark.parametrize("number", sorted(CRITERIA))
def test_criterion(number, tmp_path, request):
    ok, line = run(number, tmp_path)
    reporter = request.config.pluginmanager.get_plugin("terminalreporter")
    if reporter is not None:
        reporter.write_line("")
        reporter.write_line(line)
    else:
        print(line)
    assert ok, line


if __name__ == "__main__":
    failed = 0
    with tempfile.TemporaryDirectory() as d:
        for n in sorted(CRITERIA):
            sub = Path(d) / str(n)
            sub.mkdir()
            ok, line = run(n, sub)
            print(line, flush=True)
            failed += not ok
    sys.exit(1 if failed else 0)
