"""Training loop, evaluation and the ablation harness."""
import dataclasses
import hashlib
import json
import logging
import math
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from vidtext import autodiff as ad
from vidtext import data as synth
from vidtext import metrics
from vidtext import model as M
from vidtext.config import config_from_dict
from vidtext.errors import ConfigError, DomainError, TrainingAborted
from vidtext.objectives import RepresentationQueue, training_loss

logger = logging.getLogger(__name__)

CHECKPOINT_NAME = "checkpoint.bin"
LOG_NAME = "train_log.jsonl"
TIMING_NAME = "timing.jsonl"

# Rows of the ablation table: (Temp, M&D, Fusion, Dual).
ABLATION_ROWS = (
    (False, False, False, False),
    (False, True, False, False),
    (False, False, True, False),
    (False, True, True, False),
    (True, False, True, False),
    (False, True, False, True),
    (True, True, True, False),
    (True, False, True, True),
)


# -- optimiser -------------------------------------------------------------------
def adam_step(params, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update, in place.

    ``params``/``grads`` map names to arrays (``None`` grads count as
    zero), ``lr`` maps each name to its group's learning rate, and
    ``state`` holds ``{"t": int, "m": {...}, "v": {...}}``.
    """
    state["t"] = t = state.get("t", 0) + 1
    m_all = state.setdefault("m", {})
    v_all = state.setdefault("v", {})
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        if g.shape != p.shape:
            raise ValueError(f"{name}: grad shape {g.shape} != param shape {p.shape}")
        m = m_all.get(name)
        v = v_all.get(name)
        if m is None:
            m = np.zeros_like(p)
            v = np.zeros_like(p)
        elif m.shape != p.shape:
            raise ValueError(f"{name}: optimiser state shape {m.shape} != param shape {p.shape}")
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        m_all[name], v_all[name] = m, v
        p -= lr[name] * (m / c1) / (np.sqrt(v / c2) + eps)


class Adam:
    """Adam over a ModelState with per-group learning rates."""

    def __init__(self, state, lr_groups, betas=(0.9, 0.999), eps=1e-8):
        self.model = state
        self.lr = {name: lr_groups[state.param_group(name)] for name, _ in state.named()}
        self.betas = betas
        self.eps = eps
        self.state = {}

    def step(self):
        params = {k: t.data for k, t in self.model.named()}
        grads = {k: t.grad for k, t in self.model.named()}
        adam_step(params, grads, self.state, self.lr, *self.betas, self.eps)

    @property
    def steps(self):
        return self.state.get("t", 0)


# -- data plumbing -----------------------------------------------------------------
def synth_spec(cfg):
    d, m = cfg.data, cfg.model
    return synth.SynthSpec(
        n_angles=d.n_angles,
        n_blob_counts=d.n_blob_counts,
        n_shades=d.n_shades,
        n_concepts=d.n_concepts or None,
        samples_per_concept=d.samples_per_concept,
        n_frames=m.n_frames,
        n_words=m.n_words,
        frame_size=m.frame_size,
        synonyms=d.synonyms,
        jitter=d.jitter,
    )


def load_or_generate(cfg):
    if cfg.paths.dataset:
        ds = synth.load(cfg.paths.dataset)
    else:
        ds = synth.generate(synth_spec(cfg), cfg.data.data_seed)
    check_compatible(cfg.model, ds)
    return ds


def check_compatible(mcfg, ds):
    if (ds.n_frames, ds.n_words, ds.frame_size) != (mcfg.n_frames, mcfg.n_words, mcfg.frame_size):
        raise ConfigError(
            "model",
            f"dataset has n_frames={ds.n_frames}, n_words={ds.n_words}, frame_size={ds.frame_size}; "
            f"model expects {mcfg.n_frames}, {mcfg.n_words}, {mcfg.frame_size}",
        )
    if len(ds.vocab) > mcfg.vocab:
        raise ConfigError("vocab", f"dataset vocabulary has {len(ds.vocab)} words, model vocab is {mcfg.vocab}")


def split(cfg, ds):
    """``(train, eval)`` datasets; eval is the training set unless a holdout is set."""
    frac = cfg.data.holdout_fraction
    if frac <= 0:
        return ds, ds
    order = np.random.default_rng([cfg.data.data_seed, 7]).permutation(len(ds))
    n_eval = max(1, int(round(frac * len(ds))))
    return ds.subset(np.sort(order[n_eval:])), ds.subset(np.sort(order[:n_eval]))


# -- forward passes ---------------------------------------------------------------
def tau_tensor(state):
    return ad.exp(ad.scale(ad.minimum(state["logit_scale"], M.MAX_LOGIT_SCALE), -1.0))


def _normalised_reps(state, frames, tokens, temporal):
    V_emb, v = M.encode_video(ad.Tensor(frames), state, temporal=temporal)
    W_emb, w, eos = M.encode_text(tokens, state)
    return V_emb, ad.l2_normalize(v), W_emb, ad.l2_normalize(w), eos


def step_losses(student, batch, cfg, teacher=None, queues=None):
    """Forward the student (and teacher) on one batch and form the loss."""
    flags = cfg.flags
    V_emb, v, W_emb, w, eos = _normalised_reps(student, batch.frames, batch.tokens, flags.temporal)
    kwargs = {}
    if flags.distill:
        with ad.no_grad():
            _, v_m, _, w_m, _ = _normalised_reps(teacher, batch.frames, batch.tokens, flags.temporal)
        kwargs.update(distill=cfg.distill, v_m=v_m.data, w_m=w_m.data, queues=queues)
    if flags.fusion:
        mask = batch.mask

        def score_pairs(vid, txt):
            f = M.fuse(ad.take(V_emb, vid), ad.take(W_emb, txt), eos[txt], mask[txt], student)
            return M.matching_score(f, student)

        kwargs.update(score_pairs=score_pairs, K=cfg.train.K, literal_vtm=cfg.train.literal_vtm)
    return training_loss(v, w, tau_tensor(student), **kwargs)


@dataclass
class TrainResult:
    checkpoint: Path
    log: list
    student: M.ModelState
    teacher: M.ModelState | None
    evals: list = field(default_factory=list)


def _write_atomic(path, payload):
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(payload)
    os.replace(tmp, path)


def _eval_record(student, eval_ds, temporal, epoch, step):
    S = similarity_matrix(student, eval_ds, temporal)
    t2v, v2t = metrics.evaluate(S)
    return {"type": "eval", "epoch": epoch, "step": step, "t2v": t2v.to_dict(), "v2t": v2t.to_dict()}


def train(cfg, dataset=None):
    """Train per ``cfg``; writes checkpoint, JSON-lines log and timing sidecar."""
    out = Path(cfg.paths.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ds = dataset if dataset is not None else load_or_generate(cfg)
    check_compatible(cfg.model, ds)
    train_ds, eval_ds = split(cfg, ds)
    if cfg.train.batch_size > len(train_ds):
        raise ConfigError("batch_size", f"{cfg.train.batch_size} exceeds training set size {len(train_ds)}")

    student = M.init_model(cfg.model, cfg.train.seed)
    teacher = student.copy(requires_grad=False) if cfg.flags.distill else None
    D = cfg.model.embed_dim
    queues = (RepresentationQueue(cfg.distill.queue_capacity, D), RepresentationQueue(cfg.distill.queue_capacity, D))
    opt = Adam(student, {"base": cfg.train.lr_base, "new": cfg.train.lr_new})
    meta = {"experiment": cfg.to_dict()}

    ckpt_path = out / CHECKPOINT_NAME
    log_path, timing_path = out / LOG_NAME, out / TIMING_NAME
    last_good = None
    records, evals = [], []
    step = 0
    t0 = time.perf_counter()
    with open(log_path, "w") as log_f, open(timing_path, "w") as time_f:
        for epoch in range(cfg.train.epochs):
            for batch in synth.batches(train_ds, cfg.train.batch_size, epoch_seed=cfg.train.seed * 100_003 + epoch):
                try:
                    rep = step_losses(student, batch, cfg, teacher, queues)
                    finite = math.isfinite(rep.total)
                except DomainError as exc:
                    logger.error("non-finite value at step %d: %s", step, exc)
                    finite = False
                if not finite:
                    raise TrainingAborted(f"loss became non-finite at step {step}", last_checkpoint=last_good)
                student.zero_grad()
                rep.loss.backward()
                opt.step()
                if teacher is not None:
                    M.ema_update(teacher, student, cfg.distill.momentum)
                rec = {
                    "type": "step",
                    "step": step,
                    "epoch": epoch,
                    "l_vta": rep.l_vta,
                    "l_vtm": rep.l_vtm,
                    "total": rep.total,
                    "tau": rep.temperature,
                    "fusion_pairs": rep.fusion_pairs,
                }
                records.append(rec)
                log_f.write(json.dumps(rec, sort_keys=True) + "\n")
                time_f.write(json.dumps({"step": step, "wall_time": time.perf_counter() - t0}) + "\n")
                step += 1
            _write_atomic(ckpt_path, M.checkpoint_bytes(student, teacher, meta))
            last_good = ckpt_path
            last_epoch = epoch + 1 == cfg.train.epochs
            if cfg.train.eval_every and ((epoch + 1) % cfg.train.eval_every == 0 or last_epoch):
                ev = _eval_record(student, eval_ds, cfg.flags.temporal, epoch, step)
                evals.append(ev)
                records.append(ev)
                log_f.write(json.dumps(ev, sort_keys=True) + "\n")
                log_f.flush()
                logger.info("epoch %d: t2v R@1 %.3f, v2t R@1 %.3f", epoch, ev["t2v"]["r1"], ev["v2t"]["r1"])
                stop = cfg.train.stop_r1
                if stop > 0 and ev["t2v"]["r1"] >= stop and ev["v2t"]["r1"] >= stop:
                    break
    return TrainResult(ckpt_path, records, student, teacher, evals)


# -- evaluation ---------------------------------------------------------------------
def encode_dataset(state, ds, temporal, chunk=64):
    """Unit-norm video and caption representations for a whole dataset."""
    vs, ws = [], []
    with ad.no_grad():
        for start in range(0, len(ds), chunk):
            sl = slice(start, start + chunk)
            _, v, _, w, _ = _normalised_reps(state, ds.videos[sl], ds.captions[sl], temporal)
            vs.append(v.data)
            ws.append(w.data)
    return np.concatenate(vs), np.concatenate(ws)


def similarity_matrix(state, ds, temporal):
    v, w = encode_dataset(state, ds, temporal)
    return v @ w.T


def file_digest(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def evaluate_checkpoint(checkpoint, dataset=None, dual=False, out_dir=None, tag=None):
    """Encode a dataset under a checkpoint and report both directions.

    Without ``dataset`` the evaluation split is rebuilt from the
    checkpoint's stored experiment config. When ``out_dir`` is given,
    writes ``<tag>_reports.json`` plus the similarity matrix (binary and CSV).
    """
    student, _, meta = M.load_checkpoint(checkpoint)
    cfg = config_from_dict(meta["experiment"])
    if cfg.model != student.config:
        raise ConfigError("model", "checkpoint parameters do not match its stored config")
    if dataset is None:
        _, dataset = split(cfg, load_or_generate(cfg))
    check_compatible(student.config, dataset)
    S = similarity_matrix(student, dataset, cfg.flags.temporal)
    t2v, v2t = metrics.evaluate(S, apply_dual=dual)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        tag = tag or ("dual" if dual else "plain")
        metrics.write_reports(
            out / f"{tag}_reports.json",
            [t2v, v2t],
            dual_softmax=dual,
            checkpoint=str(checkpoint),
            checkpoint_sha256=file_digest(checkpoint),
        )
        metrics.save_sim_binary(out / "similarity.bin", S)
        metrics.save_sim_csv(out / "similarity.csv", S)
    return t2v, v2t, S


# -- ablation ---------------------------------------------------------------------
def ablation_suite(cfg, dataset=None):
    """Train/evaluate each ablation row on one seed and dataset.

    Rows with the Dual flag reuse the checkpoint of the matching non-dual
    row; dual softmax is applied only at evaluation.
    """
    root = Path(cfg.paths.out_dir)
    root.mkdir(parents=True, exist_ok=True)
    ds = dataset if dataset is not None else load_or_generate(cfg)
    _, eval_ds = split(cfg, ds)
    trained = {}
    rows = []
    for temporal, distill, fusion, dual in ABLATION_ROWS:
        key = (temporal, distill, fusion)
        flags = dataclasses.replace(cfg.flags, temporal=temporal, distill=distill, fusion=fusion, dual_softmax=dual)
        label = flags.label()
        if key not in trained:
            run_dir = root / flags.label().replace("&", "").replace("+", "_")
            run_cfg = cfg.replace(
                flags=dataclasses.replace(flags, dual_softmax=False),
                paths=dataclasses.replace(cfg.paths, out_dir=str(run_dir)),
            )
            logger.info("training ablation row %s", label)
            result = train(run_cfg, ds)
            trained[key] = (result.checkpoint, run_cfg.flags.label())
            trained_here = True
        else:
            trained_here = False
        ckpt, source = trained[key]
        digest = file_digest(ckpt)
        t2v, v2t, _ = evaluate_checkpoint(ckpt, eval_ds, dual=dual)
        rows.append(
            {
                "row": label,
                "flags": dataclasses.asdict(flags),
                "trained": trained_here,
                "checkpoint": str(ckpt),
                "checkpoint_sha256": digest,
                "checkpoint_source_row": source,
                "t2v": t2v.to_dict(),
                "v2t": v2t.to_dict(),
            }
        )
    table = {"rows": rows, "experiment": cfg.to_dict()}
    (root / "ablation.json").write_text(json.dumps(table, indent=2, sort_keys=True) + "\n")
    return table


def format_table(table):
    head = f"{'row':<28}{'R@1':>7}{'R@5':>7}{'R@10':>7}{'MdR':>7}{'MnR':>8}   (t2v)"
    lines = [head, "-" * len(head)]
    for row in table["rows"]:
        r = row["t2v"]
        lines.append(f"{row['row']:<28}{r['r1']:>7.3f}{r['r5']:>7.3f}{r['r10']:>7.3f}{r['mdr']:>7.1f}{r['mnr']:>8.2f}")
    return "\n".join(lines)
