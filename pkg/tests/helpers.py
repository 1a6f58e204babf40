"""Shared fixtures-by-function for the test modules."""
import numpy as np

from vidtext import model as M

MICRO = dict(frame_size=4, patch=2, n_frames=3, n_words=5, vocab=9, video_width=8, text_width=8,
             embed_dim=8, heads=2, mlp_ratio=2, video_layers=1, text_layers=1, temporal_layers=1,
             fusion_layers=1)


def micro_config(**kw):
    return M.ModelConfig(**{**MICRO, **kw})


def perturbed_model(cfg, seed=0, scale=0.3):
    """Initialised model moved off the symmetric init point (zero biases, unit gains)."""
    state = M.init_model(cfg, seed)
    rng = np.random.default_rng(seed + 1000)
    for name, t in state.named():
        if name != "logit_scale":
            t.data = t.data + rng.normal(0, scale, t.shape)
    return state


def captions(rng, B, n_words, vocab, lengths=None):
    out = np.zeros((B, n_words), dtype=np.int64)
    for i in range(B):
        n = lengths[i] if lengths is not None else rng.integers(1, n_words - 1)
        out[i, 0] = M.BOS_ID
        out[i, 1:1 + n] = rng.integers(M.EOS_ID + 1, vocab, n)
        out[i, 1 + n] = M.EOS_ID
    return out


def brute_softmax(row):
    e = [np.exp(x - max(row)) for x in row]
    return np.array([x / sum(e) for x in e])


def tiny_experiment(out_dir, **overrides):
    """Seconds-scale experiment: micro model, 8 synthetic pairs."""
    from vidtext.config import parse_config

    base = {**{k: str(v) for k, v in MICRO.items()}, "frame_size": "8", "n_frames": "2", "n_words": "6",
            "vocab": "16", "n_angles": "2", "n_blob_counts": "2", "n_shades": "2", "batch_size": "4",
            "K": "1", "epochs": "2", "eval_every": "1", "queue_capacity": "8", "out_dir": str(out_dir)}
    base.update({k: str(v) for k, v in overrides.items()})
    return parse_config(None, base)
