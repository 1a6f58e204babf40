"""Dual-encoder video-text model with temporal, fusion and matching heads.

Pipeline for the video side: frames -> patch transformer (width D_v, mean
over patches) -> projector (D) -> optional temporal transformer with
residual -> mean over frames. Text side: tokens -> transformer (width D_w)
-> projector (D), with the EOS position as the caption representation.
The fusion stack runs on the concatenation [frames; tokens] and its
EOS-position output goes through an LN-FC-ReLU-FC matching head.
"""
import copy
import json
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from vidtext import autodiff as ad
from vidtext import nn
from vidtext.binio import Reader, Writer
from vidtext.errors import (
    ContractError,
    FormatError,
    LengthError,
    MalformedCaptionError,
    ShapeError,
    UnsupportedVersionError,
)

PAD_ID, BOS_ID, EOS_ID = 0, 1, 2

# intensities in [0, 1] are centred before patch embedding
PIXEL_MEAN, PIXEL_STD = 0.5, 0.25

MAX_LOGIT_SCALE = math.log(100.0)
INIT_LOGIT_SCALE = math.log(1.0 / 0.07)

CHECKPOINT_MAGIC = b"VTCKPT\x00\x01"
CHECKPOINT_VERSION = 1

# Parameters under these prefixes form the "new layers" learning-rate group.
NEW_LAYER_PREFIXES = ("temporal.", "fusion.", "head.")


@dataclass(frozen=True)
class ModelConfig:
    frame_size: int = 16
    patch: int = 4
    n_frames: int = 4
    n_words: int = 8
    vocab: int = 32
    video_width: int = 32
    text_width: int = 32
    embed_dim: int = 32
    heads: int = 4
    mlp_ratio: int = 4
    video_layers: int = 2
    text_layers: int = 2
    temporal_layers: int = 2
    fusion_layers: int = 2

    def __post_init__(self):
        if self.frame_size % self.patch:
            raise ValueError(f"frame_size {self.frame_size} is not divisible by patch {self.patch}")
        if self.n_frames < 1:
            raise ValueError("n_frames must be >= 1")
        if self.n_words < 3:
            raise ValueError("n_words must be >= 3 (BOS, one token, EOS)")
        if self.vocab <= EOS_ID:
            raise ValueError("vocab must include the PAD/BOS/EOS ids")
        # building the stack configs validates widths against heads
        self.video_stack, self.text_stack, self.temporal_stack, self.fusion_stack

    @property
    def n_patches(self):
        return (self.frame_size // self.patch) ** 2

    @property
    def video_stack(self):
        return nn.StackConfig(self.video_width, self.heads, self.video_layers, self.mlp_ratio, self.n_patches)

    @property
    def text_stack(self):
        return nn.StackConfig(self.text_width, self.heads, self.text_layers, self.mlp_ratio, self.n_words)

    @property
    def temporal_stack(self):
        return nn.StackConfig(self.embed_dim, self.heads, self.temporal_layers, self.mlp_ratio, self.n_frames)

    @property
    def fusion_stack(self):
        return nn.StackConfig(
            self.embed_dim, self.heads, self.fusion_layers, self.mlp_ratio, self.n_frames + self.n_words
        )

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


class ModelState:
    """Named parameters of one model copy (student or teacher)."""

    def __init__(self, config, params):
        self.config = config
        self.params = params

    def __getitem__(self, name):
        return self.params[name]

    def named(self):
        return self.params.items()

    def param_group(self, name):
        return "new" if name.startswith(NEW_LAYER_PREFIXES) else "base"

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None

    def copy(self, requires_grad=False):
        """Deep copy; teacher copies carry no gradient."""
        params = {k: ad.Tensor(v.data.copy(), requires_grad=requires_grad, name=k) for k, v in self.params.items()}
        return ModelState(self.config, params)

    def arrays(self):
        return {k: v.data for k, v in self.params.items()}

    @classmethod
    def from_arrays(cls, config, arrays, requires_grad=True):
        expected = param_shapes(config)
        if set(arrays) != set(expected):
            raise ContractError("parameter names do not match the model config")
        params = {}
        for k, shape in expected.items():
            arr = np.asarray(arrays[k], dtype=np.float64)
            if arr.shape != shape:
                raise ShapeError(f"{k}: expected shape {shape}, got {arr.shape}")
            params[k] = ad.Tensor(arr.copy(), requires_grad=requires_grad, name=k)
        return cls(config, params)


def param_shapes(cfg):
    shapes = {
        "video.patch.weight": (cfg.patch * cfg.patch, cfg.video_width),
        "video.patch.bias": (cfg.video_width,),
        "video.pos": (cfg.n_patches, cfg.video_width),
    }
    shapes.update({"video.stack." + k: v for k, v in nn.stack_param_shapes(cfg.video_stack).items()})
    shapes["video.proj"] = (cfg.video_width, cfg.embed_dim)
    shapes["text.token"] = (cfg.vocab, cfg.text_width)
    shapes["text.pos"] = (cfg.n_words, cfg.text_width)
    shapes.update({"text.stack." + k: v for k, v in nn.stack_param_shapes(cfg.text_stack).items()})
    shapes["text.proj"] = (cfg.text_width, cfg.embed_dim)
    shapes["temporal.pos"] = (cfg.n_frames, cfg.embed_dim)
    shapes.update({"temporal.stack." + k: v for k, v in nn.stack_param_shapes(cfg.temporal_stack).items()})
    shapes.update({"fusion.stack." + k: v for k, v in nn.stack_param_shapes(cfg.fusion_stack).items()})
    d = cfg.embed_dim
    shapes["head.ln.gain"] = (d,)
    shapes["head.ln.bias"] = (d,)
    shapes["head.fc1.weight"] = (d, d)
    shapes["head.fc1.bias"] = (d,)
    shapes["head.fc2.weight"] = (d, 1)
    shapes["head.fc2.bias"] = (1,)
    shapes["logit_scale"] = ()
    return shapes


def init_model(cfg, seed):
    rng = np.random.default_rng(seed)
    params = {}

    def put(name, data):
        params[name] = ad.Tensor(data, requires_grad=True, name=name)

    put("video.patch.weight", rng.normal(0.0, 0.02, (cfg.patch * cfg.patch, cfg.video_width)))
    put("video.patch.bias", np.zeros(cfg.video_width))
    put("video.pos", rng.normal(0.0, 0.02, (cfg.n_patches, cfg.video_width)))
    for k, v in nn.init_stack(cfg.video_stack, rng).items():
        params["video.stack." + k] = v
    put("video.proj", rng.normal(0.0, cfg.video_width**-0.5, (cfg.video_width, cfg.embed_dim)))
    put("text.token", rng.normal(0.0, 0.02, (cfg.vocab, cfg.text_width)))
    put("text.pos", rng.normal(0.0, 0.02, (cfg.n_words, cfg.text_width)))
    for k, v in nn.init_stack(cfg.text_stack, rng).items():
        params["text.stack." + k] = v
    put("text.proj", rng.normal(0.0, cfg.text_width**-0.5, (cfg.text_width, cfg.embed_dim)))
    put("temporal.pos", rng.normal(0.0, 0.02, (cfg.n_frames, cfg.embed_dim)))
    for k, v in nn.init_stack(cfg.temporal_stack, rng).items():
        params["temporal.stack." + k] = v
    for k, v in nn.init_stack(cfg.fusion_stack, rng).items():
        params["fusion.stack." + k] = v
    d = cfg.embed_dim
    put("head.ln.gain", np.ones(d))
    put("head.ln.bias", np.zeros(d))
    put("head.fc1.weight", rng.normal(0.0, 0.02, (d, d)))
    put("head.fc1.bias", np.zeros(d))
    put("head.fc2.weight", rng.normal(0.0, 0.02, (d, 1)))
    put("head.fc2.bias", np.zeros(1))
    put("logit_scale", np.array(INIT_LOGIT_SCALE))
    assert list(params) == list(param_shapes(cfg))
    return ModelState(cfg, params)


# -- video side --------------------------------------------------------------
def _patchify(frames, p):
    M, H, W = frames.shape
    x = ad.reshape(frames, (M, H // p, p, W // p, p))
    x = ad.permute(x, (0, 1, 3, 2, 4))
    return ad.reshape(x, (M, (H // p) * (W // p), p * p))


def encode_frames(frames, state):
    """Per-frame patch transformer: ``[..., N_v, H, W]`` -> ``[..., N_v, D_v]``."""
    cfg = state.config
    frames = ad.as_tensor(frames)
    if frames.ndim < 3 or frames.shape[-2:] != (cfg.frame_size, cfg.frame_size):
        raise ShapeError(f"frames of shape {frames.shape} do not match frame_size {cfg.frame_size}")
    lead = frames.shape[:-2]
    frames = ad.scale(ad.add(frames, -PIXEL_MEAN), 1.0 / PIXEL_STD)
    flat = ad.reshape(frames, (-1, cfg.frame_size, cfg.frame_size))
    tokens = nn.linear(_patchify(flat, cfg.patch), state.params, "video.patch")
    tokens = nn.add_position_embedding(tokens, state["video.pos"])
    h = nn.transformer_forward(tokens, nn.subparams(state.params, "video.stack."), cfg.video_stack)
    pooled = ad.mean(h, axis=1)
    return ad.reshape(pooled, lead + (cfg.video_width,))


def project_video(frame_emb, state):
    return ad.matmul(frame_emb, state["video.proj"])


def temporal_enhance(V, state):
    """``V + T(V + pos)``: the residual skips the positional embedding."""
    cfg = state.config
    if V.shape[-2] > cfg.n_frames:
        raise LengthError(f"{V.shape[-2]} frames exceed the temporal table length {cfg.n_frames}")
    h = nn.add_position_embedding(V, state["temporal.pos"])
    h = nn.transformer_forward(h, nn.subparams(state.params, "temporal.stack."), cfg.temporal_stack)
    return ad.add(V, h)


def video_representation(V_emb):
    return ad.mean(V_emb, axis=-2)


def encode_video(frames, state, temporal=True):
    """Returns ``(V_emb [.., N_v, D], v [.., D])``."""
    V = project_video(encode_frames(frames, state), state)
    if temporal:
        V = temporal_enhance(V, state)
    return V, video_representation(V)


# -- text side ---------------------------------------------------------------
def caption_layout(tokens):
    """EOS index and validity mask for each caption row.

    Raises ``MalformedCaptionError`` unless every row holds exactly one EOS
    followed only by PAD.
    """
    tokens = np.asarray(tokens)
    rows = tokens.reshape(-1, tokens.shape[-1])
    is_eos = rows == EOS_ID
    counts = is_eos.sum(axis=1)
    if np.any(counts != 1):
        bad = int(np.flatnonzero(counts != 1)[0])
        raise MalformedCaptionError(f"caption {bad} has {int(counts[bad])} EOS tokens, expected 1")
    eos = is_eos.argmax(axis=1)
    positions = np.arange(rows.shape[1])
    mask = positions[None, :] <= eos[:, None]
    if np.any(rows[~mask] != PAD_ID):
        raise MalformedCaptionError("non-PAD token after EOS")
    return eos.reshape(tokens.shape[:-1]), mask.reshape(tokens.shape)


def encode_text(tokens, state):
    """Returns ``(W_emb [.., N_w, D], w [.., D], eos_index)``."""
    cfg = state.config
    tokens = np.asarray(tokens)
    if tokens.shape[-1] != cfg.n_words:
        raise ShapeError(f"caption length {tokens.shape[-1]} != n_words {cfg.n_words}")
    eos, mask = caption_layout(tokens)
    single = tokens.ndim == 1
    tok2 = tokens.reshape(-1, cfg.n_words)
    eos2 = np.atleast_1d(eos)
    x = nn.embed_tokens(tok2, state["text.token"])
    x = nn.add_position_embedding(x, state["text.pos"])
    h = nn.transformer_forward(x, nn.subparams(state.params, "text.stack."), cfg.text_stack, mask.reshape(tok2.shape))
    W = ad.matmul(h, state["text.proj"])
    B = tok2.shape[0]
    w = ad.take(ad.reshape(W, (B * cfg.n_words, cfg.embed_dim)), np.arange(B) * cfg.n_words + eos2)
    if single:
        return ad.reshape(W, (cfg.n_words, cfg.embed_dim)), ad.reshape(w, (cfg.embed_dim,)), int(eos)
    return W, w, eos


# -- fusion ------------------------------------------------------------------
def fuse(V_emb, W_emb, eos_index, text_mask, state):
    """Fusion feature at the caption EOS position (video segment first)."""
    cfg = state.config
    if V_emb.shape[-1] != cfg.embed_dim or W_emb.shape[-1] != cfg.embed_dim:
        raise ShapeError(f"fusion inputs {V_emb.shape} / {W_emb.shape} must both have width {cfg.embed_dim}")
    single = V_emb.ndim == 2
    if single:
        V_emb = ad.reshape(V_emb, (1,) + V_emb.shape)
        W_emb = ad.reshape(W_emb, (1,) + W_emb.shape)
    P, Nv, D = V_emb.shape
    Nw = W_emb.shape[1]
    eos_index = np.atleast_1d(np.asarray(eos_index))
    text_mask = np.asarray(text_mask, dtype=bool).reshape(P, Nw)
    x = ad.concat([V_emb, W_emb], axis=1)
    mask = np.concatenate([np.ones((P, Nv), dtype=bool), text_mask], axis=1)
    h = nn.transformer_forward(x, nn.subparams(state.params, "fusion.stack."), cfg.fusion_stack, mask)
    L = Nv + Nw
    f = ad.take(ad.reshape(h, (P * L, D)), np.arange(P) * L + Nv + eos_index)
    return ad.reshape(f, (D,)) if single else f


def matching_score(f, state):
    """LN -> FC -> ReLU -> FC; ``[D]`` gives a scalar, ``[P, D]`` gives ``[P]``."""
    single = f.ndim == 1
    if single:
        f = ad.reshape(f, (1, f.shape[0]))
    h = ad.layer_norm(f, state["head.ln.gain"], state["head.ln.bias"], nn.LN_EPS)
    h = ad.relu(nn.linear(h, state.params, "head.fc1"))
    s = nn.linear(h, state.params, "head.fc2")
    return ad.reshape(s, ()) if single else ad.reshape(s, (f.shape[0],))


def logit_scale(state):
    """Clamped inverse temperature ``1/tau`` as a differentiable scalar."""
    return ad.exp(ad.minimum(state["logit_scale"], MAX_LOGIT_SCALE))


def temperature(state):
    return float(np.exp(-min(float(state["logit_scale"].data), MAX_LOGIT_SCALE)))


# -- teacher -----------------------------------------------------------------
def ema_update(teacher, student, m):
    """``teacher <- m * teacher + (1 - m) * student`` for every parameter."""
    if not 0.0 <= m <= 1.0:
        raise ValueError(f"momentum {m} outside [0, 1]")
    if teacher.params.keys() != student.params.keys():
        raise ContractError("teacher and student parameter names differ")
    for k, t in teacher.params.items():
        s = student.params[k]
        if t.shape != s.shape:
            raise ContractError(f"{k}: teacher shape {t.shape} != student shape {s.shape}")
        if m == 1.0:
            continue
        if m == 0.0:
            t.data = s.data.copy()
        else:
            t.data = m * t.data + (1.0 - m) * s.data
        t.grad = None


# -- checkpoints ---------------------------------------------------------------
def checkpoint_bytes(state, teacher=None, extra=None):
    meta = {"model": state.config.to_dict()}
    if extra:
        meta.update(copy.deepcopy(extra))
    w = Writer()
    w.raw(CHECKPOINT_MAGIC)
    w.u32(CHECKPOINT_VERSION)
    w.string(json.dumps(meta, sort_keys=True))
    entries = list(state.arrays().items())
    if teacher is not None:
        entries += [("teacher." + k, v) for k, v in teacher.arrays().items()]
    w.u32(len(entries))
    for name, arr in entries:
        w.string(name)
        w.u32(arr.ndim)
        for dim in arr.shape:
            w.u32(dim)
        w.f64(arr)
    return w.getvalue()


def save_checkpoint(path, state, teacher=None, extra=None):
    data = checkpoint_bytes(state, teacher, extra)
    Path(path).write_bytes(data)
    return path


def parse_checkpoint(buf):
    """Decode checkpoint bytes into ``(meta, arrays)``."""
    r = Reader(buf)
    r.magic(CHECKPOINT_MAGIC)
    version = r.u32("version")
    if version != CHECKPOINT_VERSION:
        raise UnsupportedVersionError(f"unsupported checkpoint version {version}", len(CHECKPOINT_MAGIC))
    try:
        meta = json.loads(r.string("config record"))
    except json.JSONDecodeError as exc:
        raise FormatError("config record is not valid JSON", r.pos) from exc
    arrays = {}
    for _ in range(r.u32("entry count")):
        name = r.string("entry name")
        rank = r.u32("rank")
        dims = tuple(r.u32("dim") for _ in range(rank))
        arrays[name] = r.f64(int(np.prod(dims, dtype=np.int64)), name).reshape(dims)
    r.done()
    return meta, arrays


def load_checkpoint(path):
    """Returns ``(student, teacher_or_None, meta)``."""
    meta, arrays = parse_checkpoint(Path(path).read_bytes())
    cfg = ModelConfig.from_dict(meta["model"])
    student = ModelState.from_arrays(cfg, {k: v for k, v in arrays.items() if not k.startswith("teacher.")})
    t_arrays = {k[len("teacher."):]: v for k, v in arrays.items() if k.startswith("teacher.")}
    teacher = ModelState.from_arrays(cfg, t_arrays, requires_grad=False) if t_arrays else None
    return student, teacher, meta
