"""Pre-norm transformer building blocks.

Parameters live in flat ``dict[str, Tensor]`` maps; a stack's names are
relative (``layers.0.attn.q.weight`` ...) and the model prefixes them.
Sequences are batched as ``[N, L, d]`` with a boolean ``[N, L]`` validity
mask; a single ``[L, d]`` sequence is accepted everywhere as well.
"""
import math
from dataclasses import dataclass

import numpy as np

from vidtext import autodiff as ad
from vidtext.errors import LengthError, ShapeError

LN_EPS = 1e-5


@dataclass(frozen=True)
class StackConfig:
    width: int
    heads: int
    layers: int
    mlp_ratio: int = 4
    max_len: int = 64

    def __post_init__(self):
        if self.width < 1 or self.heads < 1:
            raise ValueError("width and heads must be positive")
        if self.width % self.heads:
            raise ValueError(f"width {self.width} is not divisible by heads {self.heads}")
        if self.layers < 1:
            raise ValueError("a stack needs at least one layer")
        if self.max_len < 1 or self.mlp_ratio < 1:
            raise ValueError("max_len and mlp_ratio must be positive")

    @property
    def head_dim(self):
        return self.width // self.heads


def stack_param_shapes(cfg):
    """Ordered name -> shape map for one stack."""
    d, h = cfg.width, cfg.width * cfg.mlp_ratio
    shapes = {}
    for i in range(cfg.layers):
        p = f"layers.{i}."
        shapes[p + "ln1.gain"] = (d,)
        shapes[p + "ln1.bias"] = (d,)
        for proj in ("q", "k", "v", "out"):
            shapes[p + f"attn.{proj}.weight"] = (d, d)
            shapes[p + f"attn.{proj}.bias"] = (d,)
        shapes[p + "ln2.gain"] = (d,)
        shapes[p + "ln2.bias"] = (d,)
        shapes[p + "mlp.fc1.weight"] = (d, h)
        shapes[p + "mlp.fc1.bias"] = (h,)
        shapes[p + "mlp.fc2.weight"] = (h, d)
        shapes[p + "mlp.fc2.bias"] = (d,)
    shapes["ln_final.gain"] = (d,)
    shapes["ln_final.bias"] = (d,)
    return shapes


# projections that write into the residual stream get the scaled-down std
_RESIDUAL_OUT = ("attn.out.weight", "mlp.fc2.weight")


def init_stack(cfg, seed):
    """Deterministic GPT/CLIP-style initialisation of one stack."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    params = {}
    for name, shape in stack_param_shapes(cfg).items():
        if name.endswith(".gain"):
            data = np.ones(shape)
        elif name.endswith(".bias"):
            data = np.zeros(shape)
        else:
            std = 0.02 / math.sqrt(cfg.layers) if name.endswith(_RESIDUAL_OUT) else 0.02
            data = rng.normal(0.0, std, size=shape)
        params[name] = ad.Tensor(data, requires_grad=True, name=name)
    return params


def param_count(params):
    return int(sum(t.size for t in params.values()))


def subparams(params, prefix):
    """View of the entries under ``prefix`` with the prefix stripped."""
    n = len(prefix)
    return {k[n:]: v for k, v in params.items() if k.startswith(prefix)}


def linear(x, params, name):
    return ad.add(ad.matmul(x, params[name + ".weight"]), params[name + ".bias"])


def embed_tokens(ids, table):
    """Row gather from an embedding table; ids may be any integer array."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"token id out of range for vocabulary of size {table.shape[0]}")
    return ad.take(table, ids)


def add_position_embedding(x, pos_table):
    L = x.shape[-2]
    if L > pos_table.shape[0]:
        raise LengthError(f"sequence length {L} exceeds position table length {pos_table.shape[0]}")
    return ad.add(x, ad.slice_rows(pos_table, 0, L))


def _batched(x, mask):
    single = x.ndim == 2
    if single:
        x = ad.reshape(x, (1,) + x.shape)
    N, L, _ = x.shape
    if mask is None:
        mask = np.ones((N, L), dtype=bool)
    else:
        mask = np.asarray(mask, dtype=bool).reshape(N, L)
    if not mask.any(axis=1).all():
        raise ShapeError("attention mask must leave at least one valid position per sequence")
    return x, mask, single


def multi_head_attention(x, params, heads, mask=None):
    """Scaled dot-product self-attention; padded keys get zero weight.

    ``params`` holds ``q/k/v/out`` ``.weight``/``.bias`` entries.
    """
    x, mask, single = _batched(x, mask)
    N, L, d = x.shape
    if d % heads:
        raise ShapeError(f"width {d} not divisible by {heads} heads")
    dh = d // heads
    q = ad.permute(ad.reshape(linear(x, params, "q"), (N, L, heads, dh)), (0, 2, 1, 3))
    k = ad.permute(ad.reshape(linear(x, params, "k"), (N, L, heads, dh)), (0, 2, 3, 1))
    v = ad.permute(ad.reshape(linear(x, params, "v"), (N, L, heads, dh)), (0, 2, 1, 3))
    scores = ad.scale(ad.matmul(q, k), 1.0 / math.sqrt(dh))
    attn = ad.softmax(scores, axis=-1, mask=mask[:, None, None, :])
    ctx = ad.reshape(ad.permute(ad.matmul(attn, v), (0, 2, 1, 3)), (N, L, d))
    out = linear(ctx, params, "out")
    return ad.reshape(out, (L, d)) if single else out


def _mlp(x, params):
    return linear(ad.gelu(linear(x, params, "fc1")), params, "fc2")


def transformer_forward(x, params, cfg, mask=None):
    """Pre-norm residual stack followed by one final layer norm."""
    if x.shape[-1] != cfg.width:
        raise ShapeError(f"input width {x.shape[-1]} does not match stack width {cfg.width}")
    if x.shape[-2] > cfg.max_len:
        raise LengthError(f"sequence length {x.shape[-2]} exceeds max_len {cfg.max_len}")
    for i in range(cfg.layers):
        p = f"layers.{i}."
        h = ad.layer_norm(x, params[p + "ln1.gain"], params[p + "ln1.bias"], LN_EPS)
        x = ad.add(x, multi_head_attention(h, subparams(params, p + "attn."), cfg.heads, mask))
        h = ad.layer_norm(x, params[p + "ln2.gain"], params[p + "ln2.bias"], LN_EPS)
        x = ad.add(x, _mlp(h, subparams(params, p + "mlp.")))
    return ad.layer_norm(x, params["ln_final.gain"], params["ln_final.bias"], LN_EPS)
