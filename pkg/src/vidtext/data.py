"""Procedural paired video/caption data.

Each concept is a combination of three attributes: stripe orientation,
number of moving blobs, and the direction of a brightness ramp. A video
renders the concept over ``n_frames`` with slow drift plus per-sample
jitter; its caption names the three attribute values, each drawn from a
small synonym set. Captions are therefore unambiguous under the grammar
and retrieval is learnable by construction.
"""
import itertools
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from vidtext.binio import Reader, Writer
from vidtext.errors import FormatError, UnsupportedVersionError
from vidtext.model import BOS_ID, EOS_ID, PAD_ID

DATA_MAGIC = b"VTDATA\x00\x01"
DATA_VERSION = 1

SPECIALS = ("<pad>", "<bos>", "<eos>")
ATTRIBUTES = ("stripes", "blobs", "shade")


@dataclass(frozen=True)
class SynthSpec:
    n_angles: int = 4
    n_blob_counts: int = 4
    n_shades: int = 4
    n_concepts: int | None = None  # default: every attribute combination
    samples_per_concept: int = 1
    n_frames: int = 4
    n_words: int = 8
    frame_size: int = 16
    synonyms: int = 2
    jitter: float = 0.03
    separation_floor: float = 1.0

    def __post_init__(self):
        if min(self.n_angles, self.n_blob_counts, self.n_shades) < 1:
            raise ValueError("every attribute needs at least one level")
        if self.concept_count < 2:
            raise ValueError("need at least 2 concepts")
        if self.concept_count > self.n_angles * self.n_blob_counts * self.n_shades:
            raise ValueError("more concepts requested than attribute combinations")
        if self.samples_per_concept < 1:
            raise ValueError("samples_per_concept must be >= 1")
        if self.n_words < len(ATTRIBUTES) + 2:
            raise ValueError(f"n_words must be >= {len(ATTRIBUTES) + 2} to hold a caption")
        if self.n_frames < 1 or self.frame_size < 4 or self.synonyms < 1:
            raise ValueError("invalid frame or vocabulary settings")

    @property
    def concept_count(self):
        return self.n_concepts or self.n_angles * self.n_blob_counts * self.n_shades

    @property
    def levels(self):
        return (self.n_angles, self.n_blob_counts, self.n_shades)


@dataclass(frozen=True)
class ConceptSpec:
    concept_id: int
    angle_level: int
    blob_level: int
    shade_level: int
    angle: float
    blob_centers: np.ndarray = field(repr=False)
    blob_velocity: np.ndarray = field(repr=False)
    shade_dir: float = 0.0

    @property
    def levels(self):
        return (self.angle_level, self.blob_level, self.shade_level)


@dataclass
class Dataset:
    videos: np.ndarray  # [N, N_v, H, W] in [0, 1]
    captions: np.ndarray  # [N, N_w] int64
    concept_ids: np.ndarray  # [N]
    vocab: list

    def __len__(self):
        return self.videos.shape[0]

    @property
    def n_frames(self):
        return self.videos.shape[1]

    @property
    def n_words(self):
        return self.captions.shape[1]

    @property
    def frame_size(self):
        return self.videos.shape[2]

    def subset(self, idx):
        idx = np.asarray(idx)
        return Dataset(self.videos[idx], self.captions[idx], self.concept_ids[idx], list(self.vocab))

    def equals(self, other):
        return (
            self.vocab == other.vocab
            and np.array_equal(self.captions, other.captions)
            and np.array_equal(self.concept_ids, other.concept_ids)
            and self.videos.shape == other.videos.shape
            and self.videos.tobytes() == other.videos.tobytes()
        )


@dataclass
class Batch:
    frames: np.ndarray  # [B, N_v, H, W]
    tokens: np.ndarray  # [B, N_w]
    mask: np.ndarray  # [B, N_w] True on BOS..EOS
    eos: np.ndarray  # [B]
    indices: np.ndarray  # dataset rows


# -- vocabulary ----------------------------------------------------------------
def build_vocab(spec):
    words = list(SPECIALS)
    for attr, n in zip(ATTRIBUTES, spec.levels):
        for level in range(n):
            for s in range(spec.synonyms):
                words.append(f"{attr}{level}.{s}")
    return words


def word_table(spec):
    """token id -> (attribute index, level) for every content word."""
    table = {}
    tid = len(SPECIALS)
    for a, n in enumerate(spec.levels):
        for level in range(n):
            for _ in range(spec.synonyms):
                table[tid] = (a, level)
                tid += 1
    return table


def _token_id(spec, attr, level, synonym):
    offset = len(SPECIALS) + sum(n * spec.synonyms for n in spec.levels[:attr])
    return offset + level * spec.synonyms + synonym


def decode_caption(tokens, spec):
    """Attribute levels named by a caption; raises on anything ambiguous."""
    table = word_table(spec)
    seen = {}
    for t in np.asarray(tokens):
        t = int(t)
        if t in (PAD_ID, BOS_ID, EOS_ID):
            continue
        if t not in table:
            raise ValueError(f"token {t} is not a content word")
        attr, level = table[t]
        if attr in seen:
            raise ValueError(f"attribute {ATTRIBUTES[attr]} named twice")
        seen[attr] = level
    if len(seen) != len(ATTRIBUTES):
        raise ValueError("caption does not name every attribute")
    return tuple(seen[a] for a in range(len(ATTRIBUTES)))


# -- rendering -----------------------------------------------------------------
def make_concepts(spec, seed):
    rng = np.random.default_rng([seed, 0])
    combos = list(itertools.product(*(range(n) for n in spec.levels)))
    order = rng.permutation(len(combos))[: spec.concept_count]
    concepts = []
    for cid, k in enumerate(order):
        a, b, s = combos[k]
        n_blobs = b + 1
        concepts.append(
            ConceptSpec(
                concept_id=cid,
                angle_level=a,
                blob_level=b,
                shade_level=s,
                angle=np.pi * a / spec.n_angles,
                blob_centers=rng.uniform(0.2, 0.8, size=(n_blobs, 2)) * spec.frame_size,
                blob_velocity=rng.normal(0.0, 0.4, size=(n_blobs, 2)),
                shade_dir=2 * np.pi * s / spec.n_shades,
            )
        )
    return concepts


def render(concept, spec, rng=None):
    """Frames ``[n_frames, H, W]`` in [0, 1]; ``rng=None`` renders noise-free."""
    size = spec.frame_size
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    jit = spec.jitter if rng is not None else 0.0
    draw = (lambda *s: rng.normal(0.0, 1.0, size=s)) if rng is not None else (lambda *s: np.zeros(s))
    phase = jit * np.pi * draw(1)[0]
    offset = jit * size * draw(*concept.blob_centers.shape)
    freq = 3.0 / size
    frames = np.empty((spec.n_frames, size, size))
    c = size / 2.0
    ramp = ((xx - c) * np.cos(concept.shade_dir) + (yy - c) * np.sin(concept.shade_dir)) / size + 0.5
    for t in range(spec.n_frames):
        u = xx * np.cos(concept.angle) + yy * np.sin(concept.angle)
        stripes = 0.5 + 0.5 * np.sin(2 * np.pi * freq * u + phase + 0.3 * t)
        centers = concept.blob_centers + offset + t * concept.blob_velocity
        blobs = np.zeros((size, size))
        for cx, cy in centers:
            blobs += np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * 1.5**2))
        img = 0.35 * stripes + 0.4 * np.minimum(blobs, 1.0) + 0.25 * ramp
        if rng is not None:
            img = img + 0.5 * jit * draw(size, size)
        frames[t] = np.clip(img, 0.0, 1.0)
    return frames


def make_caption(concept, spec, rng):
    content = [
        _token_id(spec, a, level, int(rng.integers(spec.synonyms)))
        for a, level in enumerate(concept.levels)
    ]
    toks = [BOS_ID] + content + [EOS_ID]
    return np.array(toks + [PAD_ID] * (spec.n_words - len(toks)), dtype=np.int64)


def validate(dataset, concepts, spec):
    """Check the separation floor and nearest-concept classification.

    Returns ``(min pairwise distance between clean renders, template-matching
    accuracy)``; raises ``ValueError`` if either falls short.
    """
    clean = np.stack([render(c, spec).reshape(-1) for c in concepts])
    sq = (clean * clean).sum(axis=1)
    d2 = sq[:, None] + sq[None, :] - 2 * clean @ clean.T
    np.fill_diagonal(d2, np.inf)
    min_dist = float(np.sqrt(max(d2.min(), 0.0)))
    if min_dist < spec.separation_floor:
        raise ValueError(f"concept renders too close: {min_dist:.3f} < floor {spec.separation_floor}")
    flat = dataset.videos.reshape(len(dataset), -1)
    dist = (flat * flat).sum(axis=1)[:, None] + sq[None, :] - 2 * flat @ clean.T
    acc = float(np.mean(dist.argmin(axis=1) == dataset.concept_ids))
    if acc < 0.99:
        raise ValueError(f"template matching accuracy {acc:.3f} below 0.99")
    return min_dist, acc


def generate(spec, seed):
    """Deterministic dataset for ``(spec, seed)``; validated before return."""
    concepts = make_concepts(spec, seed)
    n = spec.concept_count * spec.samples_per_concept
    videos = np.empty((n, spec.n_frames, spec.frame_size, spec.frame_size))
    captions = np.empty((n, spec.n_words), dtype=np.int64)
    cids = np.empty(n, dtype=np.int64)
    for i in range(n):
        concept = concepts[i % spec.concept_count]
        rng = np.random.default_rng([seed, 1, i])
        videos[i] = render(concept, spec, rng)
        captions[i] = make_caption(concept, spec, rng)
        cids[i] = concept.concept_id
    ds = Dataset(videos, captions, cids, build_vocab(spec))
    validate(ds, concepts, spec)
    return ds


# -- batching ------------------------------------------------------------------
def batches(dataset, batch_size, epoch_seed=0, shuffle=True):
    """Full batches only; the trailing partial batch is dropped."""
    n = len(dataset)
    if batch_size < 1 or batch_size > n:
        raise ValueError(f"batch_size {batch_size} must be in [1, {n}]")
    order = np.random.default_rng(epoch_seed).permutation(n) if shuffle else np.arange(n)
    out = []
    for start in range(0, n - batch_size + 1, batch_size):
        idx = order[start:start + batch_size]
        tokens = dataset.captions[idx]
        eos = (tokens == EOS_ID).argmax(axis=1)
        mask = np.arange(tokens.shape[1])[None, :] <= eos[:, None]
        out.append(Batch(dataset.videos[idx], tokens, mask, eos, idx))
    return out


# -- persistence ---------------------------------------------------------------
def dataset_bytes(dataset):
    N, Nv, H, W = dataset.videos.shape
    w = Writer()
    w.raw(DATA_MAGIC)
    w.u32(DATA_VERSION)
    for v in (N, Nv, dataset.n_words, H, W, len(dataset.vocab)):
        w.u32(v)
    for word in dataset.vocab:
        w.string(word)
    for i in range(N):
        w.u32(int(dataset.concept_ids[i]))
        w.i32(dataset.captions[i])
        w.f64(dataset.videos[i])
    return w.getvalue()


def save(dataset, path):
    Path(path).write_bytes(dataset_bytes(dataset))
    return path


def parse_dataset(buf):
    r = Reader(buf)
    r.magic(DATA_MAGIC)
    version = r.u32("version")
    if version != DATA_VERSION:
        raise UnsupportedVersionError(f"unsupported dataset version {version}", len(DATA_MAGIC))
    N, Nv, Nw, H, W, V = (r.u32(name) for name in ("count", "n_frames", "n_words", "height", "width", "vocab size"))
    if H != W:
        raise FormatError(f"frames must be square, got {H}x{W}", r.pos)
    vocab = [r.string("vocab entry") for _ in range(V)]
    videos = np.empty((N, Nv, H, W))
    captions = np.empty((N, Nw), dtype=np.int64)
    cids = np.empty(N, dtype=np.int64)
    for i in range(N):
        cids[i] = r.u32("concept id")
        captions[i] = r.i32(Nw, "caption")
        videos[i] = r.f64(Nv * H * W, "frames").reshape(Nv, H, W)
    r.done()
    return Dataset(videos, captions, cids, vocab)


def load(path):
    return parse_dataset(Path(path).read_bytes())
