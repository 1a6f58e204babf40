"""Similarity-matrix revision and retrieval metrics.

Rows index videos and columns index texts; entry (i, i) is the ground-truth
pair. "t2v" ranks videos for each text query (down a column), "v2t" ranks
texts for each video query (along a row).
"""
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from vidtext import kernels
from vidtext.binio import Reader, Writer
from vidtext.errors import ContractError, DomainError, FormatError, UnsupportedVersionError

SIM_MAGIC = b"VTSIM\x00\x00\x01"
SIM_VERSION = 1


@dataclass(frozen=True)
class RetrievalReport:
    direction: str
    r1: float
    r5: float
    r10: float
    mdr: float
    mnr: float
    n: int

    def to_dict(self):
        return asdict(self)


def _softmax(S, axis):
    if axis == 1:
        return kernels.softmax_rows(np.ascontiguousarray(S))
    return kernels.softmax_rows(np.ascontiguousarray(S.T)).T


def dual_softmax_factors(S):
    """(row-wise softmax, column-wise softmax) of ``S``."""
    S = np.asarray(S, dtype=np.float64)
    if not np.all(np.isfinite(S)):
        raise DomainError("similarity matrix has non-finite entries")
    return _softmax(S, 1), _softmax(S, 0)


def dual_softmax(S):
    """Elementwise product of the row and column softmaxes (inference only)."""
    over_texts, over_videos = dual_softmax_factors(S)
    return over_texts * over_videos


def ranks(S, direction):
    """1-based rank of each query's positive; ties count against it."""
    S = np.asarray(S, dtype=np.float64)
    if S.ndim != 2 or S.shape[0] != S.shape[1]:
        raise ContractError(f"evaluation needs a square similarity matrix, got shape {S.shape}")
    diag = np.diag(S)
    if direction == "t2v":
        return (S >= diag[None, :]).sum(axis=0)
    if direction == "v2t":
        return (S >= diag[:, None]).sum(axis=1)
    raise ValueError(f"direction must be 't2v' or 'v2t', got {direction!r}")


def report(rank_list, direction="t2v"):
    r = np.asarray(rank_list, dtype=np.float64)
    if r.size == 0:
        raise ContractError("cannot report on an empty rank list")
    return RetrievalReport(
        direction=direction,
        r1=float(np.mean(r <= 1)),
        r5=float(np.mean(r <= 5)),
        r10=float(np.mean(r <= 10)),
        mdr=float(np.median(r)),
        mnr=float(np.mean(r)),
        n=int(r.size),
    )


def evaluate(S, apply_dual=False):
    """Both direction reports, optionally after dual-softmax revision."""
    S = np.asarray(S, dtype=np.float64)
    if apply_dual:
        S = dual_softmax(S)
    return report(ranks(S, "t2v"), "t2v"), report(ranks(S, "v2t"), "v2t")


# -- file formats ---------------------------------------------------------------
def save_sim_binary(path, S):
    S = np.asarray(S, dtype=np.float64)
    w = Writer()
    w.raw(SIM_MAGIC)
    w.u32(SIM_VERSION)
    w.u32(S.shape[0])
    w.u32(S.shape[1])
    w.f64(S)
    Path(path).write_bytes(w.getvalue())


def load_sim_binary(path):
    r = Reader(Path(path).read_bytes())
    r.magic(SIM_MAGIC)
    version = r.u32("version")
    if version != SIM_VERSION:
        raise UnsupportedVersionError(f"unsupported similarity-matrix version {version}", len(SIM_MAGIC))
    rows, cols = r.u32("rows"), r.u32("cols")
    S = r.f64(rows * cols, "matrix values").reshape(rows, cols)
    r.done()
    return S


def save_sim_csv(path, S):
    np.savetxt(path, np.asarray(S, dtype=np.float64), delimiter=",", fmt="%.17g")


def load_sim_csv(path):
    try:
        return np.atleast_2d(np.loadtxt(path, delimiter=",", dtype=np.float64))
    except ValueError as exc:
        raise FormatError(f"could not parse CSV similarity matrix: {exc}") from exc


def write_reports(path, reports, **extra):
    payload = dict(extra)
    payload["reports"] = [r.to_dict() for r in reports]
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
