"""Training objectives: contrastive alignment, momentum distillation with
representation queues, and the fusion matching loss over hard negatives."""
from dataclasses import dataclass, field

import numpy as np

from vidtext import autodiff as ad
from vidtext import kernels
from vidtext.errors import CapacityError, ContractError, DomainError, ShapeError

UNIT_TOL = 1e-9


@dataclass(frozen=True)
class DistillConfig:
    alpha: float = 0.4
    momentum: float = 0.995
    queue_capacity: int = 64

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha {self.alpha} outside [0, 1]")
        if not 0.0 <= self.momentum <= 1.0:
            raise ValueError(f"momentum {self.momentum} outside [0, 1]")
        if self.queue_capacity < 0:
            raise ValueError("queue_capacity must be non-negative")


@dataclass
class LossReport:
    l_vta: float
    l_vtm: float
    total: float
    temperature: float
    hard_negatives: tuple = ()
    fusion_pairs: int = 0
    loss: object = field(default=None, repr=False)  # differentiable total


class RepresentationQueue:
    """Fixed-capacity FIFO of unit-norm teacher representations."""

    def __init__(self, capacity, dim):
        if capacity < 0:
            raise ValueError("capacity must be non-negative")
        self.capacity = int(capacity)
        self.dim = int(dim)
        self._buf = np.zeros((0, dim))

    @property
    def fill(self):
        return self._buf.shape[0]

    def __len__(self):
        return self.fill

    def entries(self):
        """Stored vectors, oldest first (a copy)."""
        return self._buf.copy()

    def enqueue(self, vectors):
        vectors = np.atleast_2d(np.asarray(vectors, dtype=np.float64))
        if vectors.shape[1] != self.dim:
            raise ShapeError(f"queue holds {self.dim}-vectors, got {vectors.shape}")
        if np.any(np.abs(np.linalg.norm(vectors, axis=1) - 1.0) > UNIT_TOL):
            raise ContractError("queue entries must be unit-norm")
        if self.capacity == 0:
            return
        self._buf = np.concatenate([self._buf, vectors])[-self.capacity:].copy()


def _check_unit(x, what):
    norms = np.linalg.norm(np.asarray(x), axis=-1)
    if np.any(np.abs(norms - 1.0) > UNIT_TOL):
        raise ContractError(f"{what} rows must be unit-norm")


def cosine_sim_matrix(V, W):
    """Entry (i, j) = <V_i, W_j> for unit-norm rows."""
    V, W = ad.as_tensor(V), ad.as_tensor(W)
    _check_unit(V.data, "V")
    _check_unit(W.data, "W")
    return ad.matmul(V, ad.transpose(W))


def _inv_tau(tau):
    if isinstance(tau, ad.Tensor):
        if np.any(tau.data <= 0):
            raise DomainError("temperature must be positive")
        return None, tau
    if tau <= 0:
        raise DomainError("temperature must be positive")
    return 1.0 / float(tau), None


def _scaled(logits, tau):
    const, t = _inv_tau(tau)
    return ad.scale(logits, const) if t is None else ad.div(logits, t)


def _soft_cross_entropy(logits, targets):
    """Mean over rows of ``-sum(targets * log_softmax(logits))``."""
    logp = ad.log_softmax(logits, axis=1)
    return ad.mean(ad.scale(ad.sum(ad.mul(logp, ad.Tensor(targets)), axis=1), -1.0))


def contrastive_loss(sim, tau):
    """Symmetric InfoNCE over a square similarity matrix, diagonal positive.

    ``tau`` is a positive float or a scalar Tensor (learnable temperature).
    """
    B = sim.shape[0]
    if sim.ndim != 2 or sim.shape[1] != B:
        raise ShapeError(f"contrastive loss needs a square matrix, got {sim.shape}")
    eye = np.eye(B)
    l_v2t = _soft_cross_entropy(_scaled(sim, tau), eye)
    l_t2v = _soft_cross_entropy(_scaled(ad.transpose(sim), tau), eye)
    return ad.scale(ad.add(l_v2t, l_t2v), 0.5)


def pseudo_targets(teacher_row, tau):
    """Teacher softmax over an extended (batch + queue) similarity row."""
    row = np.asarray(teacher_row.data if isinstance(teacher_row, ad.Tensor) else teacher_row, dtype=np.float64)
    tau = float(tau.data if isinstance(tau, ad.Tensor) else tau)
    if tau <= 0:
        raise DomainError("temperature must be positive")
    rows = np.ascontiguousarray(np.atleast_2d(row) / tau)
    out = kernels.softmax_rows(rows)
    return out.reshape(row.shape)


def blend_targets(y_m, y, alpha):
    """``alpha * y_m + (1 - alpha) * y``."""
    y_m, y = np.asarray(y_m, dtype=np.float64), np.asarray(y, dtype=np.float64)
    if y_m.shape != y.shape:
        raise ShapeError(f"target shapes differ: {y_m.shape} vs {y.shape}")
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha {alpha} outside [0, 1]")
    return alpha * y_m + (1.0 - alpha) * y


def _extended_onehot(B, Q):
    y = np.zeros((B, B + Q))
    y[np.arange(B), np.arange(B)] = 1.0
    return y


def distilled_contrastive_loss(v, w, v_m, w_m, queue_v, queue_t, tau, alpha):
    """Contrastive loss against blended teacher/ground-truth targets.

    ``v, w``: student unit-norm representations (Tensors, ``[B, D]``).
    ``v_m, w_m``: teacher unit-norm representations (arrays, no gradient).
    Similarities extend over the queues; queue entries get zero weight in
    the ground-truth part of the target. Queues are read, not updated;
    call :func:`enqueue_teacher` after the loss.
    """
    v, w = ad.as_tensor(v), ad.as_tensor(w)
    v_m = np.asarray(getattr(v_m, "data", v_m), dtype=np.float64)
    w_m = np.asarray(getattr(w_m, "data", w_m), dtype=np.float64)
    B = v.shape[0]
    Qt, Qv = queue_t.entries(), queue_v.entries()
    tau_val = float(tau.data) if isinstance(tau, ad.Tensor) else float(tau)

    sim = cosine_sim_matrix(v, w)
    rows_v2t = sim if len(Qt) == 0 else ad.concat([sim, cosine_sim_matrix(v, Qt)], axis=1)
    sim_t = ad.transpose(sim)
    rows_t2v = sim_t if len(Qv) == 0 else ad.concat([sim_t, cosine_sim_matrix(w, Qv)], axis=1)

    all_t = np.concatenate([w_m, Qt]) if len(Qt) else w_m
    all_v = np.concatenate([v_m, Qv]) if len(Qv) else v_m
    y_v2t = blend_targets(pseudo_targets(v_m @ all_t.T, tau_val), _extended_onehot(B, len(Qt)), alpha)
    y_t2v = blend_targets(pseudo_targets(w_m @ all_v.T, tau_val), _extended_onehot(B, len(Qv)), alpha)

    l_v2t = _soft_cross_entropy(_scaled(rows_v2t, tau), y_v2t)
    l_t2v = _soft_cross_entropy(_scaled(rows_t2v, tau), y_t2v)
    return ad.scale(ad.add(l_v2t, l_t2v), 0.5)


def enqueue_teacher(queue_v, queue_t, v_m, w_m):
    queue_v.enqueue(np.asarray(getattr(v_m, "data", v_m)))
    queue_t.enqueue(np.asarray(getattr(w_m, "data", w_m)))


def select_hard_negatives(sim, K):
    """Top-K off-diagonal indices per row (texts) and per column (videos).

    Ordered by descending similarity; ties go to the lower index.
    """
    S = np.asarray(getattr(sim, "data", sim), dtype=np.float64)
    B = S.shape[0]
    if S.shape != (B, B):
        raise ShapeError(f"hard-negative mining needs a square matrix, got {S.shape}")
    if K < 0 or K >= B:
        raise CapacityError(f"K={K} needs 0 <= K <= B-1 with B={B}")

    def top(M):
        out = np.empty((B, K), dtype=np.int64)
        for i in range(B):
            order = np.argsort(-M[i], kind="stable")
            out[i] = order[order != i][:K]
        return out

    return top(S), top(S.T)


def fusion_pairs(text_negs, video_negs):
    """Pair list for the fusion encoder.

    Returns ``(video_idx, text_idx, pos_slot, neg_slots)`` where the first B
    pairs are the positives, and ``neg_slots[i]`` lists the 2K pair slots
    (K hard texts for video i, then K hard videos for text i) that act as
    negatives for positive i. Total pairs: ``B * (2K + 1)``.
    """
    B, K = text_negs.shape
    ar = np.arange(B)
    vid = np.concatenate([ar, np.repeat(ar, K), video_negs.reshape(-1)])
    txt = np.concatenate([ar, text_negs.reshape(-1), np.repeat(ar, K)])
    neg_slots = np.concatenate(
        [B + ar[:, None] * K + np.arange(K), B + B * K + ar[:, None] * K + np.arange(K)], axis=1
    )
    return vid, txt, ar, neg_slots


def vtm_loss(pos_scores, neg_scores, literal=False):
    """Matching InfoNCE: per positive, softmax over itself and its 2K negatives.

    With ``literal=True`` the negatives enter the denominator without the
    exponential (the formula as typeset); kept for comparison only.
    """
    pos_scores, neg_scores = ad.as_tensor(pos_scores), ad.as_tensor(neg_scores)
    B = pos_scores.shape[0]
    if neg_scores.ndim != 2 or neg_scores.shape[0] != B:
        raise ShapeError(f"negatives {neg_scores.shape} do not group under {B} positives")
    if neg_scores.shape[1] == 0:
        raise ContractError("each positive needs at least one negative")
    pos = ad.reshape(pos_scores, (B, 1))
    if not literal:
        logits = ad.concat([pos, neg_scores], axis=1)
        logp = ad.log_softmax(logits, axis=1)
        return ad.scale(ad.mean(ad.slice_axis(logp, 0, 1, axis=1)), -1.0)
    e = ad.exp(pos)
    denom = ad.add(e, ad.sum(neg_scores, axis=1, keepdims=True))
    return ad.scale(ad.mean(ad.sub(pos, ad.log(denom))), -1.0)


def training_loss(v, w, tau, *, distill=None, v_m=None, w_m=None, queues=None,
                  score_pairs=None, K=0, literal_vtm=False):
    """Combine the enabled objectives into one differentiable total.

    ``v, w`` are the student's unit-norm representations. Distillation is
    enabled by passing ``distill`` together with teacher representations
    ``v_m, w_m`` and ``queues=(queue_v, queue_t)``; the queues are updated
    with the teacher representations after the loss is formed. Fusion is
    enabled by ``score_pairs(video_idx, text_idx) -> Tensor [P]``.
    """
    v, w = ad.as_tensor(v), ad.as_tensor(w)
    tau_val = float(tau.data) if isinstance(tau, ad.Tensor) else float(tau)
    if distill is not None:
        queue_v, queue_t = queues
        l_vta = distilled_contrastive_loss(v, w, v_m, w_m, queue_v, queue_t, tau, distill.alpha)
        enqueue_teacher(queue_v, queue_t, v_m, w_m)
    else:
        l_vta = contrastive_loss(cosine_sim_matrix(v, w), tau)

    total, l_vtm_val, negs, n_pairs = l_vta, 0.0, (), 0
    if score_pairs is not None:
        text_negs, video_negs = select_hard_negatives(v.data @ w.data.T, K)
        vid, txt, pos_slot, neg_slots = fusion_pairs(text_negs, video_negs)
        scores = score_pairs(vid, txt)
        l_vtm = vtm_loss(ad.take(scores, pos_slot), ad.take(scores, neg_slots), literal=literal_vtm)
        total = ad.add(l_vta, l_vtm)
        l_vtm_val, negs, n_pairs = l_vtm.item(), (text_negs, video_negs), len(vid)
    return LossReport(
        l_vta=l_vta.item(),
        l_vtm=l_vtm_val,
        total=total.item(),
        temperature=tau_val,
        hard_negatives=negs,
        fusion_pairs=n_pairs,
        loss=total,
    )
