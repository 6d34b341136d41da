# services/loss_service.py

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
from scipy.special import logsumexp, softmax

from errors import NonFinite
from models import NEG_TYPES, NEG_TYPE_INDEX, NegType, ThresholdState
from services.encoder_service import (
    EncodedBatch,
    ModelParams,
    backward_image,
    backward_text,
    forward_image,
    forward_text,
)

logger = logging.getLogger(__name__)

REL = NEG_TYPE_INDEX[NegType.REL]
N_TYPES = len(NEG_TYPES)


@dataclass
class HnSims:
    """
    Hard-negative similarities for a batch, columns ordered as NEG_TYPES.

    s_hn[i, k] = S(I_i, T_{i,k}), t_hn[i, k] = S(T_i, T_{i,k}); entries where
    valid is False are never read. `pool[i, j, k] = S(I_i, T_{j,k})` is only
    needed when the hard-negative pool spans the whole batch.
    """
    s_hn: np.ndarray
    t_hn: np.ndarray
    valid: np.ndarray
    pool: Optional[np.ndarray] = None

    @property
    def batch_size(self) -> int:
        return self.s_hn.shape[0]


@dataclass
class LossFlags:
    use_hn: bool = True
    hn_pool: str = "own"
    include_rel_term: bool = True


@dataclass
class LossBreakdown:
    itc_hn: float
    imc: float
    cmr: float
    cmr_hinge: float
    cmr_rel: float
    total: float
    hinge_rate: Dict[str, Optional[float]] = field(default_factory=dict)


def _masked(values: np.ndarray, valid: np.ndarray, fill: float) -> np.ndarray:
    return np.where(valid, values, fill)


def _pool_logits(sims: np.ndarray, hn: HnSims, hn_pool: str) -> np.ndarray:
    """Extra image->text candidates per row, -inf where absent."""
    if hn_pool == "batch":
        if hn.pool is None:
            raise ValueError("hn_pool='batch' needs HnSims.pool")
        B = sims.shape[0]
        flat_valid = np.broadcast_to(hn.valid.reshape(1, -1), (B, B * N_TYPES))
        return _masked(hn.pool.reshape(B, B * N_TYPES), flat_valid, -np.inf)
    return _masked(hn.s_hn, hn.valid, -np.inf)


def itc_loss(sims: np.ndarray) -> float:
    sims = np.asarray(sims, dtype=np.float64)
    diag = np.diag(sims)
    i2t = logsumexp(sims, axis=1) - diag
    t2i = logsumexp(sims, axis=0) - diag
    return float(np.mean(i2t + t2i))


def itc_hn_loss(sims: np.ndarray, hn: HnSims, hn_pool: str = "own") -> float:
    """ITC with the valid hard negatives added to each image's text candidates."""
    sims = np.asarray(sims, dtype=np.float64)
    diag = np.diag(sims)
    row_lse = logsumexp(sims, axis=1)
    extra = _pool_logits(sims, hn, hn_pool)
    has_extra = np.any(np.isfinite(extra), axis=1)
    if np.any(has_extra):
        extended = np.concatenate([sims[has_extra], extra[has_extra]], axis=1)
        row_lse = row_lse.copy()
        row_lse[has_extra] = logsumexp(extended, axis=1)
    t2i = logsumexp(sims, axis=0) - diag
    return float(np.mean(row_lse - diag + t2i))


def imc_loss(hn: HnSims) -> float:
    """Mean over the batch of log sum_k exp S(T, T_k); rows with no valid negative add 0."""
    B = hn.batch_size
    if B == 0:
        return 0.0
    total = 0.0
    for i in range(B):
        row_valid = hn.valid[i]
        if np.any(row_valid):
            total += float(logsumexp(hn.t_hn[i][row_valid]))
    return total / B


def cmr_terms(sims_diag: np.ndarray, hn: HnSims, thresholds: Sequence[float], include_rel_term: bool):
    """Returns (hinge part, relation term, active-hinge mask), both parts batch means."""
    B = hn.batch_size
    th = np.asarray(thresholds, dtype=np.float64)
    margins = _masked(hn.s_hn, hn.valid, 0.0) - np.asarray(sims_diag)[:, None] + th[None, :]
    active = hn.valid & (margins > 0)
    hinge = float(np.sum(np.where(active, margins, 0.0))) / B if B else 0.0
    rel = 0.0
    if include_rel_term and B:
        rel = -float(np.sum(_masked(hn.t_hn[:, REL], hn.valid[:, REL], 0.0))) / B
    return hinge, rel, active


def cmr_loss(sims_diag: np.ndarray, hn: HnSims, th: ThresholdState, include_rel_term: bool = True) -> float:
    hinge, rel, _ = cmr_terms(sims_diag, hn, th.values, include_rel_term)
    return hinge + rel


def batch_gaps(sims_diag: np.ndarray, hn: HnSims):
    """Per-type masked mean of S(I,T) - S(I,T_k) and valid counts."""
    gaps = np.asarray(sims_diag)[:, None] - _masked(hn.s_hn, hn.valid, 0.0)
    counts = hn.valid.sum(axis=0)
    means: List[Optional[float]] = []
    for k in range(N_TYPES):
        means.append(float(np.sum(gaps[hn.valid[:, k], k]) / counts[k]) if counts[k] else None)
    return means, counts.astype(int).tolist()


def update_thresholds(prev: ThresholdState, sims_diag: np.ndarray, hn: HnSims, u: float) -> ThresholdState:
    """
    th_k <- min(u, max(0, masked batch mean of S(I,T) - S(I,T_k))).
    Inputs are detached similarities of the step just taken; types with no
    valid item keep their previous value.
    """
    means, _ = batch_gaps(sims_diag, hn)
    values = list(prev.values)
    for k, gap in enumerate(means):
        if gap is not None:
            values[k] = min(u, max(0.0, gap))
    return ThresholdState(values=values, step=prev.step + 1)


def _hinge_rates(active: np.ndarray, valid: np.ndarray) -> Dict[str, Optional[float]]:
    counts = valid.sum(axis=0)
    hits = active.sum(axis=0)
    return {
        k.value: (float(hits[i]) / float(counts[i]) if counts[i] else None)
        for i, k in enumerate(NEG_TYPES)
    }


def total_loss(
    sims: np.ndarray,
    hn: HnSims,
    th: ThresholdState,
    alpha: float,
    beta: float,
    flags: LossFlags,
) -> LossBreakdown:
    """L = L_itc(hn) + alpha * L_imc + beta * L_cmr; components reported unweighted."""
    if flags.use_hn:
        itc = itc_hn_loss(sims, hn, flags.hn_pool)
    else:
        itc = itc_loss(sims)
    imc = imc_loss(hn)
    hinge, rel, active = cmr_terms(np.diag(sims), hn, th.values, flags.include_rel_term)
    cmr = hinge + rel
    return LossBreakdown(
        itc_hn=itc,
        imc=imc,
        cmr=cmr,
        cmr_hinge=hinge,
        cmr_rel=rel,
        total=itc + alpha * imc + beta * cmr,
        hinge_rate=_hinge_rates(active, hn.valid),
    )


# --- batched forward / backward ---

@dataclass
class Batch:
    """Encoder-ready batch: B images, B positives, B x 4 (possibly masked) negatives."""
    batch_id: str
    record_ids: List[str]
    features: np.ndarray  # (B, d_x)
    pos_ids: List[np.ndarray]
    neg_ids: List[List[Optional[np.ndarray]]]  # [B][4], None where masked
    valid: np.ndarray  # (B, 4) bool

    def __len__(self) -> int:
        return len(self.record_ids)


@dataclass
class BatchForward:
    sims: np.ndarray  # (B, B)
    hn: HnSims
    img: EncodedBatch
    pos: EncodedBatch
    neg: Optional[EncodedBatch]
    neg_index: List[tuple]  # (i, k) per row of `neg`
    u_neg: np.ndarray  # (B, 4, d), zero rows where masked


def forward_batch(params: ModelParams, batch: Batch) -> BatchForward:
    img = forward_image(params, batch.features)
    pos = forward_text(params, batch.pos_ids)
    B, d = img.u.shape
    neg_index = [(i, k) for i in range(B) for k in range(N_TYPES) if batch.valid[i, k]]
    u_neg = np.zeros((B, N_TYPES, d))
    neg = None
    if neg_index:
        neg = forward_text(params, [batch.neg_ids[i][k] for i, k in neg_index])
        rows, cols = zip(*neg_index)
        u_neg[list(rows), list(cols)] = neg.u
    inv_tau = params.inv_tau
    sims = (img.u @ pos.u.T) * inv_tau
    pool = np.einsum("id,jkd->ijk", img.u, u_neg) * inv_tau
    s_hn = pool[np.arange(B), np.arange(B)]
    t_hn = np.einsum("id,ikd->ik", pos.u, u_neg) * inv_tau
    hn = HnSims(s_hn=s_hn, t_hn=t_hn, valid=batch.valid.copy(), pool=pool)
    return BatchForward(sims=sims, hn=hn, img=img, pos=pos, neg=neg, neg_index=neg_index, u_neg=u_neg)


def loss_gradients(
    params: ModelParams,
    batch: Batch,
    th: ThresholdState,
    alpha: float,
    beta: float,
    flags: LossFlags,
    fwd: Optional[BatchForward] = None,
):
    """
    Exact gradients of total_loss for every parameter tensor.
    Thresholds are constants. Returns (LossBreakdown, grads, BatchForward).
    """
    if fwd is None:
        fwd = forward_batch(params, batch)
    sims, hn = fwd.sims, fwd.hn
    B = sims.shape[0]
    breakdown = total_loss(sims, hn, th, alpha, beta, flags)

    eye = np.eye(B)
    d_S = np.zeros((B, B))
    d_C = np.zeros((B, B, N_TYPES))
    d_T = np.zeros((B, N_TYPES))

    # ITC text->image
    d_S += (softmax(sims, axis=0) - eye) / B
    # ITC image->text, optionally with the hard-negative pool
    if flags.use_hn:
        extra = _pool_logits(sims, hn, flags.hn_pool)
        probs = softmax(np.concatenate([sims, extra], axis=1), axis=1)
        d_S += (probs[:, :B] - eye) / B
        if flags.hn_pool == "batch":
            d_C += probs[:, B:].reshape(B, B, N_TYPES) / B
        else:
            d_C[np.arange(B), np.arange(B)] += probs[:, B:] / B
    else:
        d_S += (softmax(sims, axis=1) - eye) / B

    # IMC
    if alpha != 0.0:
        for i in range(B):
            row_valid = hn.valid[i]
            if np.any(row_valid):
                d_T[i, row_valid] += alpha * softmax(hn.t_hn[i][row_valid]) / B

    # CMR
    if beta != 0.0:
        _, _, active = cmr_terms(np.diag(sims), hn, th.values, flags.include_rel_term)
        d_C[np.arange(B), np.arange(B)] += beta * active / B
        d_S[np.arange(B), np.arange(B)] -= beta * active.sum(axis=1) / B
        if flags.include_rel_term:
            d_T[:, REL] -= beta * hn.valid[:, REL] / B

    inv_tau = params.inv_tau
    u_img, u_pos, u_neg = fwd.img.u, fwd.pos.u, fwd.u_neg
    d_u_img = inv_tau * (d_S @ u_pos + np.einsum("ijk,jkd->id", d_C, u_neg))
    d_u_pos = inv_tau * (d_S.T @ u_img + np.einsum("ik,ikd->id", d_T, u_neg))
    d_u_neg = inv_tau * (np.einsum("ijk,id->jkd", d_C, u_img) + d_T[:, :, None] * u_pos[:, None, :])

    grads = params.zeros_like()
    grads.log_tau = np.array(-(np.sum(d_S * sims) + np.sum(d_C * hn.pool) + np.sum(d_T * hn.t_hn)))
    backward_image(params, fwd.img, d_u_img, grads)
    backward_text(params, batch.pos_ids, fwd.pos, d_u_pos, grads)
    if fwd.neg is not None:
        rows, cols = zip(*fwd.neg_index)
        backward_text(
            params,
            [batch.neg_ids[i][k] for i, k in fwd.neg_index],
            fwd.neg,
            d_u_neg[list(rows), list(cols)],
            grads,
        )

    if not grads.all_finite():
        raise NonFinite(f"LossService: non-finite gradient on batch {batch.batch_id}", batch_id=batch.batch_id)
    return breakdown, grads, fwd
