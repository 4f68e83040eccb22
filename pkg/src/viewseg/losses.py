"""Training objectives: TAS loss, cross-view sequence and action losses, the
joint combination, and the adversarial / contrastive baseline losses.

All similarity kinds are oriented so that higher means more similar; the
sequence and action losses negate the symmetric mean similarity, so the
cosine variants live in [-1, 1] and perfect agreement scores -1.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .model import EncodeOutput, ModelState, predictor_forward

SIMILARITY_KINDS = ("cosine", "mse", "kl")
COSINE_EPS = 1e-8  # lower clamp on each frame norm; zero-norm frames stay finite


@dataclass
class LossWeights:
    """Weights of the joint objective: total = tas + lam * seq + beta * action."""

    lam: float = 0.5
    beta: float = 0.2
    smooth_weight: float = 0.15
    smooth_clamp: float = 4.0

    def __post_init__(self):
        vals = (self.lam, self.beta, self.smooth_weight, self.smooth_clamp)
        if not all(np.isfinite(v) and v >= 0 for v in vals):
            raise ValueError(f"loss weights must be finite and nonnegative: {self}")
        if self.smooth_clamp <= 0:
            raise ValueError("smooth_clamp must be positive")


def _check_kind(kind: str) -> None:
    if kind not in SIMILARITY_KINDS:
        raise ValueError(f"unknown similarity kind {kind!r}, expected one of {SIMILARITY_KINDS}")


def framewise_similarity(p: Tensor, z: Tensor, kind: str = "cosine") -> Tensor:
    """Mean per-frame similarity between two [T, D] embedding streams."""
    _check_kind(kind)
    if p.shape != z.shape or p.data.ndim != 2:
        raise ad.ShapeError(f"similarity expects equal [T, D] shapes, got {p.shape} vs {z.shape}")
    if kind == "cosine":
        # eps engages only for (near-)zero-norm frames, keeping the cosine
        # exactly scale invariant everywhere else
        dots = ad.sum_(ad.mul(p, z), axis=1)
        norm_p = ad.clamp(ad.sqrt(ad.sum_(ad.mul(p, p), axis=1)), COSINE_EPS, np.inf)
        norm_z = ad.clamp(ad.sqrt(ad.sum_(ad.mul(z, z), axis=1)), COSINE_EPS, np.inf)
        return ad.mean(ad.div(dots, ad.mul(norm_p, norm_z)))
    if kind == "mse":
        d = ad.sub(p, z)
        return ad.neg(ad.mean(ad.mul(d, d)))
    # kl: negative mean KL(softmax(z) || softmax(p)), the z branch is the target
    lsp = ad.log_softmax(p, axis=-1)
    lsz = ad.log_softmax(z, axis=-1)
    q = ad.softmax(z, axis=-1)
    per_frame = ad.sum_(ad.mul(q, ad.sub(lsz, lsp)), axis=1)
    return ad.neg(ad.mean(per_frame))


def _symmetric_loss(z_a: Tensor, z_b: Tensor, state: ModelState, kind: str,
                    stop_grad: bool) -> Tensor:
    p_a = predictor_forward(z_a, state)
    p_b = predictor_forward(z_b, state)
    t_a = ad.stop_gradient(z_a) if stop_grad else z_a
    t_b = ad.stop_gradient(z_b) if stop_grad else z_b
    s_ab = framewise_similarity(p_a, t_b, kind)
    s_ba = framewise_similarity(p_b, t_a, kind)
    return ad.scalar_mul(ad.add(s_ab, s_ba), -0.5)


def sequence_loss(enc_q: EncodeOutput, enc_r: EncodeOutput, state: ModelState,
                  kind: str = "cosine", stop_grad: bool = True,
                  pool_len: int | None = None) -> Tensor:
    """Symmetric negated frame-wise similarity between two synchronized views.

    Both views must have the same frame count (the recordings are
    synchronized; the caller pre-trims otherwise). With ``pool_len`` set,
    predictor outputs and targets are average-pooled to min(pool_len, T)
    before the similarity.
    """
    _check_kind(kind)
    z_q, z_r = enc_q.z, enc_r.z
    if z_q.shape[0] != z_r.shape[0]:
        raise ValueError(
            f"sequence loss needs equal frame counts, got {z_q.shape[0]} vs {z_r.shape[0]}"
        )
    p_q = predictor_forward(z_q, state)
    p_r = predictor_forward(z_r, state)
    t_q = ad.stop_gradient(z_q) if stop_grad else z_q
    t_r = ad.stop_gradient(z_r) if stop_grad else z_r
    if pool_len is not None:
        L = min(pool_len, z_q.shape[0])
        p_q, p_r = ad.adaptive_average_pool(p_q, L), ad.adaptive_average_pool(p_r, L)
        t_q, t_r = ad.adaptive_average_pool(t_q, L), ad.adaptive_average_pool(t_r, L)
    s_qr = framewise_similarity(p_q, t_r, kind)
    s_rq = framewise_similarity(p_r, t_q, kind)
    return ad.scalar_mul(ad.add(s_qr, s_rq), -0.5)


def align_linear(t_a: int, t_b: int) -> tuple[np.ndarray, np.ndarray]:
    """Linear temporal alignment between two segment lengths.

    The shorter side keeps identity indices 0..m-1 (m = min); the longer side
    of length T is subsampled at floor(t * T / m). Both index lists are
    strictly increasing and in range.
    """
    if t_a < 1 or t_b < 1:
        raise ValueError(f"segment lengths must be positive, got ({t_a}, {t_b})")
    m = min(t_a, t_b)
    short = np.arange(m, dtype=np.int64)
    idx_a = short if t_a == m else (np.arange(m, dtype=np.int64) * t_a) // m
    idx_b = short if t_b == m else (np.arange(m, dtype=np.int64) * t_b) // m
    return idx_a, idx_b


def action_loss(seg_q: tuple[Tensor, int], seg_r: tuple[Tensor, int], state: ModelState,
                kind: str = "cosine", stop_grad: bool = True,
                pool_len: int | None = None) -> Tensor:
    """Symmetric negated similarity between two same-class action segments.

    ``seg_q``/``seg_r`` are (embeddings [T_s, D], action label) pairs, sliced
    from the parent sequence encodings. Embeddings are linearly aligned to
    the shorter length, or pooled to min(pool_len, T_q, T_r) when set, then
    compared exactly as in the sequence loss.
    """
    _check_kind(kind)
    (emb_q, label_q), (emb_r, label_r) = seg_q, seg_r
    if label_q != label_r:
        raise ValueError(f"action loss needs equal labels, got {label_q} vs {label_r}")
    if pool_len is not None:
        L = min(pool_len, emb_q.shape[0], emb_r.shape[0])
        a = ad.adaptive_average_pool(emb_q, L)
        b = ad.adaptive_average_pool(emb_r, L)
    else:
        idx_q, idx_r = align_linear(emb_q.shape[0], emb_r.shape[0])
        a = ad.gather_rows(emb_q, idx_q)
        b = ad.gather_rows(emb_r, idx_r)
    return _symmetric_loss(a, b, state, kind, stop_grad)


def tas_loss(logits_per_stage: list[Tensor], labels, weights: LossWeights) -> Tensor:
    """Frame-wise cross-entropy plus truncated temporal smoothing, summed over stages.

    The smoothing term is the mean over frames t >= 1 and classes of
    min(smooth_clamp, |log p_t - log p_{t-1}|)^2 with the previous-frame
    log-probabilities treated as constants.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if not logits_per_stage:
        raise ValueError("tas loss needs at least one stage of logits")
    T, C = logits_per_stage[0].shape
    if labels.shape != (T,):
        raise ValueError(f"labels shape {labels.shape} does not match {T} frames")
    if labels.size and (labels.min() < 0 or labels.max() >= C):
        raise ValueError(f"labels must lie in [0, {C}), got range "
                         f"[{labels.min()}, {labels.max()}]")
    onehot = np.zeros((T, C))
    onehot[np.arange(T), labels] = 1.0
    onehot_t = Tensor(onehot)

    total: Tensor | None = None
    for logits in logits_per_stage:
        if logits.shape != (T, C):
            raise ValueError(f"stage logits shape {logits.shape} differs from ({T}, {C})")
        lp = ad.log_softmax(logits, axis=-1)
        ce = ad.neg(ad.scalar_mul(ad.sum_(ad.mul(lp, onehot_t)), 1.0 / T))
        stage = ce
        if T > 1 and weights.smooth_weight > 0:
            cur = ad.gather_rows(lp, np.arange(1, T))
            prev = Tensor(lp.data[:-1])  # previous frame is a constant
            d = ad.clamp(ad.sub(cur, prev), -weights.smooth_clamp, weights.smooth_clamp)
            smooth = ad.mean(ad.mul(d, d))
            stage = ad.add(ce, ad.scalar_mul(smooth, weights.smooth_weight))
        total = stage if total is None else ad.add(total, stage)
    return total


def total_loss(tas_terms, seq_term: Tensor | None, action_term: Tensor | None,
               weights: LossWeights) -> Tensor:
    """Joint objective: sum of per-view TAS terms + lam * seq + beta * action."""
    terms = list(tas_terms) if isinstance(tas_terms, (list, tuple)) else [tas_terms]
    if not terms:
        raise ValueError("total loss needs at least one TAS term")
    total = terms[0]
    for t in terms[1:]:
        total = ad.add(total, t)
    if seq_term is not None:
        total = ad.add(total, ad.scalar_mul(seq_term, weights.lam))
    if action_term is not None:
        total = ad.add(total, ad.scalar_mul(action_term, weights.beta))
    return total


def adversarial_view_loss(z: Tensor, view_index: int, view_head: tuple[Tensor, Tensor]) -> Tensor:
    """View-classification cross-entropy behind a gradient-reversal boundary.

    The linear view head receives standard gradients; the encoder side of
    ``z`` receives negated gradients, so minimizing this term trains the head
    while pushing the encoder toward view-independent features.
    """
    w, b = view_head
    num_views = w.shape[1]
    if not 0 <= view_index < num_views:
        raise ValueError(f"view index {view_index} out of range [0, {num_views})")
    logits = ad.add(ad.matmul(ad.grad_reverse(z), w), b)
    lp = ad.log_softmax(logits, axis=-1)
    T = z.shape[0]
    onehot = np.zeros((T, num_views))
    onehot[:, view_index] = 1.0
    return ad.neg(ad.scalar_mul(ad.sum_(ad.mul(lp, Tensor(onehot))), 1.0 / T))


def contrastive_loss(entries: list[tuple[int, int, Tensor]], temperature: float = 0.07) -> Tensor:
    """InfoNCE over pooled per-recording embeddings.

    Positives for an anchor are batch entries with the same sequence id and a
    different view id; every other entry is a negative. Anchors without a
    positive are excluded from the mean; a batch with no usable anchor is an
    error. Vectors are L2-normalized, so the loss is scale invariant.
    """
    if len(entries) < 2:
        raise ValueError("contrastive loss needs at least two batch entries")
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    n = len(entries)
    rows = []
    for _, _, vec in entries:
        if vec.data.ndim != 1:
            raise ad.ShapeError(f"pooled embeddings must be 1-D, got shape {vec.shape}")
        rows.append(ad.reshape(ad.l2_normalize(vec), (1, vec.shape[0])))
    V = ad.concat(rows, axis=0)
    sims = ad.matmul(V, ad.transpose(V))
    E = ad.exp(ad.scalar_mul(sims, 1.0 / temperature))

    pos = np.zeros((n, n))
    off_diag = 1.0 - np.eye(n)
    for i, (seq_i, view_i, _) in enumerate(entries):
        for j, (seq_j, view_j, _) in enumerate(entries):
            if i != j and seq_i == seq_j and view_i != view_j:
                pos[i, j] = 1.0
    valid = np.flatnonzero(pos.sum(axis=1) > 0)
    if valid.size == 0:
        raise ValueError("no anchor in the batch has a cross-view positive")

    pos_sums = ad.sum_(ad.mul(E, Tensor(pos)), axis=1)
    all_sums = ad.sum_(ad.mul(E, Tensor(off_diag)), axis=1)
    log_ratio = ad.sub(ad.log(ad.gather_rows(pos_sums, valid)),
                       ad.log(ad.gather_rows(all_sums, valid)))
    return ad.neg(ad.mean(log_ratio))
