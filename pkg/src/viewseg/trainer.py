"""Joint optimization loop: per step a synchronized view pair feeds the TAS
loss, plus the method-dependent sequence / action / adversarial / contrastive
terms, followed by one Adam update.

Loss terms whose weight is zero are skipped entirely rather than multiplied
by zero, so a run of method "ours" with lam = beta = 0 consumes the same
random stream as "baseline" and reproduces it bit for bit.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor, backward
from .data import (Recording, SplitSpec, action_occurrences, apply_sync_shift,
                   sample_action_pair_occurrences, sample_view_pair)
from .losses import (LossWeights, action_loss, adversarial_view_loss,
                     contrastive_loss, sequence_loss, tas_loss, total_loss)
from .metrics import EvalReport, evaluate_all
from .model import EncoderConfig, ModelState, encode

logger = logging.getLogger(__name__)

METHODS = ("baseline", "ours", "ours_no_seq", "ours_no_action", "advloss", "contrastive")


class TrainingDiverged(RuntimeError):
    """A loss component became non-finite; carries the offending step."""


@dataclass
class TrainConfig:
    method: str = "ours"
    weights: LossWeights = field(default_factory=LossWeights)
    epochs: int = 10
    steps_per_epoch: int = 60
    learning_rate: float = 5e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    stop_grad: bool = True
    similarity: str = "cosine"
    seq_pool_len: int | None = None
    action_pool_len: int | None = None
    sync_shift: int = 0
    eval_every: int = 0          # 0: evaluate only after the final epoch
    allow_same_view: bool = False
    contrastive_batch: int = 8   # sequences per step-batch for method=contrastive
    contrastive_temperature: float = 0.07
    embed_dim: int = 16
    num_stages: int = 2
    layers_per_stage: int = 6
    kernel_size: int = 3

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}, expected one of {METHODS}")
        if self.epochs < 1 or self.steps_per_epoch < 1:
            raise ValueError("epochs and steps_per_epoch must be positive")
        if self.contrastive_batch < 2:
            raise ValueError("contrastive step-batch needs at least 2 sequences")

    def resolved_weights(self) -> LossWeights:
        """Force method-consistent weights: only the method's terms are active."""
        w = self.weights
        lam = w.lam if self.method in ("ours", "ours_no_action") else 0.0
        beta = w.beta if self.method in ("ours", "ours_no_seq") else 0.0
        return replace(w, lam=lam, beta=beta)


@dataclass
class EpochLog:
    epoch: int
    tas: float
    seq: float
    action: float
    aux: float
    seconds: float
    report: EvalReport | None = None
    skipped_action_steps: int = 0


@dataclass
class TrainLog:
    epochs: list[EpochLog] = field(default_factory=list)

    def final_report(self) -> EvalReport:
        for entry in reversed(self.epochs):
            if entry.report is not None:
                return entry.report
        raise ValueError("training log holds no evaluation snapshot")


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    step_count: int
    m: list[np.ndarray]
    v: list[np.ndarray]

    @classmethod
    def for_params(cls, params: list[Tensor]) -> "AdamState":
        return cls(0, [np.zeros_like(p.data) for p in params],
                   [np.zeros_like(p.data) for p in params])


def adam_step(params: list[Tensor], grads: list[np.ndarray], state: AdamState,
              lr: float, betas: tuple[float, float] = (0.9, 0.999),
              eps: float = 1e-8) -> bool:
    """Bias-corrected Adam update in place; skips the step on non-finite grads."""
    if len(params) != len(grads):
        raise ValueError("params and grads must align")
    for p, g in zip(params, grads):
        if p.data.shape != g.shape:
            raise ValueError(f"grad shape {g.shape} does not match param {p.data.shape}")
    if any(not np.all(np.isfinite(g)) for g in grads):
        logger.warning("non-finite gradient encountered; Adam step skipped")
        return False
    b1, b2 = betas
    state.step_count += 1
    t = state.step_count
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for i, (p, g) in enumerate(zip(params, grads)):
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g
        p.data -= lr * (state.m[i] / c1) / (np.sqrt(state.v[i] / c2) + eps)
    return True


# ---------------------------------------------------------------------------
# training loop


def _segment_embedding(cache: dict, rec: Recording, state: ModelState):
    key = (rec.sequence_id, rec.view_id)
    if key not in cache:
        cache[key] = encode(rec.features, state)
    return cache[key].z


def _pooled_vector(z: Tensor) -> Tensor:
    return ad.reshape(ad.adaptive_average_pool(z, 1), (z.shape[1],))


def train(cfg: TrainConfig, recordings: list[Recording], split: SplitSpec,
          ignore_labels=()) -> tuple[ModelState, TrainLog]:
    """Run the full optimization; deterministic given the config seed."""
    if not recordings:
        raise ValueError("cannot train on an empty dataset")
    weights = cfg.resolved_weights()
    uses_seq = weights.lam > 0
    uses_action = weights.beta > 0
    uses_adv = cfg.method == "advloss"
    uses_contrastive = cfg.method == "contrastive"

    input_dim = recordings[0].features.shape[1]
    num_classes = int(max(r.labels.max() for r in recordings)) + 1
    enc_cfg = EncoderConfig(input_dim, cfg.embed_dim, num_classes,
                            cfg.num_stages, cfg.layers_per_stage, cfg.kernel_size)
    state = ModelState.init(enc_cfg, seed=cfg.seed)
    rng = np.random.default_rng([cfg.seed, 1])

    seen_counts: dict[int, int] = {}
    for rec in recordings:
        if rec.view_id in split.seen_views:
            seen_counts[rec.sequence_id] = seen_counts.get(rec.sequence_id, 0) + 1
    eligible = sorted(s for s, n in seen_counts.items() if n >= 2)
    if not eligible:
        raise ValueError("no sequence has two seen views; cannot form training pairs")

    trainable = list(state.params.values())
    view_index = {v: i for i, v in enumerate(sorted(split.seen_views))}
    if uses_adv:
        head_rng = np.random.default_rng([cfg.seed, 2])
        bound = 1.0 / np.sqrt(cfg.embed_dim)
        adv_head = (
            Tensor(head_rng.uniform(-bound, bound, size=(cfg.embed_dim, len(view_index))),
                   requires_grad=True),
            Tensor(np.zeros(len(view_index)), requires_grad=True),
        )
        trainable.extend(adv_head)
    occurrences = action_occurrences(recordings, split) if uses_action else []

    adam_state = AdamState.for_params(trainable)
    betas = (cfg.adam_beta1, cfg.adam_beta2)
    log = TrainLog()

    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        sums = {"tas": 0.0, "seq": 0.0, "action": 0.0, "aux": 0.0}
        skipped_action = 0
        for step in range(cfg.steps_per_epoch):
            seq_id = eligible[int(rng.integers(len(eligible)))]
            q, r = sample_view_pair(recordings, seq_id, split, rng)
            shifted_q = q
            if cfg.sync_shift > 0:
                delta = min(cfg.sync_shift, q.num_frames - 1)  # keep the shift legal
                if delta > 0:
                    shifted_q = apply_sync_shift(q, delta, rng)
            with Tape():
                cache: dict = {}
                enc_q = encode(shifted_q.features, state)
                enc_r = encode(r.features, state)
                if shifted_q is q:
                    cache[(q.sequence_id, q.view_id)] = enc_q
                cache[(r.sequence_id, r.view_id)] = enc_r

                tas_terms = [
                    tas_loss(enc_q.logits_per_stage, shifted_q.labels, weights),
                    tas_loss(enc_r.logits_per_stage, r.labels, weights),
                ]
                seq_term = None
                if uses_seq:
                    seq_term = sequence_loss(enc_q, enc_r, state, cfg.similarity,
                                             cfg.stop_grad, cfg.seq_pool_len)
                action_term = None
                if uses_action:
                    try:
                        occ_a, occ_b = sample_action_pair_occurrences(
                            occurrences, rng, cfg.allow_same_view)
                    except ValueError:
                        skipped_action += 1
                        logger.warning("step %d: no valid action pair; term skipped", step)
                    else:
                        emb_a = ad.gather_rows(
                            _segment_embedding(cache, occ_a.recording, state),
                            np.arange(occ_a.segment.start, occ_a.segment.end))
                        emb_b = ad.gather_rows(
                            _segment_embedding(cache, occ_b.recording, state),
                            np.arange(occ_b.segment.start, occ_b.segment.end))
                        action_term = action_loss(
                            (emb_a, occ_a.label), (emb_b, occ_b.label), state,
                            cfg.similarity, cfg.stop_grad, cfg.action_pool_len)

                total = total_loss(tas_terms, seq_term, action_term, weights)
                aux_val = 0.0
                if uses_adv:
                    adv = ad.add(
                        adversarial_view_loss(enc_q.z, view_index[q.view_id], adv_head),
                        adversarial_view_loss(enc_r.z, view_index[r.view_id], adv_head))
                    aux_val = adv.item()
                    total = ad.add(total, adv)
                if uses_contrastive:
                    entries = [
                        (q.sequence_id, q.view_id, _pooled_vector(enc_q.z)),
                        (r.sequence_id, r.view_id, _pooled_vector(enc_r.z)),
                    ]
                    for _ in range(cfg.contrastive_batch - 1):
                        extra_id = eligible[int(rng.integers(len(eligible)))]
                        eq, er = sample_view_pair(recordings, extra_id, split, rng)
                        for rec in (eq, er):
                            z = _segment_embedding(cache, rec, state)
                            entries.append((rec.sequence_id, rec.view_id, _pooled_vector(z)))
                    nce = contrastive_loss(entries, cfg.contrastive_temperature)
                    aux_val = nce.item()
                    total = ad.add(total, nce)

                components = {
                    "tas": tas_terms[0].item() + tas_terms[1].item(),
                    "seq": seq_term.item() if seq_term is not None else 0.0,
                    "action": action_term.item() if action_term is not None else 0.0,
                    "aux": aux_val,
                }
                bad = [k for k, v in components.items() if not np.isfinite(v)]
                if bad or not np.isfinite(total.item()):
                    raise TrainingDiverged(
                        f"non-finite loss at epoch {epoch} step {step}: "
                        f"components={components}")
                for p in trainable:
                    p.grad = None
                backward(total)
            grads = [p.grad_array() for p in trainable]
            adam_step(trainable, grads, adam_state, cfg.learning_rate, betas, cfg.adam_eps)
            for k in sums:
                sums[k] += components[k]

        n = cfg.steps_per_epoch
        report = None
        if (cfg.eval_every > 0 and (epoch + 1) % cfg.eval_every == 0) or epoch == cfg.epochs - 1:
            report = evaluate_all(state, recordings, split, ignore_labels)
        log.epochs.append(EpochLog(
            epoch=epoch, tas=sums["tas"] / n, seq=sums["seq"] / n,
            action=sums["action"] / n, aux=sums["aux"] / n,
            seconds=time.perf_counter() - t0, report=report,
            skipped_action_steps=skipped_action))
    return state, log
