"""Finite-difference verification suites for every differentiable primitive
and for the assembled training objective.

Each check draws seeded random instances in [-2, 2] (nudged away from the
kinks of relu/clamp, and away from zero for div/log/sqrt) and reports the
worst relative error against central differences. The two deliberate
gradient modifications, stop_gradient and grad_reverse, cannot be validated
by finite differences, so they get exact definition checks instead; the
assembled-objective check therefore runs with stop_grad off and smoothing
weight zero, exercising every genuinely differentiable path of the total
loss.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor, backward, finite_difference_check
from .losses import (LossWeights, action_loss, adversarial_view_loss,
                     contrastive_loss, sequence_loss, tas_loss, total_loss)
from .model import EncoderConfig, ModelState, encode

TOLERANCE = 1e-4


@dataclass
class CheckResult:
    name: str
    max_error: float
    trials: int

    @property
    def passed(self) -> bool:
        return self.max_error <= TOLERANCE


def _box(rng, *shape):
    return rng.uniform(-2.0, 2.0, size=shape)


def _away_from(x, points, margin=1e-3):
    """Push coordinates within ``margin`` of any kink point to a safe spot."""
    x = np.array(x)
    for p in points:
        near = np.abs(x - p) < margin
        x[near] = p + 0.5
    return x


def _probe(rng, shape):
    return Tensor(rng.uniform(-1.0, 1.0, size=shape))


def _scalarized(op, rng, out_shape):
    w = _probe(rng, out_shape)
    return lambda *ts: ad.sum_(ad.mul(op(*ts), w))


def _primitive_cases(rng):
    """One (f, inputs) instance per primitive; rerolled every trial."""
    T, D = 5, 3
    x = Tensor(_box(rng, T, D))
    y = Tensor(_box(rng, T, D))
    m = Tensor(_box(rng, D, 4))
    vec = Tensor(_box(rng, D))
    pos = Tensor(rng.uniform(0.5, 2.5, size=(T, D)))
    signed_away = Tensor(np.sign(_box(rng, T, D)) * rng.uniform(0.5, 2.0, size=(T, D)))
    kink_free = Tensor(_away_from(_box(rng, T, D), [0.0]))
    clamp_free = Tensor(_away_from(_box(rng, T, D), [-1.0, 1.0]))
    gather_idx = np.array([0, 2, 2, 4, 1])
    kernel = Tensor(_box(rng, 3, D, 4) * 0.5)
    conv_bias = Tensor(_box(rng, 4) * 0.5)

    return [
        ("add", _scalarized(ad.add, rng, (T, D)), [x, y]),
        ("sub", _scalarized(ad.sub, rng, (T, D)), [x, y]),
        ("mul", _scalarized(ad.mul, rng, (T, D)), [x, y]),
        ("div", _scalarized(ad.div, rng, (T, D)), [x, signed_away]),
        ("scalar_mul", _scalarized(lambda t: ad.scalar_mul(t, 1.7), rng, (T, D)), [x]),
        ("matmul", _scalarized(ad.matmul, rng, (T, 4)), [x, m]),
        ("transpose", _scalarized(ad.transpose, rng, (D, T)), [x]),
        ("reshape", _scalarized(lambda t: ad.reshape(t, (D, T)), rng, (D, T)), [x]),
        ("concat", _scalarized(lambda a, b: ad.concat([a, b], axis=0), rng, (2 * T, D)), [x, y]),
        ("gather_rows", _scalarized(lambda t: ad.gather_rows(t, gather_idx), rng, (5, D)), [x]),
        ("relu", _scalarized(ad.relu, rng, (T, D)), [kink_free]),
        ("gelu", _scalarized(ad.gelu, rng, (T, D)), [x]),
        ("exp", _scalarized(ad.exp, rng, (T, D)), [x]),
        ("log", _scalarized(ad.log, rng, (T, D)), [pos]),
        ("sqrt", _scalarized(ad.sqrt, rng, (T, D)), [pos]),
        ("clamp", _scalarized(lambda t: ad.clamp(t, -1.0, 1.0), rng, (T, D)), [clamp_free]),
        ("softmax", _scalarized(ad.softmax, rng, (T, D)), [x]),
        ("log_softmax", _scalarized(ad.log_softmax, rng, (T, D)), [x]),
        ("sum_axis", _scalarized(lambda t: ad.sum_(t, axis=0), rng, (D,)), [x]),
        ("sum_all", lambda t: ad.sum_(t), [x]),
        ("mean_axis", _scalarized(lambda t: ad.mean(t, axis=1), rng, (T,)), [x]),
        ("l2_normalize", _scalarized(ad.l2_normalize, rng, (T, D)), [signed_away]),
        ("adaptive_average_pool",
         _scalarized(lambda t: ad.adaptive_average_pool(t, 2), rng, (2, D)), [x]),
        ("dilated_conv1d_d1",
         _scalarized(lambda t, k, b: ad.dilated_conv1d(t, k, b, 1), rng, (T, 4)),
         [x, kernel, conv_bias]),
        ("dilated_conv1d_d2",
         _scalarized(lambda t, k, b: ad.dilated_conv1d(t, k, b, 2), rng, (T, 4)),
         [x, kernel, conv_bias]),
        ("l2_normalize_dot", lambda t: ad.sum_(ad.mul(ad.l2_normalize(t), vec)), [signed_away]),
    ]


def check_primitives(seed: int = 0, trials: int = 100) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    worst: dict[str, float] = {}
    for _ in range(trials):
        for name, f, inputs in _primitive_cases(rng):
            err = finite_difference_check(f, inputs, h=1e-5)
            worst[name] = max(worst.get(name, 0.0), err)
    return [CheckResult(name, err, trials) for name, err in worst.items()]


def check_detached_paths(seed: int = 0, trials: int = 50) -> list[CheckResult]:
    """Definition checks for the two non-FD-checkable primitives."""
    rng = np.random.default_rng(seed)
    worst_stop = worst_rev = 0.0
    for _ in range(trials):
        x = Tensor(_box(rng, 4, 3), requires_grad=True)
        other = Tensor(_box(rng, 4, 3), requires_grad=True)
        c = Tensor(_box(rng, 4, 3))
        with Tape():
            # root must touch some differentiable leaf or it never hits the tape
            out = ad.add(ad.sum_(ad.mul(ad.stop_gradient(x), c)), ad.sum_(other))
            backward(out)
        worst_stop = max(worst_stop, float(np.abs(x.grad_array()).max()))

        y = Tensor(_box(rng, 4, 3), requires_grad=True)
        with Tape():
            out = ad.sum_(ad.mul(ad.grad_reverse(y), c))
            backward(out)
        worst_rev = max(worst_rev, float(np.abs(y.grad_array() + c.data).max()))
    return [
        CheckResult("stop_gradient_zero", worst_stop, trials),
        CheckResult("grad_reverse_negation", worst_rev, trials),
    ]


def _tiny_model(rng) -> tuple[EncoderConfig, ModelState]:
    cfg = EncoderConfig(input_dim=3, embed_dim=4, num_classes=3,
                        num_stages=2, layers_per_stage=1, kernel_size=3)
    return cfg, ModelState.init(cfg, seed=int(rng.integers(1 << 30)))


def check_total_loss(seed: int = 0, trials: int = 5) -> CheckResult:
    """FD check of the assembled objective over features and all parameters.

    stop_grad is off and the smoothing weight is zero: those two paths
    deliberately diverge from the true derivative, so finite differences
    cannot certify them (they have exact definition checks instead).
    """
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        cfg, state = _tiny_model(rng)
        T = 6
        names = list(state.params)
        feats_q = Tensor(_box(rng, T, cfg.input_dim) * 0.5)
        feats_r = Tensor(_box(rng, T, cfg.input_dim) * 0.5)
        labels = rng.integers(cfg.num_classes, size=T)
        weights = LossWeights(lam=0.5, beta=0.2, smooth_weight=0.0)

        def f(fq, fr, *param_probes):
            probe_state = ModelState(cfg, dict(zip(names, param_probes)))
            enc_q = encode(fq, probe_state)
            enc_r = encode(fr, probe_state)
            tas_terms = [tas_loss(enc_q.logits_per_stage, labels, weights),
                         tas_loss(enc_r.logits_per_stage, labels, weights)]
            seq = sequence_loss(enc_q, enc_r, probe_state, "cosine", stop_grad=False)
            emb_a = ad.gather_rows(enc_q.z, np.arange(0, 4))
            emb_b = ad.gather_rows(enc_r.z, np.arange(2, T))
            act = action_loss((emb_a, 1), (emb_b, 1), probe_state, "cosine",
                              stop_grad=False)
            return total_loss(tas_terms, seq, act, weights)

        inputs = [feats_q, feats_r] + [Tensor(state.params[n].data) for n in names]
        worst = max(worst, finite_difference_check(f, inputs, h=1e-5))
    return CheckResult("total_loss", worst, trials)


def check_aux_losses(seed: int = 0, trials: int = 5) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    worst_adv = worst_nce = worst_ce = 0.0
    for _ in range(trials):
        T, D, M = 5, 4, 3
        z = Tensor(_box(rng, T, D))
        w = Tensor(_box(rng, D, M) * 0.5)
        b = Tensor(_box(rng, M) * 0.5)

        # encoder-side gradient of the reversed objective must equal minus the
        # gradient of the plain view cross-entropy
        probe = Tensor(z.data.copy(), requires_grad=True)
        with Tape():
            out = adversarial_view_loss(probe, 1, (Tensor(w.data), Tensor(b.data)))
            backward(out)
        got = probe.grad_array()

        def plain_ce_z(zi):
            logits = ad.add(ad.matmul(zi, Tensor(w.data)), Tensor(b.data))
            lp = ad.log_softmax(logits, axis=-1)
            onehot = np.zeros((T, M))
            onehot[:, 1] = 1.0
            return ad.neg(ad.scalar_mul(ad.sum_(ad.mul(lp, Tensor(onehot))), 1.0 / T))

        ref = Tensor(z.data.copy(), requires_grad=True)
        with Tape():
            backward(plain_ce_z(ref))
        worst_adv = max(worst_adv, float(np.abs(got + ref.grad_array()).max()))
        worst_ce = max(worst_ce, finite_difference_check(plain_ce_z, [z], h=1e-5))

        vecs = [Tensor(np.sign(_box(rng, D)) * rng.uniform(0.5, 2.0, size=D))
                for _ in range(4)]
        meta = [(0, 0), (0, 1), (1, 0), (1, 1)]

        def nce(*vs):
            entries = [(s, v, t) for (s, v), t in zip(meta, vs)]
            return contrastive_loss(entries, temperature=0.5)

        worst_nce = max(worst_nce, finite_difference_check(nce, vecs, h=1e-5))
    return [
        CheckResult("adversarial_reversal", worst_adv, trials),
        CheckResult("view_head_cross_entropy", worst_ce, trials),
        CheckResult("contrastive_infonce", worst_nce, trials),
    ]


def run_all(seed: int = 0, primitive_trials: int = 100) -> list[CheckResult]:
    results = check_primitives(seed, primitive_trials)
    results.extend(check_detached_paths(seed))
    results.append(check_total_loss(seed))
    results.extend(check_aux_losses(seed))
    return results
