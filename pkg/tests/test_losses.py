"""Loss-level tests: frozen hand-derived values, the algebraic invariants
(symmetry, scale invariance, bounds, stop-gradient, smoothing), and
brute-force oracles for alignment and InfoNCE."""

import math

import numpy as np
import pytest

from viewseg import autodiff as ad
from viewseg.autodiff import Tape, Tensor, backward
from viewseg.losses import (LossWeights, action_loss, adversarial_view_loss,
                            align_linear, contrastive_loss, framewise_similarity,
                            sequence_loss, tas_loss, total_loss)
from viewseg.model import EncodeOutput, EncoderConfig, ModelState, encode


def enc_output(z):
    t = z if isinstance(z, Tensor) else Tensor(z)
    return EncodeOutput(z=t, logits_per_stage=[])


@pytest.fixture
def identity_predictor(monkeypatch):
    # the GELU MLP cannot realize an exact identity, so patch the head away
    monkeypatch.setattr("viewseg.losses.predictor_forward", lambda z, state: z)


def test_cosine_self_similarity():
    rng = np.random.default_rng(0)
    z = Tensor(rng.normal(size=(6, 4)))
    val = framewise_similarity(z, z, "cosine").item()
    assert val == pytest.approx(1.0, abs=1e-6)


def test_cosine_orthogonal_frames():
    p = Tensor(np.array([[1.0, 0.0], [0.0, 1.0]]))
    z = Tensor(np.array([[0.0, 1.0], [1.0, 0.0]]))
    assert framewise_similarity(p, z, "cosine").item() == pytest.approx(0.0, abs=1e-12)


def test_cosine_single_frame_value():
    # dot = 32, norms sqrt(14) * sqrt(77)
    p = Tensor(np.array([[1.0, 2.0, 3.0]]))
    z = Tensor(np.array([[4.0, 5.0, 6.0]]))
    expected = 32.0 / (math.sqrt(14.0) * math.sqrt(77.0))
    assert expected == pytest.approx(0.974632, abs=1e-6)
    assert framewise_similarity(p, z, "cosine").item() == pytest.approx(expected, abs=1e-6)


def test_cosine_zero_norm_frame_stays_finite():
    p = Tensor(np.zeros((2, 3)))
    z = Tensor(np.ones((2, 3)))
    assert np.isfinite(framewise_similarity(p, z, "cosine").item())


def test_mse_and_kl_orientation():
    rng = np.random.default_rng(1)
    z = Tensor(rng.normal(size=(5, 4)))
    near = Tensor(z.data + 0.01 * rng.normal(size=(5, 4)))
    far = Tensor(z.data + 2.0 * rng.normal(size=(5, 4)))
    for kind in ("mse", "kl"):
        s_self = framewise_similarity(z, z, kind).item()
        s_near = framewise_similarity(near, z, kind).item()
        s_far = framewise_similarity(far, z, kind).item()
        assert s_self == pytest.approx(0.0, abs=1e-12)
        assert s_self >= s_near > s_far


def test_unknown_similarity_kind():
    z = Tensor(np.ones((2, 2)))
    with pytest.raises(ValueError):
        framewise_similarity(z, z, "dot")


def rand_state(embed_dim=5, seed=3):
    cfg = EncoderConfig(input_dim=4, embed_dim=embed_dim, num_classes=3,
                        num_stages=1, layers_per_stage=1)
    return ModelState.init(cfg, seed=seed)


def test_sequence_loss_identity_predictor(identity_predictor):
    rng = np.random.default_rng(20)
    state = rand_state()
    z = rng.normal(size=(8, 5))
    same = sequence_loss(enc_output(z), enc_output(z.copy()), state, "cosine")
    assert same.item() == pytest.approx(-1.0, abs=1e-6)
    p = np.zeros((4, 2))
    q = np.zeros((4, 2))
    p[:, 0], q[:, 1] = 1.0, 1.0  # orthogonal frame by frame
    ortho = sequence_loss(enc_output(p), enc_output(q), state, "cosine")
    assert ortho.item() == pytest.approx(0.0, abs=1e-12)


def test_action_loss_identity_predictor(identity_predictor):
    rng = np.random.default_rng(21)
    state = rand_state()
    emb = rng.normal(size=(5, 5))
    val = action_loss((Tensor(emb), 3), (Tensor(emb.copy()), 3), state, "cosine")
    assert val.item() == pytest.approx(-1.0, abs=1e-6)


def test_sequence_loss_symmetry_bit_exact():
    rng = np.random.default_rng(4)
    state = rand_state()
    a = enc_output(rng.normal(size=(7, 5)))
    b = enc_output(rng.normal(size=(7, 5)))
    for kind in ("cosine", "mse", "kl"):
        l1 = sequence_loss(a, b, state, kind).item()
        l2 = sequence_loss(b, a, state, kind).item()
        assert l1 == l2  # IEEE addition commutes, so equality is exact


def test_sequence_loss_unequal_frames_rejected():
    state = rand_state()
    with pytest.raises(ValueError):
        sequence_loss(enc_output(np.zeros((4, 5))), enc_output(np.zeros((5, 5))), state)


def test_sequence_loss_pooling_path():
    rng = np.random.default_rng(5)
    state = rand_state()
    a, b = enc_output(rng.normal(size=(10, 5))), enc_output(rng.normal(size=(10, 5)))
    full = sequence_loss(a, b, state, "cosine").item()
    pooled = sequence_loss(a, b, state, "cosine", pool_len=4).item()
    capped = sequence_loss(a, b, state, "cosine", pool_len=99).item()
    assert np.isfinite(pooled) and pooled != full
    assert capped == pytest.approx(full, abs=1e-12)  # pool length clamps to T


def test_cosine_losses_bounded():
    rng = np.random.default_rng(6)
    state = rand_state()
    for _ in range(25):
        a = enc_output(rng.normal(size=(6, 5)))
        b = enc_output(rng.normal(size=(6, 5)))
        val = sequence_loss(a, b, state, "cosine").item()
        assert -1.0 <= val <= 1.0


def test_cosine_scale_invariance(identity_predictor):
    rng = np.random.default_rng(7)
    state = rand_state()
    for _ in range(20):
        p = Tensor(rng.normal(size=(6, 5)))
        z = Tensor(rng.normal(size=(6, 5)))
        base_sim = framewise_similarity(p, z, "cosine").item()
        for s in (3.0, 37.0, 1e3):
            assert abs(framewise_similarity(Tensor(s * p.data), z,
                                            "cosine").item() - base_sim) <= 1e-9
            assert abs(framewise_similarity(p, Tensor(s * z.data),
                                            "cosine").item() - base_sim) <= 1e-9
        base_loss = sequence_loss(enc_output(p), enc_output(z), state, "cosine").item()
        scaled = sequence_loss(enc_output(37.0 * p.data), enc_output(z), state,
                               "cosine").item()
        assert abs(base_loss - scaled) <= 1e-9


def test_sequence_loss_stop_gradient_contract(monkeypatch):
    rng = np.random.default_rng(8)
    state = rand_state()
    # constant predictor isolates the target branch: the z tensors can then
    # reach the loss only as similarity targets
    const = Tensor(rng.normal(size=(6, 5)))
    monkeypatch.setattr("viewseg.losses.predictor_forward", lambda z, s: const)
    z_q = Tensor(rng.normal(size=(6, 5)), requires_grad=True)
    z_r = Tensor(rng.normal(size=(6, 5)), requires_grad=True)
    with Tape():
        loss = sequence_loss(enc_output(z_q), enc_output(z_r), state,
                             "cosine", stop_grad=True)
        anchor = ad.scalar_mul(ad.add(ad.sum_(z_q), ad.sum_(z_r)), 0.0)
        backward(ad.add(loss, anchor))
    assert np.array_equal(z_q.grad_array(), np.zeros((6, 5)))
    assert np.array_equal(z_r.grad_array(), np.zeros((6, 5)))

    z_q2 = Tensor(z_q.data, requires_grad=True)
    z_r2 = Tensor(z_r.data, requires_grad=True)
    with Tape():
        loss = sequence_loss(enc_output(z_q2), enc_output(z_r2), state,
                             "cosine", stop_grad=False)
        backward(loss)
    assert np.abs(z_q2.grad_array()).max() > 0
    assert np.abs(z_r2.grad_array()).max() > 0


def test_sequence_loss_real_predictor_gradients():
    # trainer-level contract: predictor params always receive gradient; the
    # z tensors still receive gradient through their own predictor branch
    rng = np.random.default_rng(17)
    state = rand_state()
    z_q = Tensor(rng.normal(size=(6, 5)), requires_grad=True)
    z_r = Tensor(rng.normal(size=(6, 5)), requires_grad=True)
    with Tape():
        backward(sequence_loss(enc_output(z_q), enc_output(z_r), state,
                               "cosine", stop_grad=True))
    for i in (1, 2, 3):
        assert np.abs(state.params[f"predictor.fc{i}.w"].grad_array()).max() > 0
    assert np.abs(z_q.grad_array()).max() > 0
    for p in state.params.values():
        p.zero_grad()


def test_align_linear_cases():
    a, b = align_linear(4, 4)
    assert np.array_equal(a, [0, 1, 2, 3]) and np.array_equal(b, [0, 1, 2, 3])
    a, b = align_linear(6, 3)
    assert np.array_equal(a, [0, 2, 4]) and np.array_equal(b, [0, 1, 2])
    a, b = align_linear(5, 2)
    assert np.array_equal(a, [0, 2]) and np.array_equal(b, [0, 1])
    with pytest.raises(ValueError):
        align_linear(0, 3)


def test_align_linear_strictly_increasing_in_range():
    rng = np.random.default_rng(9)
    for _ in range(50):
        ta, tb = int(rng.integers(1, 60)), int(rng.integers(1, 60))
        ia, ib = align_linear(ta, tb)
        assert len(ia) == len(ib) == min(ta, tb)
        for idx, t in ((ia, ta), (ib, tb)):
            assert np.all(np.diff(idx) > 0) or len(idx) == 1
            assert idx.min() >= 0 and idx.max() < t


def test_action_loss_label_mismatch():
    state = rand_state()
    e = Tensor(np.ones((3, 5)))
    with pytest.raises(ValueError):
        action_loss((e, 0), (e, 1), state)


def test_action_loss_swap_symmetry():
    rng = np.random.default_rng(10)
    state = rand_state()
    a = Tensor(rng.normal(size=(6, 5)))
    b = Tensor(rng.normal(size=(4, 5)))
    l1 = action_loss((a, 2), (b, 2), state).item()
    l2 = action_loss((b, 2), (a, 2), state).item()
    assert l1 == pytest.approx(l2, abs=1e-12)


def test_action_loss_uses_only_aligned_frames():
    # lengths (6, 3): only long-side rows {0, 2, 4} participate
    rng = np.random.default_rng(11)
    state = rand_state()
    a = rng.normal(size=(6, 5))
    b = Tensor(rng.normal(size=(3, 5)))
    base = action_loss((Tensor(a), 1), (b, 1), state).item()
    untouched = a.copy()
    untouched[1] += 10.0
    untouched[3] -= 5.0
    untouched[5] += 2.0
    assert action_loss((Tensor(untouched), 1), (b, 1), state).item() == base
    touched = a.copy()
    touched[2] += 1.0
    assert action_loss((Tensor(touched), 1), (b, 1), state).item() != base


def test_tas_uniform_logits():
    w = LossWeights()
    T, C = 6, 4
    logits = [Tensor(np.zeros((T, C))), Tensor(np.zeros((T, C)))]
    labels = np.zeros(T, dtype=int)
    val = tas_loss(logits, labels, w).item()
    assert val == pytest.approx(2 * math.log(C), abs=1e-12)


def test_tas_constant_logits_zero_smoothing():
    w = LossWeights()
    row = np.array([1.5, -0.5, 3.0])
    logits = [Tensor(np.tile(row, (5, 1)))]
    labels = np.array([2, 2, 2, 2, 2])
    with_smooth = tas_loss(logits, labels, w).item()
    no_smooth = tas_loss(logits, labels, LossWeights(smooth_weight=0.0)).item()
    assert with_smooth == pytest.approx(no_smooth, abs=1e-12)


def test_tas_hand_example():
    # logits [[2,0],[0,2]], labels [0,1]: CE = ln(1 + e^-2); log-prob deltas
    # are +-2 per class, clamped at 4, squared -> smoothing mean = 4
    w = LossWeights(smooth_weight=0.15, smooth_clamp=4.0)
    logits = [Tensor(np.array([[2.0, 0.0], [0.0, 2.0]]))]
    labels = np.array([0, 1])
    ce = math.log(1.0 + math.exp(-2.0))
    assert ce == pytest.approx(0.126928, abs=1e-6)
    expected = ce + 0.15 * 4.0
    assert tas_loss(logits, labels, w).item() == pytest.approx(expected, abs=1e-12)


def test_tas_smoothing_nonzero_for_varying_logits():
    w = LossWeights(smooth_weight=1.0)
    logits = [Tensor(np.array([[2.0, 0.0], [0.0, 2.0]]))]
    labels = np.array([0, 1])
    varying = tas_loss(logits, labels, w).item()
    plain = tas_loss(logits, labels, LossWeights(smooth_weight=0.0)).item()
    assert varying > plain


def test_tas_label_out_of_range():
    w = LossWeights()
    with pytest.raises(ValueError):
        tas_loss([Tensor(np.zeros((3, 2)))], np.array([0, 2, 1]), w)


def test_tas_clamp_truncates_large_jumps():
    w = LossWeights(smooth_weight=1.0, smooth_clamp=4.0)
    logits = [Tensor(np.array([[30.0, 0.0], [0.0, 30.0]]))]
    labels = np.array([0, 1])
    val = tas_loss(logits, labels, w).item()
    ce = tas_loss(logits, labels, LossWeights(smooth_weight=0.0)).item()
    assert val - ce == pytest.approx(16.0, abs=1e-9)  # clamp^2


def test_total_loss_reduction_and_arithmetic():
    w0 = LossWeights(lam=0.0, beta=0.0)
    tas_terms = [Tensor(np.asarray(1.25)), Tensor(np.asarray(0.75))]
    assert total_loss(tas_terms, Tensor(np.asarray(-1.0)), Tensor(np.asarray(-1.0)),
                      w0).item() == 2.0
    w = LossWeights(lam=0.5, beta=0.2)
    val = total_loss([Tensor(np.asarray(2.0))], Tensor(np.asarray(-1.0)),
                     Tensor(np.asarray(-1.0)), w).item()
    assert val == pytest.approx(1.3, abs=1e-12)


def test_adversarial_uniform_head():
    M, T, D = 3, 5, 4
    z = Tensor(np.random.default_rng(12).normal(size=(T, D)))
    head = (Tensor(np.zeros((D, M))), Tensor(np.zeros(M)))
    assert adversarial_view_loss(z, 1, head).item() == pytest.approx(math.log(M), abs=1e-12)
    with pytest.raises(ValueError):
        adversarial_view_loss(z, 3, head)


def test_adversarial_reverses_encoder_gradient():
    rng = np.random.default_rng(13)
    T, D, M = 4, 3, 2
    w = Tensor(rng.normal(size=(D, M)))
    b = Tensor(rng.normal(size=M))

    z_rev = Tensor(rng.normal(size=(T, D)), requires_grad=True)
    with Tape():
        backward(adversarial_view_loss(z_rev, 0, (w, b)))

    z_plain = Tensor(z_rev.data, requires_grad=True)
    onehot = np.zeros((T, M))
    onehot[:, 0] = 1.0
    with Tape():
        logits = ad.add(ad.matmul(z_plain, w), b)
        ce = ad.neg(ad.scalar_mul(ad.sum_(ad.mul(ad.log_softmax(logits), Tensor(onehot))),
                                  1.0 / T))
        backward(ce)
    assert np.allclose(z_rev.grad, -z_plain.grad, atol=1e-14)


def nce_oracle(entries, tau):
    vs = [v / np.linalg.norm(v) for _, _, v in entries]
    losses = []
    for i, (seq_i, view_i, _) in enumerate(entries):
        pos = [j for j, (s, v, _) in enumerate(entries)
               if j != i and s == seq_i and v != view_i]
        if not pos:
            continue
        num = sum(math.exp(float(vs[i] @ vs[j]) / tau) for j in pos)
        den = sum(math.exp(float(vs[i] @ vs[j]) / tau)
                  for j in range(len(entries)) if j != i)
        losses.append(-math.log(num / den))
    return sum(losses) / len(losses)


def test_contrastive_single_positive_pair():
    v = np.array([0.3, -0.4, 0.5])
    entries = [(0, 0, Tensor(v)), (0, 1, Tensor(v.copy()))]
    assert contrastive_loss(entries, 1.0).item() == pytest.approx(0.0, abs=1e-9)


def test_contrastive_matches_bruteforce():
    rng = np.random.default_rng(14)
    raw = [(0, 0), (0, 1), (1, 0), (1, 1)]
    for _ in range(10):
        entries = [(s, v, Tensor(rng.normal(size=5))) for s, v in raw]
        got = contrastive_loss(entries, 0.3).item()
        want = nce_oracle([(s, v, t.data) for s, v, t in entries], 0.3)
        assert got == pytest.approx(want, abs=1e-10)


def test_contrastive_scale_invariant():
    rng = np.random.default_rng(15)
    raw = [(0, 0), (0, 1), (1, 0), (1, 1)]
    vecs = [rng.normal(size=4) for _ in raw]
    base = contrastive_loss([(s, v, Tensor(x)) for (s, v), x in zip(raw, vecs)], 0.5).item()
    scaled = contrastive_loss([(s, v, Tensor(3.0 * x)) for (s, v), x in zip(raw, vecs)],
                              0.5).item()
    assert abs(base - scaled) <= 1e-9


def test_contrastive_anchor_exclusion_and_errors():
    rng = np.random.default_rng(16)
    # entry 2 has no positive (unique sequence): excluded, not fatal
    entries = [(0, 0, Tensor(rng.normal(size=3))),
               (0, 1, Tensor(rng.normal(size=3))),
               (7, 0, Tensor(rng.normal(size=3)))]
    val = contrastive_loss(entries, 0.5).item()
    want = nce_oracle([(s, v, t.data) for s, v, t in entries], 0.5)
    assert val == pytest.approx(want, abs=1e-10)
    with pytest.raises(ValueError):
        contrastive_loss([(0, 0, Tensor(np.ones(3))), (1, 1, Tensor(np.ones(3)))], 0.5)
    with pytest.raises(ValueError):
        contrastive_loss([(0, 0, Tensor(np.ones(3)))], 0.5)
