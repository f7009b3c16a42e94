import math
import warnings

import numpy as np
import pytest

from mtuda import losses as L
from mtuda import nets
from mtuda import tensor as tc
from mtuda.tensor import IGNORE, LOG_FLOOR, Tensor, parameter


def random_probs(rng, shape, sharp=1.0):
    z = rng.standard_normal(shape) * sharp
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


# independent scalar-loop oracles ------------------------------------------


def seg_loss_oracle(p, lab):
    tot, cnt = 0.0, 0
    n, c, h, w = p.shape
    for a in range(n):
        for i in range(h):
            for j in range(w):
                y = int(lab[a, i, j])
                if y == IGNORE:
                    continue
                tot += -math.log(max(p[a, y, i, j], LOG_FLOOR))
                cnt += 1
    return tot / cnt


def bce_oracle(z, label):
    vals = []
    for v in np.ravel(z):
        # -log sigmoid(v) for label 1, -log(1 - sigmoid(v)) for label 0, both stable
        s = -v if label == 1 else v
        vals.append(max(s, 0.0) + math.log1p(math.exp(-abs(s))))
    return sum(vals) / len(vals)


def kl_oracle(t, s):
    tot = 0.0
    for a, b in zip(np.ravel(t), np.ravel(s)):
        if a > 0:
            tot += a * (math.log(a) - math.log(max(b, LOG_FLOOR)))
    return tot / t.shape[0]


def selfinfo_oracle(p):
    return np.vectorize(lambda v: 0.0 if v == 0 else -v * math.log(v))(p)


# examples ---------------------------------------------------------------


def test_self_information_examples():
    p = np.zeros((1, 7, 2, 2))
    p[:, 3] = 1.0
    assert np.all(L.self_information_map(p).data == 0.0)
    assert abs(L.self_information_map(np.array([1 / math.e])).data[0] - 1 / math.e) < 1e-15
    u = L.self_information_map(np.full((1, 7, 1, 1), 1 / 7)).data
    np.testing.assert_allclose(u, math.log(7) / 7, rtol=1e-14)
    assert round(float(u.ravel()[0]), 4) == 0.2780


def test_seg_loss_examples():
    lab = np.array([[[0, 1], [2, 3]]])
    onehot = np.eye(7)[lab].transpose(0, 3, 1, 2)
    assert L.seg_loss(onehot, lab).item() == 0.0
    assert abs(L.seg_loss(np.full((1, 7, 2, 2), 1 / 7), lab).item() - math.log(7)) < 1e-12


def test_seg_loss_half_ignored_equals_subset():
    rng = np.random.default_rng(0)
    p = random_probs(rng, (2, 7, 4, 4))
    lab = rng.integers(0, 7, size=(2, 4, 4))
    masked = lab.copy()
    masked[:, :2] = IGNORE
    assert abs(L.seg_loss(p, masked).item() - L.seg_loss(p[:, :, 2:], lab[:, 2:]).item()) < 1e-14


def test_seg_loss_all_ignored_warns_and_is_zero():
    with pytest.warns(L.EmptySelectionWarning):
        v = L.seg_loss(np.full((1, 7, 2, 2), 1 / 7), np.full((1, 2, 2), IGNORE))
    assert v.item() == 0.0 and not v.requires_grad


def test_bce_examples():
    assert abs(L.bce_logits(np.zeros((1, 1, 2, 2)), 1).item() - math.log(2)) < 1e-15
    hi = L.bce_logits(np.full((1, 1, 1, 1), 20.0), 1).item()
    lo = L.bce_logits(np.full((1, 1, 1, 1), -20.0), 0).item()
    assert abs(hi - 2.06e-9) < 1e-11 and hi == lo
    with pytest.raises(ValueError):
        L.bce_logits(np.zeros(1), 2)


def _const_disc(value):
    d = nets.init_params(nets.discriminator_arch(), 0)
    for w, b in d.layers:
        w.data[...] = 0.0
    d.layers[-1][1].data[...] = value
    return d


def test_disc_loss_examples():
    q = np.random.default_rng(0).random((2, 7, 16, 16))
    assert abs(L.disc_loss_single(_const_disc(0.0), q, q).item() - 2 * math.log(2)) < 1e-14
    d = nets.init_params(nets.discriminator_arch(), 4)
    qs, qt = q, np.random.default_rng(1).random((2, 7, 16, 16))
    expect = L.bce_logits(nets.discriminator_forward(d, Tensor(qs)), 1).item() + L.bce_logits(
        nets.discriminator_forward(d, Tensor(qt)), 0
    ).item()
    assert L.disc_loss_single(d, qs, qt).item() == expect


def test_disc_loss_perfect_discrimination_near_zero():
    # a discriminator whose logit is +20 on the source map and -20 on the target map
    d = nets.init_params(nets.discriminator_arch(widths=[1], stride=1, kernel=1), 0)
    w, b = d.layers[0]
    w.data[...] = 0.0
    w.data[0, 0] = 40.0
    b.data[...] = -20.0
    qs = np.zeros((1, 7, 4, 4))
    qs[:, 0] = 1.0
    assert L.disc_loss_single(d, qs, np.zeros((1, 7, 4, 4))).item() < 1e-8


def test_multidis_at_logit_zero():
    d = _const_disc(0.0)
    bank = nets.DiscriminatorBank({1: d, 2: d}, {1: d, 2: d})
    rng = np.random.default_rng(0)
    qs = [rng.random((2, 7, 16, 16)) for _ in range(3)]
    out = L.multidis_disc_losses(bank, qs[0], qs[1:])
    assert abs(out["L_Dst"].item() - 2 * math.log(2)) < 1e-14
    assert abs(out["L_Dt"].item() - 2 * math.log(2)) < 1e-14


def test_multidis_t1_target_target_undefined():
    d = _const_disc(0.0)
    bank = nets.DiscriminatorBank({1: d}, {})
    q = np.zeros((1, 7, 16, 16))
    with pytest.warns(L.EmptySelectionWarning):
        out = L.multidis_disc_losses(bank, q, [q])
    assert out["L_Dt"].item() == 0.0


def test_union_batch_for_t2():
    d = nets.init_params(nets.discriminator_arch(), 1)
    bank = nets.DiscriminatorBank({1: d, 2: d}, {1: d, 2: d})
    rng = np.random.default_rng(3)
    qs = [Tensor(rng.random((2, 7, 16, 16))) for _ in range(3)]
    seen = []
    L.multidis_disc_losses(bank, qs[0], qs[1:], hook=lambda *a: seen.append(a))
    class0 = {n: (dom, batch) for kind, n, label, dom, batch in seen if label == 0}
    assert class0[1][0] == [2] and np.array_equal(class0[1][1].data, qs[2].data)


def test_union_batch_equal_sample_weight_t3():
    # hand-assembled oracle: the 1-vs-all term of D^t_2 averages over the 2 + 3 pooled samples
    d = nets.init_params(nets.discriminator_arch(), 2)
    bank = nets.DiscriminatorBank({n: d for n in (1, 2, 3)}, {n: d for n in (1, 2, 3)})
    rng = np.random.default_rng(4)
    q = [Tensor(rng.random((b, 7, 16, 16))) for b in (2, 2, 2, 3)]
    out = L.multidis_disc_losses(bank, q[0], q[1:])
    terms = []
    for n in range(3):
        own = L.bce_logits(nets.discriminator_forward(d, q[n + 1]), 1).item()
        rest = [q[k + 1] for k in range(3) if k != n]
        per_sample = np.concatenate(
            [np.mean(np.logaddexp(0, nets.discriminator_forward(d, r).data), axis=(1, 2, 3)) for r in rest]
        )
        terms.append(own + per_sample.mean())
    assert abs(out["L_Dt"].item() - np.mean(terms)) < 1e-12


def test_kl_examples():
    t = np.array([0.8, 0.2]).reshape(1, 2, 1, 1)
    s = np.array([0.5, 0.5]).reshape(1, 2, 1, 1)
    v = L.kl_distill_loss(t, s).item()
    assert abs(v - (0.8 * math.log(1.6) + 0.2 * math.log(0.4))) < 1e-15
    assert round(v, 5) == 0.19274
    p = random_probs(np.random.default_rng(0), (2, 7, 3, 3))
    assert abs(L.kl_distill_loss(p, p).item()) < 1e-12


def test_kl_zero_teacher_entries():
    t = np.array([1.0, 0.0]).reshape(1, 2, 1, 1)
    s = np.array([0.25, 0.75]).reshape(1, 2, 1, 1)
    assert abs(L.kl_distill_loss(t, s).item() - math.log(4)) < 1e-14


def test_kl_mask_all_true_is_noop():
    rng = np.random.default_rng(5)
    t, s = random_probs(rng, (2, 7, 4, 4)), random_probs(rng, (2, 7, 4, 4))
    a = L.kl_distill_loss(t, s).item()
    b = L.kl_distill_loss(t, s, np.ones((2, 4, 4), dtype=bool)).item()
    assert a == b


def test_agnostic_loss_mean_over_domains():
    rng = np.random.default_rng(6)
    t1, s1, t2, s2 = (random_probs(rng, (1, 7, 3, 3)) for _ in range(4))
    a, b = L.kl_distill_loss(t1, s1).item(), L.kl_distill_loss(t2, s2).item()
    assert L.mtkt_agnostic_loss({1: t1}, {1: s1}).item() == a
    assert abs(L.mtkt_agnostic_loss({1: t1, 2: t2}, {1: s1, 2: s2}).item() - (a + b) / 2) < 1e-15
    assert abs(L.mtkt_agnostic_loss({1: s1, 2: s2}, {1: s1, 2: s2}).item()) < 1e-12


# oracles over >= 100 random instances --------------------------------------


@pytest.mark.parametrize("kind", ["seg", "bce", "kl", "selfinfo"])
def test_loss_oracles_random(kind):
    rng = np.random.default_rng({"seg": 1, "bce": 2, "kl": 3, "selfinfo": 4}[kind])
    for _ in range(100):
        n, c, h, w = (int(v) for v in rng.integers(1, 4, size=4))
        c += 1
        if kind == "seg":
            p = random_probs(rng, (n, c, h, w), sharp=3)
            lab = rng.integers(0, c, size=(n, h, w))
            lab[rng.random(lab.shape) < 0.3] = IGNORE
            lab.flat[0] = 0
            assert abs(L.seg_loss(p, lab).item() - seg_loss_oracle(p, lab)) < 1e-10
        elif kind == "bce":
            z = rng.standard_normal((n, 1, h, w)) * 10
            for label in (0, 1):
                assert abs(L.bce_logits(z, label).item() - bce_oracle(z, label)) < 1e-10
        elif kind == "kl":
            t = random_probs(rng, (n, c, h, w), sharp=3)
            t[rng.random(t.shape) < 0.1] = 0.0
            s = random_probs(rng, (n, c, h, w), sharp=3)
            v = L.kl_distill_loss(t, s).item()
            assert abs(v - kl_oracle(t, s)) < 1e-10
            # Gibbs: with the teacher renormalized KL is non-negative
            tn = t / np.maximum(t.sum(axis=1, keepdims=True), 1e-300)
            tn = np.where(t.sum(axis=1, keepdims=True) == 0, s, tn)
            assert L.kl_distill_loss(tn, s).item() >= -1e-12
            assert abs(L.kl_distill_loss(s, s).item()) < 1e-12
        else:
            p = rng.random((n, c, h, w))
            p[rng.random(p.shape) < 0.1] = 0.0
            np.testing.assert_allclose(L.self_information_map(p).data, selfinfo_oracle(p), rtol=0, atol=1e-10)


# gradient partition ---------------------------------------------------------


def _setup(rng, T=2):
    seg = nets.init_params(nets.segmenter_arch(heads=nets.mtkt_heads(T)), 1)
    darch = nets.discriminator_arch()
    bank = nets.DiscriminatorBank(
        {n: nets.init_params(darch, 10 + n) for n in range(1, T + 1)},
        {n: nets.init_params(darch, 20 + n) for n in range(1, T + 1)},
    )
    xs = Tensor(rng.random((2, 3, 32, 32)))
    xts = [Tensor(rng.random((2, 3, 32, 32))) for _ in range(T)]
    ys = rng.integers(0, 7, size=(2, 32, 32))
    return seg, bank, xs, xts, ys


def _zero(params):
    for p in params:
        p.grad = None


@pytest.mark.parametrize("rep", list(L.Representation))
def test_segmenter_losses_leave_discriminators_untouched(rep):
    rng = np.random.default_rng(7)
    seg, bank, xs, xts, ys = _setup(rng)
    ps = nets.segmenter_forward(seg, xs, "spec_1").probs
    qts = [L.represent(nets.segmenter_forward(seg, x, "spec_1").probs, rep) for x in xts]
    _zero(seg.parameters() + bank.parameters())
    with L.frozen(bank.parameters()):
        total, _ = L.multidis_total_segmenter_loss(ps, ys, qts, bank, L.AdvWeights(1.0, 1.0, 1.0))
        total.backward()
    assert all(p.grad is None for p in bank.parameters())
    assert np.any(seg.feat[0][0].grad != 0)
    assert all(p.requires_grad for p in bank.parameters())


def test_adv_fool_loss_touches_theta_only():
    rng = np.random.default_rng(8)
    seg, bank, xs, xts, ys = _setup(rng)
    d = bank.source_target[1]
    q = L.represent(nets.segmenter_forward(seg, xts[0], "spec_1").probs, L.Representation.SELF_INFORMATION)
    _zero(seg.parameters() + bank.parameters())
    with L.frozen(d.parameters()):
        v = L.adv_fool_loss(d, q)
        v.backward()
    assert v.item() == L.bce_logits(nets.discriminator_forward(d, q.detach()), 1).item()
    assert all(p.grad is None for p in d.parameters())
    assert np.any(seg.feat[1][0].grad != 0)


def test_discriminator_losses_leave_segmenter_untouched():
    rng = np.random.default_rng(9)
    seg, bank, xs, xts, ys = _setup(rng)
    qs = nets.segmenter_forward(seg, xs, "spec_1").probs
    qts = [nets.segmenter_forward(seg, x, "spec_1").probs for x in xts]
    _zero(seg.parameters() + bank.parameters())
    out = L.multidis_disc_losses(bank, qs, qts)
    (out["L_Dst"] + out["L_Dt"]).backward()
    assert all(p.grad is None for p in seg.parameters())
    assert all(p.grad is not None for p in bank.parameters())


def test_agnostic_loss_gradient_partition():
    rng = np.random.default_rng(10)
    seg, bank, xs, xts, ys = _setup(rng)
    teachers, students = {}, {}
    for n, x in enumerate(xts):
        f = nets.features(seg, x)
        teachers[n] = nets.head_forward(seg, f, f"spec_{n + 1}", (32, 32)).probs
        students[n] = nets.head_forward(seg, f, "agn", (32, 32)).probs
    _zero(seg.parameters())
    loss = L.mtkt_agnostic_loss(teachers, students)
    assert loss.item() > 0
    loss.backward()
    for n in (1, 2):
        assert all(p.grad is None for p in seg.head_parameters(f"spec_{n}"))
    assert all(np.any(p.grad != 0) for p in seg.head_parameters("agn"))
    assert all(np.any(w.grad != 0) for w, _ in seg.feat)


# reductions and linearity -----------------------------------------------------


def test_multidis_t1_reduces_to_single_target():
    rng = np.random.default_rng(11)
    seg, bank, xs, xts, ys = _setup(rng, T=1)
    ps = nets.segmenter_forward(seg, xs, "spec_1").probs
    qt = L.represent(nets.segmenter_forward(seg, xts[0], "spec_1").probs, L.Representation.SELF_INFORMATION)
    lam = 0.0037
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        md, _ = L.multidis_total_segmenter_loss(ps, ys, [qt], bank, L.AdvWeights(lam, lam, 0.0))
    single, _ = L.single_target_segmenter_loss(ps, ys, qt, bank.source_target[1], lam)
    assert abs(md.item() - single.item()) < 1e-12


def test_multidis_linearity_in_lambda_s():
    rng = np.random.default_rng(12)
    seg, bank, xs, xts, ys = _setup(rng)
    ps = nets.segmenter_forward(seg, xs, "spec_1").probs
    qts = [nets.segmenter_forward(seg, x, "spec_1").probs for x in xts]
    a, parts = L.multidis_total_segmenter_loss(ps, ys, qts, bank, L.AdvWeights(0, 0.25, 0.5))
    b, _ = L.multidis_total_segmenter_loss(ps, ys, qts, bank, L.AdvWeights(0, 0.5, 0.5))
    rest = parts["seg"].item() + 0.5 * parts["adv_t"].item()
    assert abs((b.item() - rest) - 2 * (a.item() - rest)) < 1e-12
    zero, _ = L.multidis_total_segmenter_loss(ps, ys, qts, bank, L.AdvWeights(0, 0, 0))
    assert zero.item() == parts["seg"].item()


def test_adv_weights_must_be_non_negative():
    with pytest.raises(ValueError):
        L.AdvWeights(lambda_s=-1.0)


def test_frozen_restores_flags():
    p = parameter(np.ones(2))
    with L.frozen([p]):
        assert not p.requires_grad
    assert p.requires_grad
