"""Loss values against hand arithmetic, reduction identities, FD gradients."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rankuncert import autodiff as ad
from rankuncert import losses as L
from rankuncert import ua
from rankuncert.functional import DiagGaussian

from .test_autodiff import check_against_fd


def ctx_at(epoch, total, theta_deg=45.0):
    return L.EpochContext.from_degrees(epoch, total, theta_deg)


def random_batch(rng, b, d):
    return L.BatchFeatures(rng.normal(size=(b, d)), rng.normal(size=(b, d)))


# -- loss_cl ----------------------------------------------------------------


def test_loss_cl_single_row_is_zero():
    rng = np.random.default_rng(0)
    batch = random_batch(rng, 1, 6)
    assert float(L.loss_cl(batch).data) == 0.0


def test_loss_cl_hand_value():
    # antipodal pairs give the similarity matrix [[1,-1],[-1,1]]
    src = np.array([[1.0, 0.0], [-1.0, 0.0]])
    tgt = np.array([[1.0, 0.0], [-1.0, 0.0]])
    got = float(L.loss_cl(L.BatchFeatures(src, tgt)).data)
    want = -np.log(np.e / (np.e + np.exp(-1.0)))  # 0.12692801104297252
    assert got == pytest.approx(want, abs=1e-12)


def test_loss_cl_uniform_similarities_give_log_b():
    rng = np.random.default_rng(1)
    b, d = 4, 8
    src = rng.normal(size=(b, d))
    tgt = np.tile(rng.normal(size=d), (b, 1))  # one shared target: rows uniform
    got = float(L.loss_cl(L.BatchFeatures(src, tgt)).data)
    assert got == np.log(float(b))


@given(st.integers(2, 6), st.integers(0, 2**31 - 1))
@settings(max_examples=60, deadline=None)
def test_loss_cl_nonnegative(b, seed):
    rng = np.random.default_rng(seed)
    val = float(L.loss_cl(random_batch(rng, b, 5)).data)
    assert val >= -1e-12


def test_loss_cl_fd():
    rng = np.random.default_rng(2)
    tgt = rng.normal(size=(4, 6))
    check_against_fd(lambda x: L.loss_cl(L.BatchFeatures(x, ad.as_tensor(tgt))),
                     rng.normal(size=(4, 6)))


# -- kappa -------------------------------------------------------------------


def test_kappa_above_threshold_full_weight():
    assert L.kappa(np.cos(np.radians(30)), ctx_at(0, 100)) == 1.0


def test_kappa_below_threshold_zero():
    assert L.kappa(np.cos(np.radians(60)), ctx_at(17, 100)) == 0.0


def test_kappa_midway_gamma():
    assert L.kappa(0.9, ctx_at(50, 100)) == pytest.approx(0.5)


def test_kappa_strict_inequality_at_threshold():
    ctx = ctx_at(0, 10)
    assert L.kappa(ctx.cos_theta, ctx) == 0.0


def test_gamma_schedule_endpoints():
    assert ctx_at(0, 100).gamma == 1.0
    assert ctx_at(100, 100).gamma == 0.0
    with pytest.raises(ValueError):
        ctx_at(101, 100)


# -- loss_cs_pair -------------------------------------------------------------


def test_cs_pair_gamma_zero_equals_cl_bitwise():
    rng = np.random.default_rng(3)
    for seed in range(5):
        rng = np.random.default_rng(seed)
        batch = random_batch(rng, 6, 8)
        a = float(L.loss_cl(batch).data)
        b = float(L.loss_cs_pair(batch, ctx_at(100, 100)).data)
        assert a == b  # bit-for-bit


def test_cs_pair_threshold_one_equals_cl():
    rng = np.random.default_rng(4)
    batch = random_batch(rng, 5, 8)  # distinct rows: all sims < 1 strictly
    ctx = L.EpochContext(0, 100, cos_theta=1.0)
    assert float(L.loss_cs_pair(batch, ctx).data) == float(L.loss_cl(batch).data)


def test_cs_pair_kernel_hand_value():
    # S = [[1, .9],[.9, 1]], all four entries mined at gamma=1
    sims = ad.as_tensor(np.array([[1.0, 0.9], [0.9, 1.0]]))
    gate = np.ones((2, 2))
    got = float(L._mined_softmax_loss(sims, gate).data)
    want = -np.log((2 * np.e + np.exp(0.9)) / (np.e + np.exp(0.9)))
    assert got == pytest.approx(want, abs=1e-12)
    assert got == pytest.approx(-0.4219807624114528, abs=1e-12)
    assert got < 0  # mined diagonal makes the numerator exceed the denominator


def test_cs_pair_vector_instance_matches_hand_value():
    t1 = np.array([1.0, 0.0])
    t2 = np.array([0.9, np.sqrt(1 - 0.81)])
    batch = L.BatchFeatures(np.stack([t1, t2]), np.stack([t1, t2]))
    got = float(L.loss_cs_pair(batch, ctx_at(0, 100)).data)
    want = -np.log((2 * np.e + np.exp(0.9)) / (np.e + np.exp(0.9)))
    assert got == pytest.approx(want, abs=1e-9)


def test_cs_pair_exclude_diagonal_keeps_loss_nonnegative():
    t1 = np.array([1.0, 0.0])
    t2 = np.array([0.9, np.sqrt(1 - 0.81)])
    batch = L.BatchFeatures(np.stack([t1, t2]), np.stack([t1, t2]))
    got = float(L.loss_cs_pair(batch, ctx_at(0, 100), exclude_diagonal=True).data)
    # numerator <= denominator once the diagonal cannot be double counted
    assert got >= -1e-12


@given(st.integers(2, 5), st.integers(0, 2**31 - 1))
@settings(max_examples=60, deadline=None)
def test_monotone_mining_never_increases_loss(b, seed):
    rng = np.random.default_rng(seed)
    sims = ad.as_tensor(rng.uniform(-1, 1, size=(b, b)))
    gate = np.zeros((b, b))
    base = float(L._mined_softmax_loss(sims, gate).data)
    i, j = rng.integers(b), rng.integers(b)
    gate2 = gate.copy()
    gate2[i, j] = rng.uniform(0.0, 1.0)
    mined = float(L._mined_softmax_loss(sims, gate2).data)
    assert mined <= base + 1e-12


def test_cs_pair_fd_with_frozen_gate():
    rng = np.random.default_rng(5)
    b, d = 4, 6
    src0 = rng.normal(size=(b, d))
    tgt = ad.as_tensor(rng.normal(size=(b, d)))
    ctx = ctx_at(25, 100)
    gate = L.kappa_gate(
        L.cosine_matrix(ad.as_tensor(src0), tgt).data, ctx)

    def build(x):
        return L.loss_cs_pair(L.BatchFeatures(x, tgt), ctx, frozen_gate=gate)

    check_against_fd(build, src0)


# -- loss_cs_total ------------------------------------------------------------


def seq_of(fs):
    """FeatureSequence whose every level equals the given (B, d) matrix."""
    feats = [ad.as_tensor(f) for f in fs]
    dists = [DiagGaussian(f, ad.as_tensor(np.ones_like(f.data))) for f in feats[1:]]
    return ua.FeatureSequence(feats, dists)


def test_cs_total_n0_equals_pair():
    rng = np.random.default_rng(6)
    b, d = 4, 8
    s0, t0 = rng.normal(size=(b, d)), rng.normal(size=(b, d))
    ctx = ctx_at(10, 100)
    total = float(L.loss_cs_total(seq_of([s0]), seq_of([t0]), ctx).data)
    pair = float(L.loss_cs_pair(L.BatchFeatures(s0, t0), ctx).data)
    assert total == pair


def test_cs_total_n1_degenerate_levels_double_the_pair():
    rng = np.random.default_rng(7)
    b, d = 4, 8
    s0, t0 = rng.normal(size=(b, d)), rng.normal(size=(b, d))
    ctx = ctx_at(10, 100)
    # all levels forced equal to f0 on both sides: (n+1)^2 = 4 equal terms / 2n
    total = float(L.loss_cs_total(seq_of([s0, s0]), seq_of([t0, t0]), ctx).data)
    pair = float(L.loss_cs_pair(L.BatchFeatures(s0, t0), ctx).data)
    assert total == pytest.approx(2 * pair, rel=1e-12)


def test_cs_total_gamma0_n1_degenerate_gives_twice_cl():
    rng = np.random.default_rng(8)
    b, d = 4, 8
    s0, t0 = rng.normal(size=(b, d)), rng.normal(size=(b, d))
    ctx = ctx_at(100, 100)
    total = float(L.loss_cs_total(seq_of([s0, s0]), seq_of([t0, t0]), ctx).data)
    cl = float(L.loss_cl(L.BatchFeatures(s0, t0)).data)
    assert total == pytest.approx(2 * cl, rel=1e-12)


def test_cs_total_accepts_per_row_sequence_lists():
    rng = np.random.default_rng(9)
    b, d = 3, 6
    s0, t0 = rng.normal(size=(b, d)), rng.normal(size=(b, d))
    ctx = ctx_at(0, 100)
    rows_s = [ua.FeatureSequence([ad.as_tensor(s0[i])]) for i in range(b)]
    rows_t = [ua.FeatureSequence([ad.as_tensor(t0[i])]) for i in range(b)]
    batched = float(L.loss_cs_total(seq_of([s0]), seq_of([t0]), ctx).data)
    listed = float(L.loss_cs_total(rows_s, rows_t, ctx).data)
    assert listed == batched


def test_cs_total_mismatched_n_rejected():
    rng = np.random.default_rng(10)
    s = rng.normal(size=(2, 4))
    with pytest.raises(ValueError):
        L.loss_cs_total(seq_of([s, s]), seq_of([s]), ctx_at(0, 10))


def test_cs_total_fd_with_frozen_gates():
    rng = np.random.default_rng(11)
    b, d = 3, 6
    t0, t1 = rng.normal(size=(b, d)), rng.normal(size=(b, d))
    s1 = rng.normal(size=(b, d))
    ctx = ctx_at(40, 100)
    seq_t = seq_of([t0, t1])

    # freeze gates at the base point for both analytic and FD sides
    s0 = rng.normal(size=(b, d))
    gates = L.frozen_gates_for(seq_of([s0, s1]), seq_t, ctx)

    def build_frozen(x):
        return L.loss_cs_total(seq_of([x, ad.as_tensor(s1)]), seq_t, ctx,
                               frozen_gates=gates)

    check_against_fd(build_frozen, s0)


# -- loss_dr ------------------------------------------------------------------


def grid_from(mu, sig):
    return [DiagGaussian(ad.as_tensor(m), ad.as_tensor(s)) for m, s in zip(mu, sig)]


def test_dr_single_row_batch_is_zero():
    mu = np.random.default_rng(12).normal(size=(1, 1, 4))
    sig = np.ones((1, 1, 4))
    got = float(L.loss_dr(grid_from(mu, sig), grid_from(mu, sig)).data)
    assert got == 0.0


def test_dr_hand_value():
    # engineered distances: D(i,i)=0, D(i,j)=ln 3
    delta = np.sqrt(np.log(3.0))
    mu = np.array([[[0.0, 0.0], [delta, 0.0]]])  # one level, B=2
    sig = np.ones((1, 2, 2))
    got = float(L.loss_dr(grid_from(mu, sig), grid_from(mu, sig)).data)
    assert got == pytest.approx(np.log(4.0 / 3.0), abs=1e-12)


def test_dr_identical_distributions_give_log_b():
    b = 5
    mu = np.tile(np.array([0.3, -0.7, 1.1]), (1, b, 1))
    sig = np.full((1, b, 3), 0.8)
    got = float(L.loss_dr(grid_from(mu, sig), grid_from(mu, sig)).data)
    assert got == pytest.approx(np.log(b), abs=1e-12)


def test_dr_empty_grids_give_zero():
    assert float(L.loss_dr([], []).data) == 0.0


def test_dr_levels_average():
    rng = np.random.default_rng(13)
    b, d = 4, 3
    mus = rng.normal(size=(2, b, d))
    sigs = rng.uniform(0.2, 1.5, size=(2, b, d))
    both = float(L.loss_dr(grid_from(mus, sigs), grid_from(mus, sigs)).data)
    lvl0 = float(L.loss_dr(grid_from(mus[:1], sigs[:1]),
                           grid_from(mus[:1], sigs[:1])).data)
    lvl1 = float(L.loss_dr(grid_from(mus[1:], sigs[1:]),
                           grid_from(mus[1:], sigs[1:])).data)
    assert both == pytest.approx((lvl0 + lvl1) / 2, rel=1e-12)


@given(st.integers(2, 5), st.integers(0, 2**31 - 1))
@settings(max_examples=40, deadline=None)
def test_dr_permutation_equivariant(b, seed):
    rng = np.random.default_rng(seed)
    d = 3
    mu_s, mu_t = rng.normal(size=(1, b, d)), rng.normal(size=(1, b, d))
    sig_s = rng.uniform(0.2, 2.0, size=(1, b, d))
    sig_t = rng.uniform(0.2, 2.0, size=(1, b, d))
    base = float(L.loss_dr(grid_from(mu_s, sig_s), grid_from(mu_t, sig_t)).data)
    perm = rng.permutation(b)
    permuted = float(L.loss_dr(grid_from(mu_s[:, perm], sig_s[:, perm]),
                               grid_from(mu_t[:, perm], sig_t[:, perm])).data)
    assert permuted == pytest.approx(base, rel=1e-10)


def test_dr_fd():
    rng = np.random.default_rng(14)
    b, d = 3, 4
    mu_t = rng.normal(size=(b, d))
    sig_t = rng.uniform(0.5, 1.5, size=(b, d))
    sig_s = rng.uniform(0.5, 1.5, size=(b, d))

    def build(x):
        gs = [DiagGaussian(x, ad.as_tensor(sig_s))]
        gt = [DiagGaussian(ad.as_tensor(mu_t), ad.as_tensor(sig_t))]
        return L.loss_dr(gs, gt)

    check_against_fd(build, rng.normal(size=(b, d)))

    def build_sig(x):
        gs = [DiagGaussian(ad.as_tensor(mu_t), x)]
        gt = [DiagGaussian(ad.as_tensor(mu_t), ad.as_tensor(sig_t))]
        return L.loss_dr(gs, gt)

    check_against_fd(build_sig, sig_s)


# -- loss_total ---------------------------------------------------------------


def test_total_zero():
    assert float(L.loss_total(0.0, 0.0).data) == 0.0


def test_total_mean():
    assert float(L.loss_total(1.0, 3.0).data) == 2.0


def test_total_composes_tensors():
    tape = ad.GradientTape()
    x = tape.parameter("x", 2.0)
    total = L.loss_total(x * 3.0, x * 1.0)
    assert float(total.data) == 4.0
    assert tape.grad(total)["x"] == pytest.approx(2.0)
