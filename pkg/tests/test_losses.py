'''
Objective terms against naive-loop oracles, analytic gradients against central
finite differences, placeholder masking and hinge/threshold semantics.
'''

import math

import numpy as np
import pytest

from models import NEG_TYPES, ThresholdState
from services.encoder_service import TENSOR_NAMES, ModelParams, init_params
from services.loss_service import (
    Batch,
    HnSims,
    LossFlags,
    cmr_loss,
    forward_batch,
    imc_loss,
    itc_hn_loss,
    itc_loss,
    loss_gradients,
    total_loss,
    update_thresholds,
)

K = len(NEG_TYPES)
REL = 0


# -------------------------------------------------------------------------------------------------
# Naive oracles: plain loops over python floats, no shared code with the services
# -------------------------------------------------------------------------------------------------

def oracle_itc(S):
    B = len(S)
    total = 0.0
    for i in range(B):
        row = sum(math.exp(S[i][j]) for j in range(B))
        col = sum(math.exp(S[j][i]) for j in range(B))
        total += -(S[i][i] - math.log(row)) - (S[i][i] - math.log(col))
    return total / B


def oracle_itc_hn(S, s_hn, valid, pool, mode):
    B = len(S)
    total = 0.0
    for i in range(B):
        row = sum(math.exp(S[i][j]) for j in range(B))
        if mode == "own":
            row += sum(math.exp(s_hn[i][k]) for k in range(K) if valid[i][k])
        else:
            row += sum(math.exp(pool[i][j][k]) for j in range(B) for k in range(K) if valid[j][k])
        col = sum(math.exp(S[j][i]) for j in range(B))
        total += -(S[i][i] - math.log(row)) - (S[i][i] - math.log(col))
    return total / B


def oracle_imc(t_hn, valid):
    B = len(t_hn)
    total = 0.0
    for i in range(B):
        terms = [math.exp(t_hn[i][k]) for k in range(K) if valid[i][k]]
        if terms:
            total += math.log(sum(terms))
    return total / B


def oracle_cmr(diag, s_hn, t_hn, valid, th, include_rel):
    B = len(diag)
    total = 0.0
    for i in range(B):
        for k in range(K):
            if valid[i][k]:
                total += max(0.0, s_hn[i][k] - diag[i] + th[k])
        if include_rel and valid[i][REL]:
            total += -t_hn[i][REL]
    return total / B


def oracle_thresholds(prev, diag, s_hn, valid, u):
    out = []
    for k in range(K):
        gaps = [diag[i] - s_hn[i][k] for i in range(len(diag)) if valid[i][k]]
        if not gaps:
            out.append(prev[k])
        else:
            out.append(min(u, max(0.0, sum(gaps) / len(gaps))))
    return out


def close(a, b, rel=1e-10):
    return abs(a - b) <= rel * max(1.0, abs(b))


def random_instance(rng):
    B = int(rng.integers(1, 5))
    S = rng.uniform(-3, 3, size=(B, B))
    s_hn = rng.uniform(-3, 3, size=(B, K))
    t_hn = rng.uniform(-3, 3, size=(B, K))
    valid = rng.random((B, K)) < 0.6
    pool = rng.uniform(-3, 3, size=(B, B, K))
    pool[np.arange(B), np.arange(B)] = s_hn
    th = rng.uniform(0, 2, size=K)
    return S, HnSims(s_hn=s_hn, t_hn=t_hn, valid=valid, pool=pool), th


def hn_of(s_hn, t_hn=None, valid=None):
    s_hn = np.atleast_2d(np.asarray(s_hn, dtype=float))
    t_hn = np.zeros_like(s_hn) if t_hn is None else np.atleast_2d(np.asarray(t_hn, dtype=float))
    valid = np.ones_like(s_hn, dtype=bool) if valid is None else np.atleast_2d(np.asarray(valid, dtype=bool))
    return HnSims(s_hn=s_hn, t_hn=t_hn, valid=valid)


# -------------------------------------------------------------------------------------------------
# Worked examples
# -------------------------------------------------------------------------------------------------

def test_itc_examples():
    assert itc_loss([[0.7]]) == 0.0
    assert itc_loss([[0.0, 0.0], [0.0, 0.0]]) == pytest.approx(2 * math.log(2), abs=1e-12)
    assert itc_loss([[10.0, 0.0], [0.0, 10.0]]) == pytest.approx(2 * math.log1p(math.exp(-10)), rel=1e-9)


def test_itc_hn_examples():
    sims = np.array([[0.3]])
    assert itc_hn_loss(sims, hn_of([[0.3, 0, 0, 0]], valid=[[1, 0, 0, 0]])) == pytest.approx(math.log(2), abs=1e-12)
    masked = hn_of([[5.0, 1.0, 2.0, 3.0]], valid=[[0, 0, 0, 0]])
    assert itc_hn_loss(sims, masked) == itc_loss(sims)


def test_itc_hn_all_masked_equals_itc_exactly(rng):
    for _ in range(50):
        S, hn, _ = random_instance(rng)
        hn.valid[:] = False
        assert itc_hn_loss(S, hn, "own") == itc_loss(S)
        assert itc_hn_loss(S, hn, "batch") == itc_loss(S)


def test_imc_examples():
    hn = hn_of([[0, 0, 0, 0]], t_hn=[[0.5, 0.2, 9.9, 0.1]], valid=[[1, 1, 0, 1]])
    assert imc_loss(hn) == pytest.approx(math.log(math.exp(0.5) + math.exp(0.2) + math.exp(0.1)), abs=1e-12)
    assert imc_loss(hn_of([[0, 0, 0, 0]], t_hn=[[1, 2, 3, 4]], valid=[[0, 0, 0, 0]])) == 0.0
    assert imc_loss(hn_of([[0, 0, 0, 0]], t_hn=[[0, 0, 0.37, 0]], valid=[[0, 0, 1, 0]])) == pytest.approx(0.37, abs=1e-12)


def test_cmr_examples():
    hn = hn_of([[0.5, 0, 0, 0]], valid=[[0, 1, 0, 0]])
    hn.s_hn[0, 1] = 0.5
    diag = np.array([0.8])
    assert cmr_loss(diag, hn, ThresholdState(values=[0.2] * K), include_rel_term=False) == 0.0
    assert cmr_loss(diag, hn, ThresholdState(values=[0.4] * K), include_rel_term=False) == pytest.approx(0.1, abs=1e-12)
    boundary = hn_of([[0.8, 0.8, 0.8, 0.8]])
    assert cmr_loss(diag, boundary, ThresholdState(), include_rel_term=False) == 0.0


def test_cmr_relation_term():
    hn = hn_of([[0.0, 0, 0, 0]], t_hn=[[0.6, 0, 0, 0]], valid=[[1, 0, 0, 0]])
    assert cmr_loss(np.array([5.0]), hn, ThresholdState(), include_rel_term=True) == pytest.approx(-0.6, abs=1e-12)


def test_update_threshold_examples():
    prev = ThresholdState(values=[0.3, 0.0, 0.7, 0.0], step=4)
    diag = np.array([1.0, 1.0])
    s_hn = np.array([[0.5, 0, 0, -11.3], [0.3, 0, 0, -11.3]])
    valid = np.array([[1, 0, 0, 1], [1, 0, 0, 1]], dtype=bool)
    nxt = update_thresholds(prev, diag, HnSims(s_hn=s_hn, t_hn=np.zeros_like(s_hn), valid=valid), u=10.0)
    assert nxt.values[0] == pytest.approx(0.6, abs=1e-12)
    assert nxt.values[1] == 0.0
    assert nxt.values[2] == 0.7
    assert nxt.values[3] == 10.0
    assert nxt.step == 5


def test_negative_gaps_clamp_to_zero():
    hn = hn_of([[2.0, 2.0, 2.0, 2.0]])
    assert update_thresholds(ThresholdState(), np.array([1.0]), hn, u=10.0).values == [0.0] * K


def test_threshold_initialisation():
    assert ThresholdState().values == [0.0] * K
    assert ThresholdState().step == 0


def test_total_loss_composition(rng):
    S, hn, th = random_instance(rng)
    state = ThresholdState(values=th.tolist())
    flags = LossFlags()
    zero = total_loss(S, hn, state, 0.0, 0.0, flags)
    assert zero.total == zero.itc_hn == itc_hn_loss(S, hn)
    full = total_loss(S, hn, state, 0.2, 0.4, flags)
    assert abs(full.total - (full.itc_hn + 0.2 * full.imc + 0.4 * full.cmr)) <= 1e-12
    assert full.cmr == pytest.approx(full.cmr_hinge + full.cmr_rel, abs=1e-15)
    assert total_loss(S, hn, state, 0.2, 0.4, LossFlags(use_hn=False)).itc_hn == itc_loss(S)


# -------------------------------------------------------------------------------------------------
# Oracle equivalence
# -------------------------------------------------------------------------------------------------

def test_losses_match_naive_oracles(rng):
    for _ in range(1000):
        S, hn, th = random_instance(rng)
        Sl, s_l, t_l, v_l, p_l = S.tolist(), hn.s_hn.tolist(), hn.t_hn.tolist(), hn.valid.tolist(), hn.pool.tolist()
        diag = np.diag(S)
        state = ThresholdState(values=th.tolist())
        assert close(itc_loss(S), oracle_itc(Sl))
        assert close(itc_hn_loss(S, hn, "own"), oracle_itc_hn(Sl, s_l, v_l, p_l, "own"))
        assert close(itc_hn_loss(S, hn, "batch"), oracle_itc_hn(Sl, s_l, v_l, p_l, "batch"))
        assert close(imc_loss(hn), oracle_imc(t_l, v_l))
        for include_rel in (True, False):
            assert close(cmr_loss(diag, hn, state, include_rel), oracle_cmr(diag.tolist(), s_l, t_l, v_l, th.tolist(), include_rel))
        u = float(rng.choice([0.5, 10.0, math.inf]))
        got = update_thresholds(state, diag, hn, u).values
        want = oracle_thresholds(th.tolist(), diag.tolist(), s_l, v_l, u)
        assert all(close(g, w) for g, w in zip(got, want))


# -------------------------------------------------------------------------------------------------
# Masking, monotonicity, bounds
# -------------------------------------------------------------------------------------------------

def test_masked_entries_never_change_losses(rng):
    for _ in range(100):
        S, hn, th = random_instance(rng)
        state = ThresholdState(values=th.tolist())
        B = S.shape[0]
        noisy = HnSims(s_hn=hn.s_hn.copy(), t_hn=hn.t_hn.copy(), valid=hn.valid.copy(), pool=hn.pool.copy())
        masked = ~hn.valid
        noisy.s_hn[masked] = rng.uniform(-50, 50, size=int(masked.sum()))
        noisy.t_hn[masked] = rng.uniform(-50, 50, size=int(masked.sum()))
        for i in range(B):
            noisy.pool[i][masked] = rng.uniform(-50, 50, size=int(masked.sum()))
        noisy.pool[np.arange(B), np.arange(B)] = noisy.s_hn
        diag = np.diag(S)
        for mode in ("own", "batch"):
            assert itc_hn_loss(S, noisy, mode) == itc_hn_loss(S, hn, mode)
        assert imc_loss(noisy) == imc_loss(hn)
        assert cmr_loss(diag, noisy, state, True) == cmr_loss(diag, hn, state, True)
        assert update_thresholds(state, diag, noisy, 10.0).values == update_thresholds(state, diag, hn, 10.0).values


def test_itc_hn_nondecreasing_in_valid_hard_negative(rng):
    for _ in range(100):
        S, hn, _ = random_instance(rng)
        if not hn.valid.any():
            continue
        i, k = np.argwhere(hn.valid)[0]
        bumped = HnSims(s_hn=hn.s_hn.copy(), t_hn=hn.t_hn, valid=hn.valid, pool=hn.pool.copy())
        bumped.s_hn[i, k] += 0.5
        bumped.pool[i, i, k] += 0.5
        assert itc_hn_loss(S, bumped) >= itc_hn_loss(S, hn)


def test_adding_a_valid_hard_negative_never_decreases_itc(rng):
    for _ in range(100):
        S, hn, _ = random_instance(rng)
        hn.valid[:] = False
        before = itc_hn_loss(S, hn)
        hn.valid[0, 1] = True
        assert itc_hn_loss(S, hn) >= before


def test_cmr_nondecreasing_in_threshold(rng):
    for _ in range(100):
        S, hn, th = random_instance(rng)
        diag = np.diag(S)
        k = int(rng.integers(K))
        higher = th.copy()
        higher[k] += 0.3
        assert cmr_loss(diag, hn, ThresholdState(values=higher.tolist()), False) >= cmr_loss(diag, hn, ThresholdState(values=th.tolist()), False)


def test_thresholds_stay_within_bounds(rng):
    state = ThresholdState()
    for _ in range(200):
        S, hn, _ = random_instance(rng)
        hn.s_hn *= 10
        state = update_thresholds(state, np.diag(S) * 10, hn, u=10.0)
        assert all(0.0 <= v <= 10.0 for v in state.values)


def test_imc_is_bounded_by_cosine_range(rng):
    tau = 0.07
    for _ in range(50):
        B = int(rng.integers(1, 5))
        cos = rng.uniform(-1, 1, size=(B, K))
        hn = HnSims(s_hn=np.zeros((B, K)), t_hn=cos / tau, valid=rng.random((B, K)) < 0.7)
        assert abs(imc_loss(hn)) <= 1 / tau + math.log(4) + 1e-12


# -------------------------------------------------------------------------------------------------
# Gradients
# -------------------------------------------------------------------------------------------------

V, D_E, D, D_X = 7, 3, 4, 5


def random_batch(rng, B):
    valid = rng.random((B, K)) < 0.7

    def ids():
        return rng.integers(0, V, size=int(rng.integers(1, 4)))

    return Batch(
        batch_id="fd",
        record_ids=[str(i) for i in range(B)],
        features=rng.normal(size=(B, D_X)),
        pos_ids=[ids() for _ in range(B)],
        neg_ids=[[ids() if valid[i, k] else None for k in range(K)] for i in range(B)],
        valid=valid,
    )


def objective(params, batch, th, alpha, beta, flags):
    fwd = forward_batch(params, batch)
    return total_loss(fwd.sims, fwd.hn, th, alpha, beta, flags).total


def random_params(rng):
    return ModelParams(
        E=rng.normal(size=(V, D_E)),
        W_t=rng.normal(size=(D, D_E)),
        b_t=0.5 * rng.normal(size=D),
        W_i=rng.normal(size=(D, D_X)),
        b_i=0.5 * rng.normal(size=D),
        log_tau=np.array(rng.uniform(math.log(0.1), math.log(1.0))),
    )


def well_conditioned(params, batch, th, gap=1e-2, min_norm=0.3):
    '''Hinge margins away from the kink and pre-normalization norms away from zero.'''
    fwd = forward_batch(params, batch)
    margins = fwd.hn.s_hn - np.diag(fwd.sims)[:, None] + np.asarray(th.values)[None, :]
    if np.any(fwd.hn.valid & (np.abs(margins) < gap)):
        return False
    encoded = [fwd.img, fwd.pos] + ([fwd.neg] if fwd.neg is not None else [])
    return all(np.min(enc.norms) >= min_norm for enc in encoded)


def test_gradients_match_finite_differences(rng):
    checked = 0
    h = 1e-5
    while checked < 100:
        params = random_params(rng)
        batch = random_batch(rng, int(rng.integers(2, 5)))
        th = ThresholdState(values=rng.uniform(0, 3, size=K).tolist())
        flags = LossFlags(
            use_hn=bool(rng.random() < 0.8),
            hn_pool=str(rng.choice(["own", "batch"])),
            include_rel_term=bool(rng.random() < 0.5),
        )
        alpha, beta = float(rng.uniform(0, 1)), float(rng.uniform(0, 1))
        if not well_conditioned(params, batch, th):
            continue

        _, grads, _ = loss_gradients(params, batch, th, alpha, beta, flags)
        for name in TENSOR_NAMES:
            base = getattr(params, name)
            numeric = np.zeros_like(base)
            for idx in np.ndindex(base.shape):
                plus, minus = params.copy(), params.copy()
                getattr(plus, name)[idx] += h
                getattr(minus, name)[idx] -= h
                numeric[idx] = (objective(plus, batch, th, alpha, beta, flags) - objective(minus, batch, th, alpha, beta, flags)) / (2 * h)
            np.testing.assert_allclose(getattr(grads, name), numeric, rtol=1e-4, atol=1e-6, err_msg=name)
        checked += 1


def test_single_pair_without_negatives_has_zero_itc_gradient():
    rng = np.random.default_rng(0)
    params = init_params(V, D_E, D, D_X, seed=0)
    batch = random_batch(rng, 1)
    batch.valid[:] = False
    batch.neg_ids = [[None] * K]
    _, grads, _ = loss_gradients(params, batch, ThresholdState(), 0.2, 0.4, LossFlags())
    for name in TENSOR_NAMES:
        assert not np.any(getattr(grads, name))


def test_inactive_hinge_contributes_exactly_zero(rng):
    for _ in range(20):
        params = init_params(V, D_E, D, D_X, seed=int(rng.integers(1 << 30)))
        batch = random_batch(rng, 3)
        satisfied = ThresholdState(values=[-100.0] * K)
        flags = LossFlags(include_rel_term=False)
        breakdown, with_cmr, _ = loss_gradients(params, batch, satisfied, 0.2, 0.4, flags)
        _, without_cmr, _ = loss_gradients(params, batch, satisfied, 0.2, 0.0, flags)
        assert breakdown.cmr == 0.0
        for name in TENSOR_NAMES:
            np.testing.assert_array_equal(getattr(with_cmr, name), getattr(without_cmr, name))
