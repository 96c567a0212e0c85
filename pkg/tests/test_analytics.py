import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from moecpt.analytics import (coact_diff, coactivation, cvs, expert_load, mri, mri_report,
                              router_saturation, saturation_by_layer, vocab_specialization)
from moecpt.errors import AlignmentError, ConfigError, UnsupportedMetric
from moecpt.traces import TraceTable


def random_selection(rng, n, E, k):
    return np.array([rng.choice(E, size=k, replace=False) for _ in range(n)])


# ---------------------------------------------------------------- naive oracles


def naive_mri(sel, E):
    counts = [0] * E
    for row in sel:
        for e in row:
            counts[e] += 1
    return max(counts) / len(sel)


def naive_saturation(a, b, k):
    return float(sum(Fraction(len(set(x) & set(y)), k) for x, y in zip(a, b)) / len(a))


def naive_specialization(tokens, sel, V, E):
    k = len(sel[0])
    spec, alpha = {}, {}
    for x in range(V):
        rows = [r for t, r in zip(tokens, sel) if t == x]
        if not rows:
            continue
        n_x = len(rows) * k
        for e in range(E):
            spec[x, e] = sum(list(r).count(e) for r in rows) / n_x
        best = max(spec[x, e] for e in range(E))
        alpha[x] = min(e for e in range(E) if spec[x, e] == best)
    return spec, alpha


def naive_cvs(tok_h, sel_h, tok_j, sel_j, V, E):
    _, alpha = naive_specialization(tok_h, sel_h, V, E)
    spec_j, _ = naive_specialization(tok_j, sel_j, V, E)
    vals = [spec_j[x, alpha[x]] for x in alpha if (x, 0) in spec_j]
    return math.fsum(vals) / len(vals)


def naive_coact(sel, E):
    C = [[math.nan] * E for _ in range(E)]
    for i in range(E):
        n_i = sum(1 for r in sel if i in r)
        if n_i == 0:
            continue
        for j in range(E):
            C[i][j] = sum(1 for r in sel if i in r and j in r) / n_i
    return np.array(C)


# ---------------------------------------------------------------- MRI


def test_mri_hand_cases():
    assert mri(np.array([[0], [1], [2], [3]]), 4) == 0.25
    assert mri(np.array([[0, 1]] * 4), 4) == 1.0


def test_mri_empty_window_rejected():
    with pytest.raises(ConfigError):
        mri(np.zeros((0, 2), int), 4)
    with pytest.raises(ConfigError):
        mri(np.array([[4]]), 4)


def test_mri_random_traces_against_oracle_and_bounds():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        E = int(rng.integers(1, 9))
        k = int(rng.integers(1, E + 1))
        n = int(rng.integers(1, 65))
        sel = random_selection(rng, n, E, k)
        v = mri(sel, E)
        assert v == naive_mri(sel.tolist(), E)
        assert k / E <= v <= 1.0


@pytest.mark.parametrize("E,k", [(4, 1), (8, 3), (31, 3), (6, 6)])
def test_mri_balanced_construction_hits_lower_bound(E, k):
    sel = np.array([[(t * k + j) % E for j in range(k)] for t in range(E)])
    assert mri(sel, E) == k / E


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 8), st.data())
def test_mri_pigeonhole_property(E, data):
    k = data.draw(st.integers(1, E))
    n = data.draw(st.integers(1, 40))
    seed = data.draw(st.integers(0, 2**31))
    sel = random_selection(np.random.default_rng(seed), n, E, k)
    assert k / E <= mri(sel, E) <= 1.0
    assert expert_load(sel, E).sum() == n * k


def test_mri_report_windows():
    sel = np.array([[0], [0], [1], [1], [2], [0]])
    table = TraceTable(np.array([0, 0, 0, 1, 1, 1]), np.zeros(6, int), np.array([0, 1, 2, 0, 1, 2]),
                       np.zeros(6, int), sel, np.ones((6, 1)))
    rep = mri_report(table, 3)
    assert rep.values == {(0, 0): 2 / 3, (1, 0): 1 / 3}
    assert rep.summary(0) == {"median": 2 / 3, "min": 2 / 3, "max": 2 / 3}


# ---------------------------------------------------------------- saturation


def test_saturation_hand_cases():
    a = np.array([[0, 1], [2, 3], [4, 5]])
    b = np.array([[1, 0], [3, 6], [6, 7]])
    assert router_saturation(a, b) == pytest.approx(0.5, abs=0)
    assert router_saturation(a, a) == 1.0
    assert router_saturation(np.array([[0], [1]]), np.array([[1], [0]])) == 0.0


def test_saturation_matches_oracle_and_is_symmetric():
    rng = np.random.default_rng(1)
    for _ in range(50):
        E = int(rng.integers(2, 9))
        k = int(rng.integers(1, min(3, E) + 1))
        a, b = random_selection(rng, 1000, E, k), random_selection(rng, 1000, E, k)
        v = router_saturation(a, b)
        assert v == naive_saturation(a.tolist(), b.tolist(), k)
        assert v == router_saturation(b, a)
        assert 0.0 <= v <= 1.0


def test_saturation_alignment_error_reports_position():
    toks = np.arange(5)
    other = toks.copy()
    other[3] = 99
    sel = np.zeros((5, 1), int)
    with pytest.raises(AlignmentError) as info:
        router_saturation(sel, sel, 1, toks, other)
    assert info.value.position == 3
    assert info.value.exit_code == 3


def _table(tokens, sel, layer=0, step=0):
    n = len(tokens)
    return TraceTable(np.full(n, step), np.full(n, layer), np.arange(n), np.asarray(tokens),
                      np.asarray(sel), np.ones(np.shape(sel)))


def test_saturation_by_layer_orders_by_position():
    sel = np.array([[0, 1], [1, 2], [2, 3]])
    t = _table([5, 6, 7], sel)
    rev = TraceTable(t.step[::-1].copy(), t.layer[::-1].copy(), t.pos[::-1].copy(), t.token[::-1].copy(),
                     t.experts[::-1].copy(), t.gates[::-1].copy())
    assert saturation_by_layer(t, rev) == {0: 1.0}


# ---------------------------------------------------------------- vocabulary / CVS


def test_specialization_single_expert():
    rep = vocab_specialization(np.array([2, 2, 2]), np.array([[3], [3], [3]]), 4, 5)
    assert rep.specialization[2, 3] == 1.0
    assert rep.alpha[2] == 3
    assert rep.alpha[0] == -1 and rep.unobserved == 3


def test_specialization_five_token_toy_against_oracle():
    tokens = [0, 1, 0, 2, 1]
    sel = [[0, 1], [1, 2], [0, 2], [2, 0], [1, 0]]
    rep = vocab_specialization(np.array(tokens), np.array(sel), 3, 3)
    spec, alpha = naive_specialization(tokens, sel, 3, 3)
    for (x, e), v in spec.items():
        assert rep.specialization[x, e] == v
    assert {x: int(rep.alpha[x]) for x in alpha} == alpha
    # ties go to the lower id: token 1 has counts {0:1, 1:2, 2:1}, token 2 {0:1, 2:1}
    assert rep.alpha[1] == 1 and rep.alpha[2] == 0
    np.testing.assert_allclose(np.nansum(rep.specialization, axis=1)[:3], 1.0, rtol=1e-15)


def test_specialization_and_cvs_random_against_oracle():
    rng = np.random.default_rng(2)
    for _ in range(10):
        E = int(rng.integers(2, 9))
        k = int(rng.integers(1, min(3, E) + 1))
        V = int(rng.integers(2, 40))
        tok_h, tok_j = rng.integers(0, V, 1000), rng.integers(0, V, 1000)
        sel_h, sel_j = random_selection(rng, 1000, E, k), random_selection(rng, 1000, E, k)
        rh = vocab_specialization(tok_h, sel_h, V, E)
        rj = vocab_specialization(tok_j, sel_j, V, E)
        spec, alpha = naive_specialization(tok_h.tolist(), sel_h.tolist(), V, E)
        for (x, e), v in spec.items():
            assert rh.specialization[x, e] == v
        assert {x: int(rh.alpha[x]) for x in alpha} == alpha
        assert cvs(rh, rj).value == naive_cvs(tok_h.tolist(), sel_h.tolist(), tok_j.tolist(), sel_j.tolist(), V, E)
        assert 0 < rh.specialization[rh.observed].max() <= 1


def test_cvs_self_mapping_is_mean_max_specialization():
    rng = np.random.default_rng(3)
    tok = rng.integers(0, 20, 500)
    sel = random_selection(rng, 500, 6, 2)
    rep = vocab_specialization(tok, sel, 20, 6)
    obs = rep.observed
    assert cvs(rep, rep).value == pytest.approx(np.nanmax(rep.specialization[obs], axis=1).mean(), rel=1e-15)


def test_cvs_excludes_unseen_ids():
    a = vocab_specialization(np.array([0, 1]), np.array([[0], [1]]), 3, 2)
    b = vocab_specialization(np.array([0, 0]), np.array([[0], [1]]), 3, 2)
    res = cvs(a, b)
    assert (res.value, res.tokens_used, res.excluded) == (0.5, 1, 1)
    with pytest.raises(ConfigError):
        cvs(a, vocab_specialization(np.array([2]), np.array([[0]]), 3, 2))


# ---------------------------------------------------------------- co-activation


def test_coactivation_hand_case():
    rep = coactivation(np.array([[0, 1], [0, 2]]), 3)
    assert rep.matrix[0, 1] == 0.5
    assert rep.matrix[1, 0] == 1.0
    assert rep.inactive == []


def test_coactivation_k_equals_e_is_all_ones():
    rep = coactivation(np.array([[0, 1, 2], [2, 1, 0]]), 3)
    np.testing.assert_array_equal(rep.matrix, np.ones((3, 3)))


def test_coactivation_k1_unsupported():
    with pytest.raises(UnsupportedMetric) as info:
        coactivation(np.array([[0], [1]]), 2)
    assert info.value.exit_code == 6


def test_coactivation_inactive_rows_flagged():
    rep = coactivation(np.array([[0, 1]]), 3)
    assert rep.inactive == [2]
    assert np.isnan(rep.matrix[2]).all()
    assert rep.matrix[0, 0] == rep.matrix[1, 1] == 1.0


def test_coactivation_and_diff_random_against_oracle():
    rng = np.random.default_rng(4)
    for _ in range(20):
        E = int(rng.integers(2, 9))
        k = int(rng.integers(2, min(3, E) + 1))
        a, b = random_selection(rng, 1000, E, k), random_selection(rng, 1000, E, k)
        ca, cb = coactivation(a, E), coactivation(b, E)
        np.testing.assert_array_equal(ca.matrix, naive_coact(a.tolist(), E))
        live = ca.activations > 0
        assert (np.diag(ca.matrix)[live] == 1.0).all()
        d = coact_diff(ca, cb)
        oracle = np.abs(naive_coact(a.tolist(), E) - naive_coact(b.tolist(), E))
        np.testing.assert_array_equal(d.diff, oracle)
        finite = sorted(oracle[np.isfinite(oracle)].tolist())
        m = len(finite)
        median = finite[m // 2] if m % 2 else (finite[m // 2 - 1] + finite[m // 2]) / 2
        assert d.median == median
        assert d.max == finite[-1]


def test_coact_diff_self_is_zero():
    c = coactivation(np.array([[0, 1], [1, 2], [0, 2]]), 4)
    d = coact_diff(c, c)
    assert d.median == 0.0 and d.max == 0.0
    assert d.undefined == 4  # expert 3 never active: only its row is undefined
