import itertools
import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dsmil import numerics as nx
from dsmil.numerics import Tape, Tensor
from dsmil.selection import (
    PHASE_E,
    PHASE_JOINT,
    PHASE_M,
    SelectionParams,
    combined_scores,
    e_step_labels,
    em_schedule,
    estimator_loss,
    m_step_labels,
    predictor_loss,
    selection_scores,
)

import gradcheck

GRID = range(1, 10)  # scores k/10


def e_oracle(scores_tenths, labels, zeta_tenths=5):
    """Keyness labels by explicit quantifier evaluation on exact tenths."""
    out = []
    for row in scores_tenths:
        out.append(int(any(labels[c] and row[c] > zeta_tenths for c in range(len(labels)))))
    return out


def m_oracle(q_tenths, labels):
    mean = Fraction(sum(q_tenths), len(q_tenths))
    return [[int(labels[c] and q > mean) for c in range(len(labels))] for q in q_tenths], mean / 10


class TestEStep:
    def test_negative_image(self):
        assert e_step_labels(np.full((3, 2), 0.9), [0, 0]).tolist() == [0, 0, 0]

    def test_direct_rule(self):
        assert e_step_labels(np.array([[0.9], [0.1]]), [1]).tolist() == [1, 0]

    def test_threshold_is_strict(self):
        assert e_step_labels(np.array([[0.5]]), [1], zeta=0.5).tolist() == [0]

    def test_bad_zeta(self):
        with pytest.raises(ValueError):
            e_step_labels(np.array([[0.5]]), [1], zeta=1.0)

    def test_shape_mismatch(self):
        with pytest.raises(nx.ShapeError):
            e_step_labels(np.full((2, 3), 0.5), [1, 0])

    def test_exhaustive_grid(self):
        """All tenths patterns for N*C <= 4, three levels up to 8 cells, binary up to 12."""
        checked = 0
        for n in range(1, 5):
            for c in range(1, 4):
                cells = n * c
                levels = GRID if cells <= 4 else (1, 5, 9) if cells <= 8 else (1, 9)
                for labels in itertools.product((0, 1), repeat=c):
                    pats = np.array(list(itertools.product(levels, repeat=cells)))
                    got = e_step_labels(pats.reshape(-1, c) / 10, np.repeat([labels], len(pats), axis=0), group=n)
                    got = got.reshape(len(pats), n)
                    for pat, g in zip(pats, got):
                        assert g.tolist() == e_oracle(pat.reshape(n, c), labels)
                    checked += len(pats)
        assert checked > 50_000


class TestMStep:
    def test_constant_q(self):
        y, xi = m_step_labels(np.full(4, 0.3), [1, 1])
        assert xi[0] == pytest.approx(0.3)
        assert not y.any()

    def test_example(self):
        y, xi = m_step_labels(np.array([0.8, 0.2, 0.5]), [1])
        assert xi[0] == pytest.approx(0.5)
        assert y[:, 0].tolist() == [1, 0, 0]

    def test_negative_image(self):
        y, _ = m_step_labels(np.array([0.9, 0.1]), [0, 0])
        assert not y.any()

    def test_decimal_tie_is_not_split(self):
        # 0.2 is the decimal mean of these; binary rounding must not make it positive
        y, _ = m_step_labels(np.array([0.1, 0.2, 0.3]), [1])
        assert y[:, 0].tolist() == [0, 0, 1]

    def test_exhaustive_grid(self):
        for n in range(1, 5):
            pats = np.array(list(itertools.product(GRID, repeat=n)))
            for c in range(1, 4):
                for labels in itertools.product((0, 1), repeat=c):
                    y, xi = m_step_labels(pats.reshape(-1) / 10, np.repeat([labels], len(pats), axis=0), group=n)
                    y = y.reshape(len(pats), n, c)
                    for k, pat in enumerate(pats):
                        want, mean = m_oracle(pat.tolist(), labels)
                        assert y[k].tolist() == want
                        assert xi[k] == pytest.approx(float(mean), abs=1e-15)

    @settings(max_examples=300, deadline=None)
    @given(st.lists(st.floats(0.001, 0.999), min_size=1, max_size=12), st.lists(st.booleans(), min_size=1, max_size=4))
    def test_positives_above_mean_and_max_included(self, q, labels):
        q = np.array(q)
        y, xi = m_step_labels(q, labels)
        pos = y.any(axis=1)
        assert np.all(q[pos] > xi[0])
        if q.max() - q.mean() > 1e-9:
            for c, lab in enumerate(labels):
                assert y[int(np.argmax(q)), c] == float(lab)


class TestLosses:
    def test_estimator_half(self):
        assert estimator_loss(Tensor(np.full((4, 1), 0.5)), [1, 0, 0, 1]).item() == pytest.approx(math.log(2), abs=1e-12)

    def test_estimator_perfect(self):
        q = Tensor(np.array([[1 - nx.EPS], [nx.EPS]]))
        assert estimator_loss(q, [1, 0]).item() < 1e-6

    def test_predictor_half(self):
        y = np.array([[1, 0], [0, 0], [1, 1]])
        assert predictor_loss(Tensor(np.full((3, 2), 0.5)), y).item() == pytest.approx(math.log(2), abs=1e-12)

    def test_predictor_perfect(self):
        y = np.array([[1.0, 0.0]])
        assert predictor_loss(Tensor(np.clip(y, nx.EPS, 1 - nx.EPS)), y).item() < 1e-6

    def test_predictor_shape(self):
        with pytest.raises(nx.ShapeError):
            predictor_loss(Tensor(np.full((3, 2), 0.5)), np.zeros((2, 2)))

    def test_row_weights_renormalize(self):
        rng = np.random.default_rng(0)
        s = Tensor(rng.uniform(0.1, 0.9, size=(4, 2)))
        y = (rng.random((4, 2)) > 0.5).astype(float)
        kept = predictor_loss(s, y, [1, 1, 0, 0]).item()
        assert kept == pytest.approx(predictor_loss(Tensor(s.value[:2]), y[:2]).item(), abs=1e-14)

    @pytest.mark.parametrize("seed", range(4))
    def test_gradients(self, seed):
        rng = np.random.default_rng(seed)
        n, d, c = rng.integers(1, 8, size=3)
        params = SelectionParams.init(rng, d, c)
        for t in params.tensors():
            t.value = rng.normal(size=t.shape)
        x = Tensor(rng.normal(size=(n, d)))
        h = rng.integers(0, 2, n)
        y = rng.integers(0, 2, (n, c))
        assert gradcheck.check(lambda: estimator_loss(selection_scores(x, params)[0], h), params.estimator_tensors()) < 1e-4
        assert gradcheck.check(lambda: predictor_loss(selection_scores(x, params)[1], y), params.predictor_tensors()) < 1e-4

    def test_hidden_layer_gradients(self):
        rng = np.random.default_rng(9)
        params = SelectionParams.init(rng, 5, 3, hidden=6)
        x = Tensor(rng.normal(size=(4, 5)))
        y = rng.integers(0, 2, (4, 3))
        assert gradcheck.check(lambda: predictor_loss(selection_scores(x, params)[1], y), params.predictor_tensors()) < 1e-4

    @pytest.mark.parametrize("which", ["estimator", "predictor"])
    def test_fixed_labels_step_does_not_increase_loss(self, which):
        rng = np.random.default_rng(3)
        params = SelectionParams.init(rng, 6, 3)
        x = Tensor(rng.normal(size=(20, 6)))
        h = rng.integers(0, 2, 20)
        y = rng.integers(0, 2, (20, 3))
        tensors = params.estimator_tensors() if which == "estimator" else params.predictor_tensors()

        def loss():
            q, cs = selection_scores(x, params)
            return estimator_loss(q, h) if which == "estimator" else predictor_loss(cs, y)

        opt = nx.Sgd(tensors, nx.SgdConfig(learning_rate=1e-3, momentum=0.0, weight_decay=0.0))
        values = []
        for it in range(30):
            with Tape() as tape:
                val = loss()
            nx.backward(tape, val)
            opt.step(it)
            values.append(val.item())
        assert all(b <= a for a, b in zip(values, values[1:]))


class TestScores:
    def test_zero_weights(self):
        params = SelectionParams.init(np.random.default_rng(0), 3, 2)
        for t in params.tensors():
            t.value = np.zeros(t.shape)
        q, cs = selection_scores(Tensor(np.ones((4, 3))), params)
        np.testing.assert_array_equal(q.value, 0.5)
        np.testing.assert_array_equal(cs.value, 0.5)
        np.testing.assert_array_equal(combined_scores(q.value, cs.value), 0.25)

    def test_combined_monotone_in_q(self):
        cs = np.array([[0.3, 0.6]])
        assert np.all(combined_scores([0.7], cs) > combined_scores([0.2], cs))

    def test_combined_argmax_equivariant(self):
        rng = np.random.default_rng(2)
        q, cs = rng.random(6), rng.random((6, 2))
        perm = rng.permutation(6)
        a = combined_scores(q, cs).argmax(axis=0)
        b = combined_scores(q[perm], cs[perm]).argmax(axis=0)
        assert perm[b].tolist() == a.tolist()

    def test_dimension_error(self):
        params = SelectionParams.init(np.random.default_rng(0), 3, 2)
        with pytest.raises(nx.ShapeError):
            selection_scores(Tensor(np.ones((2, 4))), params)


class TestSchedule:
    @pytest.mark.parametrize("it, phase", [(0, PHASE_E), (2999, PHASE_E), (3000, PHASE_M), (5999, PHASE_M),
                                           (6000, PHASE_E), (29999, PHASE_M), (30000, PHASE_JOINT), (150000, PHASE_JOINT)])
    def test_full_schedule(self, it, phase):
        assert em_schedule(it) == phase

    def test_desk_schedule(self):
        assert [em_schedule(i, 100, 1000) for i in (0, 99, 100, 200, 999, 1000)] == ["E", "E", "M", "E", "M", "joint"]

    def test_negative(self):
        with pytest.raises(ValueError):
            em_schedule(-1)
