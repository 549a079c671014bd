import numpy as np
import pytest

from conftest import quadratic_toy, random_batch
from mixprec.desk import mlp
from mixprec.quantizer import QuantParams, quantize_tensor, weight_scales
from mixprec.sensitivity import (
    DegradationMatrix,
    SensitivityError,
    SensitivityReport,
    combine,
    compute_sensitivity,
    excess_degradation,
    hutchinson_trace,
    interlayer_matrix,
    interlayer_score,
    sensitivity_order,
)
from mixprec.tensorcore import exact_layer_trace


class TestHutchinson:
    def test_diagonal_quadratic_is_exact(self):
        model, batch = quadratic_toy([1, 2, 3], [0.3, -1.0, 2.0])
        assert hutchinson_trace(model, batch, "w", n_samples=1, seed=0) == pytest.approx(6.0, abs=1e-6)

    @pytest.mark.parametrize("n, tol", [(256, 0.05), (1024, 0.02)])
    def test_close_to_exact_trace(self, trained_tanh, n, tol):
        model, batch = trained_tanh
        for lid in model.weighted_ids():
            exact = exact_layer_trace(model, batch, lid)
            assert hutchinson_trace(model, batch, lid, n, seed=0) == pytest.approx(exact, rel=tol)

    def test_mean_over_seeds_converges(self, trained_tanh):
        model, batch = trained_tanh
        lid = model.weighted_ids()[-1]
        exact = exact_layer_trace(model, batch, lid)
        est = np.mean([hutchinson_trace(model, batch, lid, 1024, seed=s) for s in range(16)])
        assert est == pytest.approx(exact, rel=0.01)

    def test_deterministic_and_seed_dependent(self, trained_tanh):
        model, batch = trained_tanh
        a = hutchinson_trace(model, batch, "fc1", 8, seed=5)
        assert a == hutchinson_trace(model, batch, "fc1", 8, seed=5)
        assert a != hutchinson_trace(model, batch, "fc1", 8, seed=6)

    def test_rejects_zero_samples(self, trained_tanh):
        with pytest.raises(ValueError):
            hutchinson_trace(*trained_tanh, "fc0", 0, seed=0)


def table_loss(single, pairs, baseline=0.0):
    def loss_of(s):
        if not s:
            return baseline
        if len(s) == 1:
            return single[next(iter(s))]
        return pairs[frozenset(s)]
    return loss_of


class TestExcessDegradation:
    def test_pair_example(self):
        d = excess_degradation(
            ["a", "b"], table_loss({"a": 0.1, "b": 0.2}, {frozenset("ab"): 0.5}), bits=8
        )
        assert d.matrix[0, 1] == pytest.approx(0.3)
        assert d.matrix[1, 0] == d.matrix[0, 1]
        assert d.matrix[0, 0] == 0.0

    def test_evaluation_count(self):
        calls = []
        ids = [f"l{i}" for i in range(6)]

        def loss_of(s):
            calls.append(s)
            return float(len(s))

        d = excess_degradation(ids, loss_of, bits=8)
        assert len(calls) == d.evaluations == 6 * 5 // 2 + 6 + 1
        assert len(set(calls)) == len(calls)

    def test_symmetric(self):
        rng = np.random.default_rng(0)
        ids = list("abcde")
        vals = {}

        def loss_of(s):
            return vals.setdefault(s, float(rng.random()))

        d = excess_degradation(ids, loss_of, bits=8)
        np.testing.assert_array_equal(d.matrix, d.matrix.T)

    def test_worker_count_does_not_matter(self):
        ids = list("abcdef")

        def loss_of(s):
            return sum(ord(c) ** 1.5 for c in s) % 7.0

        one = excess_degradation(ids, loss_of, 8, workers=1)
        four = excess_degradation(ids, loss_of, 8, workers=4)
        np.testing.assert_array_equal(one.matrix, four.matrix)

    def test_failure_names_pair(self):
        def loss_of(s):
            if s == frozenset("bc"):
                raise RuntimeError("boom")
            return 0.0

        with pytest.raises(SensitivityError, match="b, c"):
            excess_degradation(list("abc"), loss_of, 8)

    def test_non_finite(self):
        with pytest.raises(SensitivityError):
            excess_degradation(list("ab"), lambda s: float("nan") if len(s) == 2 else 0.0, 8)

    def test_needs_two_layers(self):
        with pytest.raises(SensitivityError):
            excess_degradation(["a"], lambda s: 0.0, 8)

    def test_csv_round_trip(self):
        d = excess_degradation(list("abc"), lambda s: 0.1 * len(s) ** 2, 8)
        back = DegradationMatrix.from_csv(d.to_csv())
        assert back.layer_ids == d.layer_ids
        np.testing.assert_array_equal(back.matrix, d.matrix)


class TestInterlayerMatrix:
    def test_representable_weights_give_zero(self):
        model = mlp([4, 6, 5, 3], seed=1, activation="tanh")
        model = model.with_weights({
            l.id: quantize_tensor(l.weights.astype(np.float64), QuantParams(8, weight_scales(l.weights)))
            for l in model.weighted_layers()
        })
        batch = random_batch(np.random.default_rng(0), 16, 4, 3)
        d = interlayer_matrix(model, batch, bits=8)
        assert not d.matrix.any()

    def test_counts_evaluations(self, tanh_mlp):
        model, batch = tanh_mlp
        seen = []
        d = interlayer_matrix(model, batch, bits=4, counter=seen)
        assert len(seen) == d.evaluations == 3 + 3 + 1
        assert d.bits_used == 4

    def test_bits_must_be_quantized_palette_entry(self, tanh_mlp):
        with pytest.raises(SensitivityError):
            interlayer_matrix(*tanh_mlp, bits=16)
        with pytest.raises(SensitivityError):
            interlayer_matrix(*tanh_mlp, bits=6)


def dmat(m):
    m = np.asarray(m, dtype=float)
    return DegradationMatrix([f"l{i}" for i in range(len(m))], m, 8, {}, 0.0)


class TestScores:
    def test_example(self):
        d = dmat([[0, 0.3, 0], [0.3, 0, 0], [0, 0, 0]])
        np.testing.assert_allclose(interlayer_score(d), [0.3, 0.3, 0.0])

    def test_clip_modes(self):
        d = dmat([[0, 0.3, -0.5], [0.3, 0, 0.1], [-0.5, 0.1, 0]])
        np.testing.assert_allclose(interlayer_score(d, "term"), [0.3, 0.4, 0.1])
        np.testing.assert_allclose(interlayer_score(d, "sum"), [0.0, 0.4, 0.0])

    def test_never_negative(self):
        rng = np.random.default_rng(4)
        m = rng.normal(size=(6, 6))
        m = m + m.T
        for mode in ("term", "sum"):
            assert np.all(interlayer_score(dmat(m), mode) >= 0)

    def test_unknown_clip(self):
        with pytest.raises(ValueError):
            interlayer_score(dmat([[0, 1], [1, 0]]), "nope")

    def test_combine_example(self):
        beta, aug = combine([1, 2, 3], [0, 1, 3])
        assert beta == pytest.approx(1.5)
        np.testing.assert_allclose(aug, [1.0, 3.5, 7.5])

    def test_combine_zero_interlayer(self):
        beta, aug = combine([1, 2, 3], [0, 0, 0])
        assert beta == 0.0
        np.testing.assert_array_equal(aug, [1, 2, 3])

    def test_combine_balances_means(self):
        e_h = np.array([0.5, 0.1, 0.9, 0.3])
        e_il = np.array([10.0, 0.0, 4.0, 2.0])
        beta, aug = combine(e_h, e_il)
        assert np.mean(beta * e_il) == pytest.approx(np.mean(e_h))

    def test_order_ascending_stable(self):
        assert sensitivity_order([0.3, 0.1, 0.2], list("abc")) == ["b", "c", "a"]
        assert sensitivity_order([1.0, 1.0, 0.0], list("abc")) == ["c", "a", "b"]


class TestComputeSensitivity:
    def test_report(self, tanh_mlp):
        model, batch = tanh_mlp
        report, d = compute_sensitivity(model, batch, n_samples=16, seed=3, bits=8)
        assert report.layer_ids == model.weighted_ids()
        np.testing.assert_allclose(report.e_hessian * report.weight_counts, report.e_hessian_raw)
        beta, aug = combine(report.e_hessian, report.e_interlayer)
        assert report.beta == beta
        np.testing.assert_array_equal(report.e_aug, aug)
        assert sorted(report.ordering()) == sorted(model.weighted_ids())

    def test_raw_normalization(self, tanh_mlp):
        model, batch = tanh_mlp
        report, _ = compute_sensitivity(model, batch, n_samples=4, seed=0, normalize="raw")
        np.testing.assert_array_equal(report.e_hessian, report.e_hessian_raw)

    def test_workers_bitwise_identical(self, tanh_mlp):
        model, batch = tanh_mlp
        a, da = compute_sensitivity(model, batch, n_samples=8, seed=1, workers=1)
        b, db = compute_sensitivity(model, batch, n_samples=8, seed=1, workers=3)
        assert a.to_csv() == b.to_csv()
        np.testing.assert_array_equal(da.matrix, db.matrix)

    def test_csv_round_trip(self, tanh_mlp):
        model, batch = tanh_mlp
        report, _ = compute_sensitivity(model, batch, n_samples=4, seed=0)
        back = SensitivityReport.from_csv(report.to_csv())
        assert back.to_csv() == report.to_csv()
        assert back.ordering() == report.ordering()
