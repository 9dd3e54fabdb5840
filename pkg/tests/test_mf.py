import io

import numpy as np
import pytest

import genoseq.gradcheck as gc
from genoseq.data import GenotypeMatrix, synth_lowrank_genotypes, synth_population_genotypes
from genoseq.errors import ConfigError, DataError, ShapeError
from genoseq.linalg import Rng
from genoseq.mf import (CostCurve, FactorPair, MfConfig, fit_report, impute,
                        imputation_accuracy, mf_cost, mf_epoch, mf_fit,
                        mf_gradients, mf_init, mf_reconstruct,
                        rounded_reconstruction)


def _geno(codes, observed=None):
    codes = np.asarray(codes)
    if observed is None:
        observed = np.ones_like(codes, dtype=bool)
    return GenotypeMatrix(codes, observed)


ONE_CELL = _geno([[2]])
ONE_CELL_FP = FactorPair(np.array([[1.0]]), np.array([[1.0]]))


class TestMfConfig:
    def test_default_values(self):
        cfg = MfConfig()
        assert cfg.alpha == 0.001
        assert cfg.beta == 0.02
        assert cfg.epochs == 5000
        assert cfg.features == 400
        assert cfg.init_range == (0.0, 1.0)

    def test_validation(self):
        with pytest.raises(ConfigError):
            MfConfig(alpha=0.0)
        with pytest.raises(ConfigError):
            MfConfig(beta=-0.1)
        with pytest.raises(ConfigError):
            MfConfig(features=0)
        with pytest.raises(ConfigError):
            MfConfig(init_range=(1.0, 0.0))
        with pytest.raises(ConfigError):
            MfConfig(mode="minibatch")


class TestMfInit:
    def test_entries_in_range(self):
        fp = mf_init(20, 30, MfConfig(features=4, seed=7))
        for m in (fp.p, fp.q):
            assert m.min() >= 0.0 and m.max() < 1.0

    def test_degenerate_range_collapses_to_constant(self):
        cfg = MfConfig(features=2, init_range=(0.5, 0.5 + 1e-12), seed=1)
        fp = mf_init(5, 6, cfg)
        np.testing.assert_allclose(fp.p, 0.5, atol=1e-11)
        np.testing.assert_allclose(fp.q, 0.5, atol=1e-11)

    def test_deterministic(self):
        cfg = MfConfig(features=3, seed=42)
        a, b = mf_init(7, 9, cfg), mf_init(7, 9, cfg)
        assert a.p.tobytes() == b.p.tobytes()
        assert a.q.tobytes() == b.q.tobytes()

    def test_shapes(self):
        fp = mf_init(11, 13, MfConfig(features=5, seed=0))
        assert fp.p.shape == (11, 5) and fp.q.shape == (13, 5)
        assert fp.features == 5


class TestMfReconstruct:
    def test_rank_one_hand_products(self):
        fp = FactorPair(np.array([[2.0], [3.0]]), np.array([[4.0], [5.0]]))
        np.testing.assert_array_equal(mf_reconstruct(fp), [[8.0, 10.0], [12.0, 15.0]])

    def test_zero_factor_annihilates(self):
        fp = FactorPair(np.ones((3, 2)), np.zeros((4, 2)))
        np.testing.assert_array_equal(mf_reconstruct(fp), np.zeros((3, 4)))

    def test_entry_is_feature_dot_product(self):
        rng = Rng(3)
        fp = FactorPair(rng.uniform((4, 6)), rng.uniform((5, 6)))
        recon = mf_reconstruct(fp)
        assert recon[2, 3] == pytest.approx(float(np.dot(fp.p[2], fp.q[3])), abs=1e-12)


class TestMfCost:
    def test_fully_masked_is_pure_regularization(self):
        g = _geno([[1, 2], [0, 1]], observed=np.zeros((2, 2), dtype=bool))
        fp = FactorPair(np.ones((2, 2)), np.ones((2, 2)))
        sse, objective = mf_cost(g, fp, beta=0.1)
        assert sse == 0.0
        assert objective == pytest.approx(0.05 * (4 + 4))

    def test_perfect_fit_zero_objective(self):
        fp = FactorPair(np.array([[1.0], [2.0]]), np.array([[1.0], [3.0]]))
        recon = mf_reconstruct(fp)
        g = _geno(np.rint(recon))
        # quantize factors so the product is exactly the codes
        g = GenotypeMatrix(np.array([[1, 3], [2, 6]]) // 1, np.ones((2, 2), dtype=bool))
        sse, objective = mf_cost(g, fp, beta=0.0)
        assert sse == 0.0 and objective == 0.0

    def test_one_cell_hand_value(self):
        sse, objective = mf_cost(ONE_CELL, ONE_CELL_FP, beta=0.02)
        assert sse == 1.0
        assert objective == pytest.approx(1.02)


class TestMfGradients:
    def test_perfect_fit_without_regularization_is_stationary(self):
        fp = FactorPair(np.array([[1.0], [2.0]]), np.array([[1.0], [3.0]]))
        g = _geno([[1, 3], [2, 6]])
        dp, dq = mf_gradients(g, fp, beta=0.0)
        np.testing.assert_array_equal(dp, np.zeros((2, 1)))
        np.testing.assert_array_equal(dq, np.zeros((2, 1)))

    def test_fully_masked_leaves_regularizer_only(self):
        g = _geno([[1, 2], [0, 1]], observed=np.zeros((2, 2), dtype=bool))
        rng = Rng(8)
        fp = FactorPair(rng.uniform((2, 3)), rng.uniform((2, 3)))
        dp, dq = mf_gradients(g, fp, beta=0.7)
        np.testing.assert_allclose(dp, 0.7 * fp.p)
        np.testing.assert_allclose(dq, 0.7 * fp.q)

    def test_matches_finite_differences(self):
        # 20 random small instances, samples/snps <= 8, features <= 3
        assert gc.check_mf(trials=20, seed=101) < 1e-6

    def test_mask_independence_bitwise(self):
        holed, _ = synth_lowrank_genotypes(6, 7, rank=2, missing_frac=0.3, seed=3)
        fp = mf_init(6, 7, MfConfig(features=2, seed=5))
        base_cost = mf_cost(holed, fp, 0.02)
        base_grads = mf_gradients(holed, fp, 0.02)
        poisoned = holed.copy()
        poisoned.codes[~poisoned.observed] = 77
        assert mf_cost(poisoned, fp, 0.02) == base_cost
        dp, dq = mf_gradients(poisoned, fp, 0.02)
        assert dp.tobytes() == base_grads[0].tobytes()
        assert dq.tobytes() == base_grads[1].tobytes()


class TestMfEpoch:
    def test_vanishing_step_leaves_factors_unchanged(self):
        # the alpha -> 0 limit: a step below one ulp is the identity
        g = _geno([[1, 2], [0, 1]])
        fp = mf_init(2, 2, MfConfig(features=2, seed=1))
        new, _ = mf_epoch(g, fp, MfConfig(features=2, alpha=1e-300, seed=1))
        assert new.p.tobytes() == fp.p.tobytes()
        assert new.q.tobytes() == fp.q.tobytes()

    def test_one_step_reduces_hand_example(self):
        cfg = MfConfig(features=1, alpha=0.1, beta=0.02, seed=0)
        before = mf_cost(ONE_CELL, ONE_CELL_FP, 0.02)[1]
        _, record = mf_epoch(ONE_CELL, ONE_CELL_FP, cfg)
        assert record.objective < before

    def test_stationary_point_fixed(self):
        fp = FactorPair(np.array([[1.0], [2.0]]), np.array([[1.0], [3.0]]))
        g = _geno([[1, 3], [2, 6]])
        new, _ = mf_epoch(g, fp, MfConfig(features=1, alpha=0.1, beta=0.0, seed=0))
        np.testing.assert_allclose(new.p, fp.p, atol=1e-15)
        np.testing.assert_allclose(new.q, fp.q, atol=1e-15)

    def test_per_entry_mode_also_descends(self):
        holed, _ = synth_lowrank_genotypes(8, 9, rank=2, missing_frac=0.1, seed=6)
        cfg = MfConfig(features=2, alpha=0.01, beta=0.02, epochs=30, seed=2,
                       mode="per_entry")
        _, curve = mf_fit(holed, cfg)
        assert curve.records[-1].objective < curve.records[0].objective


def _rank_one_codes():
    # an exactly rank-one integer genotype matrix: outer product of a
    # {0,1} sample vector and a {0,1,2} SNP vector
    a = np.array([1, 0, 1, 1, 0, 1, 1, 0, 1, 1])[:, None]
    b = np.array([2, 1, 0, 2, 1, 0, 2, 1, 0, 2])[None, :]
    return _geno(a @ b)


class TestMfFit:
    def test_rank_one_recovery(self):
        cfg = MfConfig(features=1, alpha=0.01, beta=0.0, epochs=1500, seed=4)
        _, curve = mf_fit(_rank_one_codes(), cfg)
        assert curve.final_sse() < 1e-3

    def test_zero_epochs_returns_init_and_empty_curve(self):
        g = _geno([[1, 2], [0, 1]])
        cfg = MfConfig(features=2, epochs=0, seed=3)
        fp, curve = mf_fit(g, cfg)
        init = mf_init(2, 2, cfg)
        assert fp.p.tobytes() == init.p.tobytes()
        assert len(curve) == 0

    def test_more_features_fit_at_least_as_well(self):
        holed, _ = synth_population_genotypes(30, 40, groups=4, missing_frac=0.1, seed=7)
        finals = []
        for features in (1, 4):
            cfg = MfConfig(features=features, alpha=0.002, beta=0.02, epochs=400, seed=3)
            _, curve = mf_fit(holed, cfg)
            finals.append(curve.final_sse())
        assert finals[1] <= finals[0]

    def test_no_observed_entries_rejected(self):
        g = _geno([[1]], observed=np.zeros((1, 1), dtype=bool))
        with pytest.raises(DataError):
            mf_fit(g, MfConfig(features=1, seed=0))

    def test_early_stop_on_tolerance(self):
        cfg = MfConfig(features=1, alpha=0.02, beta=0.0, epochs=5000, seed=4,
                       cost_tolerance=0.5)
        _, curve = mf_fit(_rank_one_codes(), cfg)
        assert len(curve) < 5000
        assert curve.records[-1].objective < 0.5

    def test_monotone_descent_with_small_enough_alpha(self):
        holed, _ = synth_lowrank_genotypes(9, 11, rank=2, missing_frac=0.2, seed=14)
        alpha = 1e-3
        for _ in range(20):
            cfg = MfConfig(features=2, alpha=alpha, beta=0.0, epochs=60, seed=5)
            _, curve = mf_fit(holed, cfg)
            objectives = [r.objective for r in curve.records]
            if all(b <= a + 1e-12 for a, b in zip(objectives, objectives[1:])):
                break
            alpha *= 0.5
        else:
            pytest.fail("objective still increasing after 20 halvings of alpha")

    def test_permutation_equivariance(self):
        holed, _ = synth_lowrank_genotypes(7, 9, rank=2, missing_frac=0.15, seed=21)
        cfg = MfConfig(features=2, alpha=0.005, beta=0.02, seed=8)
        fp0 = mf_init(7, 9, cfg)
        perm = Rng(3).permutation(7)

        fp_a = fp0.copy()
        g_a = holed
        fp_b = FactorPair(fp0.p[perm].copy(), fp0.q.copy())
        g_b = GenotypeMatrix(holed.codes[perm], holed.observed[perm])
        for epoch in range(25):
            fp_a, _ = mf_epoch(g_a, fp_a, cfg, epoch)
            fp_b, _ = mf_epoch(g_b, fp_b, cfg, epoch)
        np.testing.assert_allclose(mf_reconstruct(fp_a)[perm], mf_reconstruct(fp_b),
                                   atol=1e-9)


class TestImpute:
    def test_rounding_and_clamping(self):
        g = _geno([[5, 5, 5]], observed=np.array([[False, False, False]]))
        fp = FactorPair(np.array([[1.0]]), np.array([[1.4], [-0.3], [2.7]]))
        out = impute(g, fp)
        np.testing.assert_array_equal(out.codes, [[1, 0, 2]])
        assert out.observed.all()

    def test_observed_cells_take_precedence(self):
        g = _geno([[2]])
        fp = FactorPair(np.array([[0.9]]), np.array([[1.0]]))
        assert impute(g, fp).codes[0, 0] == 2

    def test_rounded_reconstruction_ignores_observations(self):
        g = _geno([[2]])
        fp = FactorPair(np.array([[0.9]]), np.array([[1.0]]))
        assert rounded_reconstruction(g, fp).codes[0, 0] == 1


class TestImputationAccuracy:
    def test_perfect(self):
        _, truth = synth_lowrank_genotypes(5, 6, rank=2, missing_frac=0.0, seed=3)
        holes = np.zeros((5, 6), dtype=bool)
        holes[0, 0] = True
        missing_pct, full_pct = imputation_accuracy(truth, truth, holes)
        assert missing_pct == 100.0 and full_pct == 100.0

    def test_no_holes_missing_is_not_applicable(self):
        _, truth = synth_lowrank_genotypes(4, 4, rank=1, missing_frac=0.0, seed=1)
        missing_pct, full_pct = imputation_accuracy(truth, truth,
                                                    np.zeros((4, 4), dtype=bool))
        assert missing_pct is None
        assert full_pct == 100.0

    def test_three_of_four_holes_correct(self):
        truth = _geno([[0, 1], [2, 1]])
        imputed = _geno([[0, 1], [2, 0]])
        holes = np.array([[True, True], [True, True]])
        missing_pct, full_pct = imputation_accuracy(truth, imputed, holes)
        assert missing_pct == 75.0 and full_pct == 75.0

    def test_shape_mismatch(self):
        a = _geno([[1]])
        b = _geno([[1, 2]])
        with pytest.raises(ShapeError):
            imputation_accuracy(a, b, np.zeros((1, 1), dtype=bool))


class TestReporting:
    def test_cost_curve_csv_layout(self):
        holed, _ = synth_lowrank_genotypes(6, 6, rank=2, missing_frac=0.1, seed=2)
        cfg = MfConfig(features=2, alpha=0.005, epochs=3, seed=1)
        _, curve = mf_fit(holed, cfg)
        buf = io.StringIO()
        curve.to_csv(buf)
        lines = buf.getvalue().strip().splitlines()
        assert lines[0] == "epoch,sse,objective"
        assert len(lines) == 4
        epoch, sse, objective = lines[1].split(",")
        assert epoch == "0" and float(sse) > 0 and float(objective) >= float(sse)

    def test_fit_report_contents(self):
        holed, truth = synth_lowrank_genotypes(6, 6, rank=2, missing_frac=0.1, seed=2)
        cfg = MfConfig(features=2, alpha=0.005, epochs=3, seed=1)
        fp, curve = mf_fit(holed, cfg)
        acc = imputation_accuracy(truth, impute(holed, fp), ~holed.observed)
        report = fit_report(cfg, curve, acc)
        assert report["config"]["features"] == 2
        assert len(report["curve"]) == 3
        assert set(report["accuracy"]) == {"missing_pct", "full_pct"}
