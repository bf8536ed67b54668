import os
import sys
import unittest

import numpy as np
from numpy import testing

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "scripts"))

from spectral_model import ModelConfig, beta_law, identity_spectrum, two_atom_spectrum
from selfconsistent import reflect, solve_system
from ensemble import data_matrix, sample_radial
from locallaw import (
    DOMAIN_D, DOMAIN_D0, WARD_TOLERANCE, compare_ensembles_greenfn, default_domain, domain_grid,
    lindeberg_path, local_law_study, minor_shift, profile_Pi1, profile_Pi2, resolvent_pair,
    verify_averaged, verify_entrywise, ward_defects
)
from utils.run_utils import DomainError, SolverError, env_flag

UNIFORM_EDGE = 2.4555


def sample(config, seed):
    rng = np.random.default_rng(seed)
    xi = sample_radial(config.radial, config.n, rng)
    return xi, data_matrix(config, xi, rng)


class ResolventTest(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        cls.config = ModelConfig(60, 40, two_atom_spectrum(60, 2.0, 1.0, 0.5), beta_law(1.0, 1.0))
        cls.xi, cls.Y = sample(cls.config, 0)

    def test_ward_identities(self):
        for z in (1.0 + 0.5j, 3.0 + 0.05j, 5.0 + 1e-3j):
            pair = resolvent_pair(self.config, self.xi, self.Y, z)
            defects = ward_defects(pair, self.config.spectrum.array)
            for name, value in defects.items():
                self.assertLessEqual(value, 1e-10, name)

    def test_norm_and_symmetry(self):
        z = 2.0 + 0.01j
        pair = resolvent_pair(self.config, self.xi, self.Y, z)
        self.assertLessEqual(np.linalg.norm(pair.G, 2), (1.0 + 1e-10) / z.imag)
        self.assertLessEqual(np.linalg.norm(pair.calG, 2), (1.0 + 1e-10) / z.imag)
        testing.assert_allclose(pair.G, pair.G.T, atol=1e-10 * np.abs(pair.G).max())

    def test_trace_identity(self):
        z = 1.5 + 0.2j
        pair = resolvent_pair(self.config, self.xi, self.Y, z)
        p, n = self.config.p, self.config.n
        difference = np.trace(pair.G) - np.trace(pair.calG)
        testing.assert_allclose(difference, (n - p) / z, atol=1e-8)

    def test_minor_shift(self):
        z = 2.5 + 0.1j
        for index in (0, 17, 39):
            shift = minor_shift(self.config, self.xi, self.Y, z, index)
            self.assertLessEqual(shift, 10.0 / (self.config.n * z.imag))

    def test_rejects_real_axis(self):
        with self.assertRaises(DomainError):
            resolvent_pair(self.config, self.xi, self.Y, 2.0)


class ProfileTest(unittest.TestCase):
    def test_constant_radial(self):
        config = ModelConfig(50, 50, identity_spectrum(50), beta_law(1.0, 0.0))
        xi = np.ones(50)
        z = 2.0 + 0.3j
        values = profile_Pi2(config, xi, z)
        testing.assert_allclose(values, values[0], rtol=1e-14)

    def test_conjugate_symmetry(self):
        config = ModelConfig(50, 50, identity_spectrum(50), beta_law(1.0, 0.0))
        xi = sample_radial(config.radial, 50, np.random.default_rng(4))
        z = 2.0 + 0.3j
        triple = solve_system(config, xi, z)
        upper = profile_Pi2(config, xi, z, triple)
        lower = profile_Pi2(config, xi, z.conjugate(), reflect(triple))
        testing.assert_allclose(lower, upper.conjugate(), rtol=1e-14)

    def test_Pi1_trace(self):
        config = ModelConfig(40, 80, two_atom_spectrum(40, 3.0, 1.0, 0.25), beta_law(1.0, 0.5))
        xi = sample_radial(config.radial, 80, np.random.default_rng(5))
        z = 4.0 + 0.2j
        triple = solve_system(config, xi, z)
        Pi1 = profile_Pi1(config, xi, z, triple)
        testing.assert_allclose(np.sum(Pi1) / (z * config.p), triple.m, rtol=1e-12)


class DomainTest(unittest.TestCase):
    def test_grid_inside_domain(self):
        for kind in (DOMAIN_D, DOMAIN_D0):
            domain = default_domain(4.0, kind)
            grid = domain_grid(domain, 400)
            self.assertEqual(grid.size, 20)
            self.assertTrue(all(domain.contains(z, 400) for z in grid))
        self.assertFalse(default_domain(4.0).contains(4.0 + 1e-6j, 400))
        self.assertFalse(default_domain(4.0).contains(10.0 + 0.1j, 400))


class LocalLawTest(unittest.TestCase):
    def test_entrywise(self):
        config = ModelConfig(150, 150, identity_spectrum(150), beta_law(1.0, 0.0))
        xi, Y = sample(config, 21)
        grid = [UNIFORM_EDGE - 0.5 + 0.1j, UNIFORM_EDGE + 150 ** -0.5 * 1j, UNIFORM_EDGE + 0.3 + 0.5j]
        table = verify_entrywise(config, xi, Y, grid)
        self.assertEqual(list(table.columns),
                         ["z_re", "z_im", "statistic", "offdiag_max", "bound", "ratio", "pass", "ward_max"])
        self.assertTrue(np.all(np.isfinite(table["ratio"])))
        testing.assert_array_equal(table["pass"].to_numpy(), (table["ratio"] <= 150 ** 0.1).to_numpy())
        self.assertTrue(np.all(table["ward_max"] <= WARD_TOLERANCE))

    def test_averaged(self):
        config = ModelConfig(150, 150, identity_spectrum(150), beta_law(1.0, 0.0))
        xi, Y = sample(config, 22)
        grid = [UNIFORM_EDGE - 0.5 + 0.1j, UNIFORM_EDGE + 0.2 + 0.05j]
        table = verify_averaged(config, xi, Y, grid, lambda_plus=UNIFORM_EDGE)
        self.assertTrue(np.isnan(table["outside_ratio"].iloc[0]))
        self.assertTrue(np.isfinite(table["outside_ratio"].iloc[1]))
        self.assertTrue(table["pass"].all())
        self.assertTrue(np.all(table["ratio"] <= 150 ** 0.1))
        self.assertTrue(np.all(table["ward_max"] <= WARD_TOLERANCE))

    def test_iteration_cap_reaches_solver(self):
        config = ModelConfig(60, 60, identity_spectrum(60), beta_law(1.0, 0.0))
        xi, Y = sample(config, 23)
        with self.assertRaises(SolverError):
            verify_averaged(config, xi, Y, [UNIFORM_EDGE + 0.05j], max_iter=1)
        with self.assertRaises(SolverError):
            verify_entrywise(config, xi, Y, [UNIFORM_EDGE + 0.05j], max_iter=1)

    def test_study_stacks_seeds(self):
        config = ModelConfig(60, 60, identity_spectrum(60), beta_law(1.0, 0.0))
        study = local_law_study(config, default_domain(UNIFORM_EDGE), seeds=2, n_energy=2, n_eta=2)
        self.assertEqual(len(study.entrywise), 8)
        self.assertEqual(sorted(study.averaged["seed_index"].unique()), [0, 1])
        summary = study.to_dict()
        self.assertEqual(summary["ward_max"], study.ward_max)
        self.assertLessEqual(study.ward_max, WARD_TOLERANCE)
        self.assertEqual(summary["passed"], study.passed)

    @unittest.skipUnless(env_flag("ELLIPTIC_TW_SLOW"), "slow")
    def test_mp_local_laws(self):
        n = 500
        config = ModelConfig(n, n, identity_spectrum(n), beta_law(1.0, 0.0))
        study = local_law_study(config, default_domain(UNIFORM_EDGE), seeds=50)
        self.assertGreaterEqual(study.averaged_rate, 0.95)
        self.assertTrue(np.all(study.entrywise["ward_max"] <= WARD_TOLERANCE))
        self.assertTrue(np.all(study.averaged["ward_max"] <= WARD_TOLERANCE))
        # The entrywise rate is what the n^0.1 threshold yields, not a forced 95%.
        testing.assert_allclose(study.entrywise_rate, np.mean(study.entrywise["ratio"] <= n ** 0.1))
        self.assertLessEqual(study.entrywise["ratio"].max(), n ** 0.1 * np.log(n))


class GreenFunctionComparisonTest(unittest.TestCase):
    def test_table(self):
        config = ModelConfig(80, 80, identity_spectrum(80), beta_law(1.0, 0.0))
        table = compare_ensembles_greenfn(config, UNIFORM_EDGE, "identity", [UNIFORM_EDGE - 0.1, UNIFORM_EDGE],
                                          pairs=20)
        self.assertEqual(len(table), 2)
        self.assertTrue(np.all(table["se"] >= 0))
        self.assertTrue(np.all(np.isfinite(table["difference"])))
        self.assertTrue(np.all(table["mean_elliptical"] > 0))

    def test_logistic_and_callable(self):
        config = ModelConfig(40, 40, identity_spectrum(40), beta_law(1.0, 0.0))
        logistic = compare_ensembles_greenfn(config, UNIFORM_EDGE, "logistic", [UNIFORM_EDGE], pairs=5)
        self.assertTrue(np.all((logistic["mean_gaussian"] > 0) & (logistic["mean_gaussian"] < 1)))
        square = compare_ensembles_greenfn(config, UNIFORM_EDGE, lambda x: x ** 2, [UNIFORM_EDGE], pairs=5)
        self.assertTrue(np.all(square["mean_elliptical"] >= 0))
        with self.assertRaises(ValueError):
            compare_ensembles_greenfn(config, UNIFORM_EDGE, "cubic", [UNIFORM_EDGE], pairs=2)

    def test_lindeberg_path(self):
        config = ModelConfig(40, 40, identity_spectrum(40), beta_law(1.0, 0.0))
        path = lindeberg_path(config, "identity", UNIFORM_EDGE, [0, 20, 40], pairs=5)
        self.assertEqual(list(path["gamma"]), [0, 20, 40])
        self.assertTrue(np.all(np.isfinite(path["mean"])))

    @unittest.skipUnless(env_flag("ELLIPTIC_TW_SLOW"), "slow")
    def test_paired_difference_within_three_se(self):
        config = ModelConfig(400, 400, identity_spectrum(400), beta_law(1.0, 0.0))
        table = compare_ensembles_greenfn(config, UNIFORM_EDGE, "identity", [UNIFORM_EDGE], pairs=500)
        self.assertTrue(table["within_3se"].all())


if __name__ == '__main__':
    unittest.main()
