import os
import sys
import tempfile
import unittest

import numpy as np
from numpy import testing

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "scripts"))

from spectral_model import (
    ModelConfig, PopulationSpectrum, beta_law, identity_spectrum, point_mass_law, radial_cdf,
    radial_moment, radial_tail, spectrum_from_file, tail_exponent, two_atom_spectrum, validate
)
from utils.run_utils import InvalidStateError
from spectral_model import RadialLaw, EMPIRICAL


class ValidateTest(unittest.TestCase):
    def test_valid_identity(self):
        config = ModelConfig(200, 200, identity_spectrum(200), beta_law(1.0, 0.0), tau=0.1)
        self.assertEqual(validate(config), [])

    def test_unsorted_spectrum(self):
        config = ModelConfig(3, 3, PopulationSpectrum((2.0, 3.0, 1.0)), beta_law(), tau=0.1)
        self.assertEqual(validate(config), ["spectrum not nonincreasing at index 1"])

    def test_aspect_ratio_too_large(self):
        config = ModelConfig(1000, 10, identity_spectrum(1000), beta_law(), tau=0.1)
        self.assertEqual(validate(config), ["φ=100 exceeds τ⁻¹=10"])

    def test_aspect_ratio_too_small(self):
        config = ModelConfig(10, 1000, identity_spectrum(10), beta_law(), tau=0.1)
        violations = validate(config)
        self.assertEqual(len(violations), 1)
        self.assertIn("below τ", violations[0])

    def test_sigma_bounds(self):
        config = ModelConfig(2, 2, PopulationSpectrum((50.0, 0.001)), beta_law(), tau=0.1)
        violations = validate(config)
        self.assertEqual(len(violations), 2)

    def test_point_masses_outside_support(self):
        law = point_mass_law([0.5, 2.0], l=1.0)
        config = ModelConfig(2, 2, identity_spectrum(2), law, tau=0.1)
        self.assertEqual(validate(config), ["point masses outside (0, l=1]"])

    def test_scaled_and_resized(self):
        config = ModelConfig(40, 80, two_atom_spectrum(40, 2.0, 1.0, 0.25), beta_law())
        scaled = config.scaled(3.0)
        testing.assert_allclose(scaled.spectrum.array, 3.0 * config.spectrum.array)
        resized = config.resized(160)
        self.assertEqual((resized.p, resized.n), (80, 160))
        self.assertAlmostEqual(np.mean(resized.spectrum.array == 2.0), 0.25)


class SpectrumTest(unittest.TestCase):
    def test_two_atom(self):
        spectrum = two_atom_spectrum(10, 2.0, 1.0, 0.3)
        self.assertEqual(spectrum.sigmas, (2.0, 2.0, 2.0) + (1.0,) * 7)

    def test_bad_arguments(self):
        with self.assertRaises(ValueError):
            identity_spectrum(0)
        with self.assertRaises(ValueError):
            two_atom_spectrum(10, 1.0, 2.0, 0.5)

    def test_from_file_sorted_and_tiled(self):
        with tempfile.TemporaryDirectory() as folder:
            path = os.path.join(folder, "sigmas.txt")
            with open(path, "w") as f:
                f.write("1.0\n3.0\n2.0\n")
            spectrum = spectrum_from_file(path)
            self.assertEqual(spectrum.sigmas, (3.0, 2.0, 1.0))
            tiled = spectrum_from_file(path, p=6)
            self.assertEqual(tiled.p, 6)
            self.assertEqual(tiled.sigmas[0], 3.0)
            self.assertEqual(tiled.sigmas[-1], 1.0)


class RadialLawTest(unittest.TestCase):
    def test_uniform_cdf(self):
        law = beta_law(1.0, 0.0)
        self.assertAlmostEqual(radial_cdf(law, 0.5), 0.5, places=12)
        self.assertEqual(radial_cdf(law, 1.0), 1.0)
        self.assertEqual(radial_cdf(law, 0.0), 0.0)

    def test_cdf_general_b(self):
        law = beta_law(2.0, 1.5, 2.5)
        xs = np.linspace(0.1, 1.9, 7)
        cdf = np.array([radial_cdf(law, x) for x in xs])
        tail = np.array([radial_tail(law, 2.0 - x) for x in xs])
        testing.assert_allclose(cdf + tail, 1.0, atol=1e-12)
        self.assertTrue(np.all(np.diff(cdf) > 0))

    def test_tail_exponent(self):
        for d in (0.0, 0.5, 1.0, 2.0):
            law = beta_law(1.0, d, 1.7)
            self.assertAlmostEqual(tail_exponent(law), d + 1.0, delta=0.05)

    def test_moments(self):
        law = beta_law(1.0, 0.0, 1.0)
        self.assertAlmostEqual(radial_moment(law, 1.0), 0.5, places=12)
        self.assertAlmostEqual(radial_moment(law, 2.0), 1.0 / 3.0, places=12)
        law = beta_law(3.0, 2.0, 1.0)
        # xi^2 = 3 (1 - B) with B ~ Beta(3, 1): E xi^2 = 3 / 4
        self.assertAlmostEqual(radial_moment(law, 1.0), 0.75, places=12)

    def test_point_mass_law(self):
        law = point_mass_law([0.25, 0.5, 1.0])
        self.assertEqual(law.l, 1.0)
        self.assertAlmostEqual(radial_cdf(law, 0.5), 2.0 / 3.0)
        self.assertAlmostEqual(radial_moment(law, 1.0), 1.75 / 3.0)

    def test_mass_array_without_masses(self):
        law = RadialLaw(l=1.0, kind=EMPIRICAL)
        with self.assertRaises(InvalidStateError):
            _ = law.mass_array

    def test_bad_beta_parameters(self):
        with self.assertRaises(ValueError):
            beta_law(0.0)
        with self.assertRaises(ValueError):
            beta_law(1.0, -1.0)
        with self.assertRaises(ValueError):
            beta_law(1.0, 0.0, 0.0)


if __name__ == '__main__':
    unittest.main()
