"""
Model inputs for elliptical sample covariance matrices.

The data are y_i = xi_i * T * u_i with u_i uniform on the unit sphere,
T^T T = Sigma = diag(sigma_1 >= ... >= sigma_p) and xi_i^2 i.i.d. on (0, l].
The parametric radial family is xi^2 = l * (1 - B) with B ~ Beta(d + 1, b),
so P(l - xi^2 <= x) behaves like x^(d + 1) near the edge.
"""
import logging
import math
from dataclasses import dataclass, replace
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy import stats
from scipy.special import betaln

from utils.run_utils import InvalidStateError, check_finite

DEFAULT_TAU = 0.05

PARAMETRIC = "beta"
EMPIRICAL = "point_mass"


@dataclass(frozen=True)
class PopulationSpectrum:
    """Population eigenvalues sigma_1 >= ... >= sigma_p of Sigma."""
    sigmas: Tuple[float, ...]

    @property
    def array(self) -> np.ndarray:
        return np.asarray(self.sigmas, dtype=float)

    @property
    def p(self) -> int:
        return len(self.sigmas)


@dataclass(frozen=True)
class RadialLaw:
    """
    Law of xi^2.

    kind == "beta": xi^2 = l * (1 - B), B ~ Beta(d + 1, b).
    kind == "point_mass": uniform weights on `masses` (a sampled realization
    or a degenerate law such as xi^2 = 1). `d` is then the nominal edge
    exponent of the law the masses represent.
    """
    l: float
    d: float = 0.0
    b: float = 1.0
    kind: str = PARAMETRIC
    masses: Optional[Tuple[float, ...]] = None

    @property
    def is_parametric(self) -> bool:
        return self.kind == PARAMETRIC

    @property
    def mass_array(self) -> np.ndarray:
        if self.masses is None:
            raise InvalidStateError("Empirical radial law has no point masses.")
        return np.asarray(self.masses, dtype=float)


@dataclass(frozen=True)
class ModelConfig:
    p: int
    n: int
    spectrum: PopulationSpectrum
    radial: RadialLaw
    tau: float = DEFAULT_TAU

    @property
    def phi(self) -> float:
        return self.p / self.n

    @property
    def phi_inv(self) -> float:
        return self.n / self.p

    def scaled(self, c: float) -> "ModelConfig":
        """Return the config with Sigma replaced by c * Sigma."""
        return replace(self, spectrum=PopulationSpectrum(tuple(float(c) * s for s in self.spectrum.sigmas)))

    def with_radial(self, radial: RadialLaw) -> "ModelConfig":
        return replace(self, radial=radial)

    def resized(self, n: int) -> "ModelConfig":
        """
        Same model at sample size n with the aspect ratio kept; the spectrum
        is resampled by quantile so its profile is unchanged.
        """
        p = max(1, int(round(n * self.phi)))
        sigmas = self.spectrum.array
        idx = np.floor(np.arange(p) * sigmas.size / p).astype(int)
        return replace(self, p=p, n=int(n), spectrum=PopulationSpectrum(tuple(sigmas[idx].tolist())))


def identity_spectrum(p: int) -> PopulationSpectrum:
    if not (isinstance(p, int) and p > 0):
        raise ValueError("p must be a positive integer.")
    return PopulationSpectrum(tuple([1.0] * p))


def two_atom_spectrum(p: int, high: float, low: float, weight: float) -> PopulationSpectrum:
    """
    Spectrum with round(weight * p) eigenvalues at `high` and the rest at `low`.

    Args:
        p: Dimension
        high: Larger atom
        low: Smaller atom
        weight: Fraction of eigenvalues placed at `high`, in [0, 1]
    """
    if not (isinstance(p, int) and p > 0):
        raise ValueError("p must be a positive integer.")
    if not (0.0 <= weight <= 1.0):
        raise ValueError("weight must be in [0, 1].")
    if high < low:
        raise ValueError("high must be >= low.")
    n_high = int(round(weight * p))
    return PopulationSpectrum(tuple([float(high)] * n_high + [float(low)] * (p - n_high)))


def spectrum_from_file(path: str, p: Optional[int] = None) -> PopulationSpectrum:
    """
    Read whitespace- or newline-separated eigenvalues and sort them decreasingly.

    When p is given and the file holds fewer values, the file is treated as a
    profile and tiled in blocks; when it holds exactly p values they are used
    as they are.
    """
    values = check_finite(np.loadtxt(path, dtype=float, ndmin=1), "spectrum")
    if values.size == 0:
        raise ValueError(f"Spectrum file is empty: {path}")
    if p is not None and values.size != p:
        reps = int(math.ceil(p / values.size))
        values = np.repeat(values, reps)[:p]
    return PopulationSpectrum(tuple(np.sort(values)[::-1].tolist()))


def beta_law(l: float = 1.0, d: float = 0.0, b: float = 1.0) -> RadialLaw:
    if not l > 0:
        raise ValueError("l must be positive.")
    if not d > -1:
        raise ValueError("d must be greater than -1.")
    if not b > 0:
        raise ValueError("b must be positive.")
    return RadialLaw(l=float(l), d=float(d), b=float(b), kind=PARAMETRIC)


def point_mass_law(masses: Sequence[float], l: Optional[float] = None, d: float = 0.0) -> RadialLaw:
    """
    Law with equal weights on the given atoms.

    Args:
        masses: Atoms (e.g. a realization xi_1^2, ..., xi_n^2)
        l: Support bound; defaults to the largest atom
        d: Nominal edge exponent carried along for regularity bookkeeping
    """
    arr = np.asarray(masses, dtype=float).ravel()
    if arr.size == 0:
        raise ValueError("masses must be non-empty.")
    bound = float(arr.max()) if l is None else float(l)
    return RadialLaw(l=bound, d=float(d), b=1.0, kind=EMPIRICAL, masses=tuple(arr.tolist()))


def validate(config: ModelConfig) -> List[str]:
    """
    List every violated model assumption, with the offending value.

    Returns:
        Violation descriptions; empty when the config is valid
    """
    violations = []
    tau = config.tau
    if not (0.0 < tau < 1.0):
        violations.append(f"tau={tau} not in (0, 1)")
        return violations
    if config.p < 1 or config.n < 1:
        violations.append(f"p={config.p}, n={config.n} must be positive")
        return violations

    sigmas = config.spectrum.array
    if sigmas.size != config.p:
        violations.append(f"spectrum has {sigmas.size} entries but p={config.p}")
    for i in range(1, sigmas.size):
        if sigmas[i] > sigmas[i - 1]:
            violations.append(f"spectrum not nonincreasing at index {i}")
            break
    if sigmas.size and sigmas.min() < tau:
        violations.append(f"sigma_p={sigmas.min():g} below tau={tau:g}")
    if sigmas.size and sigmas.max() > 1.0 / tau:
        violations.append(f"sigma_1={sigmas.max():g} exceeds tau^-1={1.0 / tau:g}")

    phi = config.phi
    if phi < tau:
        violations.append(f"φ={phi:g} below τ={tau:g}")
    if phi > 1.0 / tau:
        violations.append(f"φ={phi:g} exceeds τ⁻¹={1.0 / tau:g}")

    law = config.radial
    if not law.l > 0:
        violations.append(f"l={law.l} must be positive")
    if not law.d > -1:
        violations.append(f"d={law.d} must exceed -1")
    if law.is_parametric:
        if not law.b > 0:
            violations.append(f"b={law.b} must be positive")
    elif law.masses is not None:
        masses = law.mass_array
        if masses.min() <= 0 or masses.max() > law.l:
            violations.append(f"point masses outside (0, l={law.l:g}]")
    return violations


def radial_cdf(law: RadialLaw, x: float) -> float:
    """
    F(x) = P(xi^2 <= x).

    Raises:
        InvalidStateError: For an empirical law without point masses
    """
    if not law.is_parametric:
        masses = law.mass_array
        return float(np.count_nonzero(masses <= x)) / masses.size
    if x <= 0:
        return 0.0
    if x >= law.l:
        return 1.0
    # xi^2 <= x  <=>  B >= 1 - x / l
    if law.b == 1.0:
        return float(1.0 - (1.0 - x / law.l) ** (law.d + 1.0))
    return float(stats.beta.sf(1.0 - x / law.l, law.d + 1.0, law.b))


def radial_tail(law: RadialLaw, x: float) -> float:
    """P(l - xi^2 <= x), computed without cancellation for small x."""
    if not law.is_parametric:
        masses = law.mass_array
        return float(np.count_nonzero(law.l - masses <= x)) / masses.size
    if x <= 0:
        return 0.0
    if x >= law.l:
        return 1.0
    if law.b == 1.0:
        return float((x / law.l) ** (law.d + 1.0))
    return float(stats.beta.cdf(x / law.l, law.d + 1.0, law.b))


def radial_moment(law: RadialLaw, k: float) -> float:
    """E[(xi^2)^k]; closed form l^k B(d+1, b+k) / B(d+1, b) for the beta family."""
    if not law.is_parametric:
        return float(np.mean(law.mass_array ** k))
    return float(law.l ** k * math.exp(betaln(law.d + 1.0, law.b + k) - betaln(law.d + 1.0, law.b)))


def tail_exponent(law: RadialLaw, xs: Sequence[float] = (1e-2, 1e-3, 1e-4)) -> float:
    """
    Fit the edge exponent of P(l - xi^2 <= x) by log-log regression.

    Returns:
        The fitted slope, which should be close to d + 1
    """
    xs = np.asarray(xs, dtype=float) * law.l
    tails = np.array([radial_tail(law, x) for x in xs])
    if np.any(tails <= 0):
        raise InvalidStateError("Tail probability vanishes on the fitting grid.")
    slope, _ = np.polyfit(np.log(xs), np.log(tails), 1)
    logging.debug(f"Tail exponent fit: {slope:.4f} (d + 1 = {law.d + 1:.4f})")
    return float(slope)
