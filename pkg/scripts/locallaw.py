"""
Resolvents of S = Y Y* and of the companion matrix Y* Y, deterministic
profiles, and Monte-Carlo checks of the entrywise and averaged local laws.
"""
import logging
import math
from dataclasses import dataclass
from typing import Callable, Dict, Optional, Sequence, Union

import numpy as np
import pandas as pd
from scipy import linalg

from spectral_model import ModelConfig
from selfconsistent import DEFAULT_MAX_ITER, DEFAULT_TOL, StieltjesTriple, solve_system
from ensemble import ELLIPTICAL, GAUSSIAN, HYBRID, data_matrix, sample_radial, trial_rng
from utils.run_utils import ComputationError, DomainError

DEFAULT_C_LEFT_FRACTION = 0.5
DEFAULT_C_RIGHT = 1.0
DEFAULT_EPSILON_E = 0.1
SLACK_EXPONENT = 0.1
WARD_TOLERANCE = 1e-10
PASS_RATE = 0.95
DOMAIN_D = "D"
DOMAIN_D0 = "D0"

GREEN_FUNCTIONALS: Dict[str, Callable[[np.ndarray], np.ndarray]] = {
    "identity": lambda x: x,
    "logistic": lambda x: 1.0 / (1.0 + np.exp(-x)),
}


class ConditioningError(ComputationError):
    """Exception for a spectral parameter too close to the spectrum."""

    def __init__(self, message: str, z: complex, distance: float):
        super().__init__(message)
        self.z = z
        self.distance = distance


@dataclass(frozen=True)
class SpectralDomain:
    c_left: float
    C_right: float
    epsilon_e: float
    lambda_plus: float
    kind: str = DOMAIN_D

    def contains(self, z: complex, p: int) -> bool:
        z = complex(z)
        if not (self.lambda_plus - self.c_left <= z.real <= self.lambda_plus + self.C_right):
            return False
        if self.kind == DOMAIN_D:
            return p ** (-1.0 + self.epsilon_e) <= z.imag <= self.C_right
        return 0.0 < z.imag <= self.C_right

    def kappa(self, z: complex) -> float:
        return abs(complex(z).real - self.lambda_plus)


@dataclass
class ResolventPair:
    z: complex
    G: np.ndarray
    calG: np.ndarray
    m: complex
    m1: complex
    m2: complex


def default_domain(lambda_plus: float, kind: str = DOMAIN_D) -> SpectralDomain:
    return SpectralDomain(DEFAULT_C_LEFT_FRACTION * lambda_plus, DEFAULT_C_RIGHT, DEFAULT_EPSILON_E,
                          lambda_plus, kind)


def domain_grid(domain: SpectralDomain, p: int, n_energy: int = 5, n_eta: int = 4) -> np.ndarray:
    """Tensor grid of energies and geometric etas inside the domain."""
    energies = np.linspace(domain.lambda_plus - domain.c_left, domain.lambda_plus + domain.C_right, n_energy)
    eta_min = p ** (-1.0 + domain.epsilon_e) if domain.kind == DOMAIN_D else 1e-3 / p
    etas = np.geomspace(eta_min, domain.C_right, n_eta)
    return (energies[:, None] + 1j * etas[None, :]).ravel()


def _resolvent(matrix: np.ndarray, z: complex) -> np.ndarray:
    size = matrix.shape[0]
    if z.imag < 1e-12:
        eigs = linalg.eigvalsh(matrix)
        distance = float(np.min(np.abs(eigs - z)))
        if distance < 1e-12:
            logging.error(f"Resolvent at z={z} is singular (distance {distance:.2e})")
            raise ConditioningError(f"z={z} lies on the spectrum", z, distance)
    return linalg.solve(matrix - z * np.eye(size), np.eye(size), assume_a="sym")


def resolvent_pair(config: ModelConfig, xi_squared: Sequence[float], Y: np.ndarray, z: complex) -> ResolventPair:
    """
    G = (S - z)^-1 and calG = (Y* Y - z)^-1 with the traces

        m = p^-1 tr G,  m1 = p^-1 tr(G Sigma),  m2 = p^-1 sum_j xi_j^2 calG_jj.

    Raises:
        DomainError: If Im z <= 0
        ConditioningError: If z is numerically on the spectrum
    """
    z = complex(z)
    if z.imag <= 0:
        raise DomainError(f"Spectral parameter must satisfy Im z > 0, got {z}.")
    xi = np.asarray(xi_squared, dtype=float)
    sigmas = config.spectrum.array
    G = _resolvent(Y @ Y.T, z)
    calG = _resolvent(Y.T @ Y, z)
    p = config.p
    m = np.trace(G) / p
    m1 = np.sum(sigmas * np.diag(G)) / p
    m2 = np.sum(xi * np.diag(calG)) / p
    return ResolventPair(z, G, calG, complex(m), complex(m1), complex(m2))


def profile_Pi2(config: ModelConfig, xi_squared: Sequence[float], z: complex,
                triple: Optional[StieltjesTriple] = None) -> np.ndarray:
    """Diagonal of Pi_2(z) = -z^-1 (1 + m1n(z) D^2)^-1."""
    xi = np.asarray(xi_squared, dtype=float)
    if triple is None:
        triple = solve_system(config, xi, z)
    z = complex(z)
    return -1.0 / (z * (1.0 + triple.m1 * xi))


def profile_Pi1(config: ModelConfig, xi_squared: Sequence[float], z: complex,
                triple: Optional[StieltjesTriple] = None) -> np.ndarray:
    """Diagonal of Pi_1(z) = -(1 + m2n(z) Sigma)^-1; m_n = tr Pi_1 / (z p)."""
    if triple is None:
        triple = solve_system(config, np.asarray(xi_squared, dtype=float), z)
    return -1.0 / (1.0 + triple.m2 * config.spectrum.array)


def ward_defects(pair: ResolventPair, sigmas: Sequence[float]) -> Dict[str, float]:
    """
    Relative defects of the three Ward identities:

        sum_mu |calG_nu,mu|^2 = Im calG_nu,nu / eta,
        sum_i |H_ji|^2 = (|z|^2 / eta) Im(H_jj / z) with H = z G,
        ||G Sigma||_F^2 = Im tr(G Sigma^2) / eta.
    """
    z = pair.z
    eta = z.imag
    sigmas = np.asarray(sigmas, dtype=float)

    lhs = np.sum(np.abs(pair.calG) ** 2, axis=1)
    rhs = np.diag(pair.calG).imag / eta
    calg_defect = float(np.max(np.abs(lhs - rhs) / np.maximum(1.0, np.abs(rhs))))

    H = z * pair.G
    lhs = np.sum(np.abs(H) ** 2, axis=1)
    rhs = abs(z) ** 2 / eta * (np.diag(H) / z).imag
    g_defect = float(np.max(np.abs(lhs - rhs) / np.maximum(1.0, np.abs(rhs))))

    lhs = float(np.sum(np.abs(pair.G * sigmas[None, :]) ** 2))
    rhs = float(np.sum(np.diag(pair.G) * sigmas ** 2).imag / eta)
    frob_defect = abs(lhs - rhs) / max(1.0, abs(rhs))
    return {"calG": calg_defect, "G": g_defect, "frobenius": frob_defect}


def minor_shift(config: ModelConfig, xi_squared: Sequence[float], Y: np.ndarray, z: complex, index: int) -> float:
    """|m1 - m1^(i)| after deleting column `index` of Y."""
    z = complex(z)
    sigmas = config.spectrum.array
    full = _resolvent(Y @ Y.T, z)
    Y_minor = np.delete(Y, index, axis=1)
    minor = _resolvent(Y_minor @ Y_minor.T, z)
    p = config.p
    return float(abs(np.sum(sigmas * np.diag(full)) - np.sum(sigmas * np.diag(minor))) / p)


def _slack(n: int) -> float:
    return n ** SLACK_EXPONENT


def verify_entrywise(config: ModelConfig, xi_squared: Sequence[float], Y: np.ndarray,
                     z_grid: Sequence[complex], tol: float = DEFAULT_TOL,
                     max_iter: int = DEFAULT_MAX_ITER) -> pd.DataFrame:
    """
    Entrywise comparison of calG with Pi_2.

    bound = sqrt(Im m1n / (p eta)) + 1 / (p eta); a point passes when
    max |calG - Pi_2| / bound <= n^0.1. `ward_max` is the largest Ward
    defect of the resolvents built at that point.
    """
    xi = np.asarray(xi_squared, dtype=float)
    p, n = config.p, config.n
    sigmas = config.spectrum.array
    rows = []
    initial = None
    for z in z_grid:
        z = complex(z)
        triple = solve_system(config, xi, z, tol=tol, max_iter=max_iter, initial=initial)
        initial = triple.m1
        pair = resolvent_pair(config, xi, Y, z)
        error = pair.calG.copy()
        error[np.diag_indices_from(error)] -= profile_Pi2(config, xi, z, triple)
        off = pair.calG.copy()
        np.fill_diagonal(off, 0.0)
        bound = math.sqrt(max(triple.m1.imag, 0.0) / (p * z.imag)) + 1.0 / (p * z.imag)
        statistic = float(np.max(np.abs(error)))
        ratio = statistic / bound
        rows.append({
            "z_re": z.real,
            "z_im": z.imag,
            "statistic": statistic,
            "offdiag_max": float(np.max(np.abs(off))),
            "bound": bound,
            "ratio": ratio,
            "pass": bool(ratio <= _slack(n)),
            "ward_max": max(ward_defects(pair, sigmas).values()),
        })
    return pd.DataFrame(rows)


def verify_averaged(config: ModelConfig, xi_squared: Sequence[float], Y: np.ndarray,
                    z_grid: Sequence[complex], lambda_plus: Optional[float] = None,
                    tol: float = DEFAULT_TOL, max_iter: int = DEFAULT_MAX_ITER) -> pd.DataFrame:
    """
    Averaged comparison |m1 - m1n| + |m - mn| against 1 / (p eta) and, for
    E >= lambda_plus, against 1 / (p (kappa + eta)) + 1 / ((p eta)^2 sqrt(kappa + eta)).
    Both ratios must stay below n^0.1.
    """
    xi = np.asarray(xi_squared, dtype=float)
    p, n = config.p, config.n
    sigmas = config.spectrum.array
    rows = []
    initial = None
    for z in z_grid:
        z = complex(z)
        triple = solve_system(config, xi, z, tol=tol, max_iter=max_iter, initial=initial)
        initial = triple.m1
        pair = resolvent_pair(config, xi, Y, z)
        statistic = abs(pair.m1 - triple.m1) + abs(pair.m - triple.m)
        eta = z.imag
        bound = 1.0 / (p * eta)
        ratio = statistic / bound
        outside_bound = float("nan")
        outside_ratio = float("nan")
        if lambda_plus is not None and z.real >= lambda_plus:
            kappa = z.real - lambda_plus
            outside_bound = 1.0 / (p * (kappa + eta)) + 1.0 / ((p * eta) ** 2 * math.sqrt(kappa + eta))
            outside_ratio = statistic / outside_bound
        passed = ratio <= _slack(n) and (math.isnan(outside_ratio) or outside_ratio <= _slack(n))
        rows.append({
            "z_re": z.real,
            "z_im": eta,
            "statistic": statistic,
            "bound": bound,
            "ratio": ratio,
            "outside_bound": outside_bound,
            "outside_ratio": outside_ratio,
            "pass": bool(passed),
            "ward_max": max(ward_defects(pair, sigmas).values()),
        })
    return pd.DataFrame(rows)


@dataclass
class LocalLawStudy:
    """Entrywise and averaged tables over many seeds, stacked with a seed_index column."""
    entrywise: pd.DataFrame
    averaged: pd.DataFrame

    @property
    def entrywise_rate(self) -> float:
        return float(self.entrywise["pass"].mean())

    @property
    def averaged_rate(self) -> float:
        return float(self.averaged["pass"].mean())

    @property
    def ward_max(self) -> float:
        return float(max(self.entrywise["ward_max"].max(), self.averaged["ward_max"].max()))

    @property
    def passed(self) -> bool:
        return (self.ward_max <= WARD_TOLERANCE and self.entrywise_rate >= PASS_RATE
                and self.averaged_rate >= PASS_RATE)

    def to_dict(self) -> Dict[str, float]:
        return {
            "entrywise_rate": self.entrywise_rate,
            "averaged_rate": self.averaged_rate,
            "entrywise_max_ratio": float(self.entrywise["ratio"].max()),
            "averaged_max_ratio": float(self.averaged["ratio"].max()),
            "ward_max": self.ward_max,
            "passed": self.passed,
        }


def local_law_study(config: ModelConfig, domain: SpectralDomain, seeds: int, seed_base: int = 0,
                    n_energy: int = 5, n_eta: int = 4, tol: float = DEFAULT_TOL,
                    max_iter: int = DEFAULT_MAX_ITER) -> LocalLawStudy:
    """
    Run both local-law checks on the domain grid for `seeds` elliptical draws.

    Every resolvent built along the way contributes its Ward defect, so
    `ward_max` covers all of them.
    """
    grid = domain_grid(domain, config.p, n_energy, n_eta)
    entry_frames, avg_frames = [], []
    for index in range(seeds):
        streams = trial_rng(seed_base, index)
        xi = sample_radial(config.radial, config.n, streams.realization)
        Y = data_matrix(config, xi, streams.elliptical, ELLIPTICAL)
        entry = verify_entrywise(config, xi, Y, grid, tol=tol, max_iter=max_iter)
        avg = verify_averaged(config, xi, Y, grid, domain.lambda_plus, tol=tol, max_iter=max_iter)
        entry["seed_index"] = index
        avg["seed_index"] = index
        entry_frames.append(entry)
        avg_frames.append(avg)
    study = LocalLawStudy(pd.concat(entry_frames, ignore_index=True), pd.concat(avg_frames, ignore_index=True))
    logging.info(f"Local law over {seeds} seeds: entrywise {study.entrywise_rate:.3f}, "
                 f"averaged {study.averaged_rate:.3f}, Ward defect {study.ward_max:.2e}")
    return study


def _gram_spectrum(Y: np.ndarray) -> np.ndarray:
    """All p eigenvalues of Y Y*, from the smaller Gram matrix plus zeros."""
    p, n = Y.shape
    if n < p:
        eigs = linalg.eigvalsh(Y.T @ Y)
        return np.concatenate([eigs, np.zeros(p - n)])
    return linalg.eigvalsh(Y @ Y.T)


def _resolve_functional(F: Union[str, Callable]) -> Callable:
    if callable(F):
        return F
    if F not in GREEN_FUNCTIONALS:
        raise ValueError(f"F must be callable or one of {sorted(GREEN_FUNCTIONALS)}.")
    return GREEN_FUNCTIONALS[F]


def _edge_observables(eigs: np.ndarray, energies: np.ndarray, eta0: float, e_right: float, n: int):
    """n eta0 Im m(E + i eta0) and n times its integral over [E, e_right]."""
    p = eigs.size
    diff = eigs[None, :] - energies[:, None]
    im_m = np.sum(eta0 / (diff ** 2 + eta0 ** 2), axis=1) / p
    integral = np.sum(np.arctan((e_right - eigs)[None, :] / eta0) - np.arctan(-diff / eta0), axis=1) / p
    return n * eta0 * im_m, n * integral


def compare_ensembles_greenfn(config: ModelConfig, lambda_plus: float, F: Union[str, Callable],
                              energies: Sequence[float], pairs: int, seed_base: int = 0,
                              epsilon: float = 0.05, xi_squared: Optional[Sequence[float]] = None) -> pd.DataFrame:
    """
    Paired Monte-Carlo estimate of E F(n eta0 Im m(E + i eta0)) under
    elliptical and Gaussian W, with eta0 = n^(-2/3 - epsilon).

    Each pair shares one realization of D (resampled per pair unless
    xi_squared is given). The integrated variant applies F to
    n * int_E^{E2} Im m(y + i eta0) dy with E2 = lambda_plus + 2 n^(-2/3 + epsilon).

    Returns:
        DataFrame per energy with both means, the paired difference, its
        standard error, and whether |difference| <= 3 SE
    """
    func = _resolve_functional(F)
    n = config.n
    eta0 = n ** (-2.0 / 3.0 - epsilon)
    e_right = lambda_plus + 2.0 * n ** (-2.0 / 3.0 + epsilon)
    energies = np.asarray(energies, dtype=float)
    ell = np.empty((pairs, energies.size))
    gau = np.empty((pairs, energies.size))
    ell_int = np.empty((pairs, energies.size))
    gau_int = np.empty((pairs, energies.size))
    for index in range(pairs):
        streams = trial_rng(seed_base, index)
        xi = np.asarray(xi_squared, dtype=float) if xi_squared is not None \
            else sample_radial(config.radial, n, streams.realization)
        for kind, rng, point, integ in ((ELLIPTICAL, streams.elliptical, ell, ell_int),
                                        (GAUSSIAN, streams.gaussian, gau, gau_int)):
            eigs = _gram_spectrum(data_matrix(config, xi, rng, kind))
            local, integrated = _edge_observables(eigs, energies, eta0, e_right, n)
            point[index] = func(local)
            integ[index] = func(integrated)

    def summary(a, b):
        diff = a - b
        se = diff.std(axis=0, ddof=1) / math.sqrt(pairs) if pairs > 1 else np.zeros(energies.size)
        return a.mean(axis=0), b.mean(axis=0), diff.mean(axis=0), se

    mean_e, mean_g, diff, se = summary(ell, gau)
    _, _, diff_int, se_int = summary(ell_int, gau_int)
    logging.info(f"Green-function comparison over {pairs} pairs at {energies.size} energies")
    return pd.DataFrame({
        "E": energies,
        "eta0": eta0,
        "mean_elliptical": mean_e,
        "mean_gaussian": mean_g,
        "difference": diff,
        "se": se,
        "integrated_difference": diff_int,
        "integrated_se": se_int,
        "within_3se": np.abs(diff) <= 3.0 * se,
    })


def lindeberg_path(config: ModelConfig, F: Union[str, Callable], energy: float, gammas: Sequence[int],
                   pairs: int, seed_base: int = 0, epsilon: float = 0.05) -> pd.DataFrame:
    """
    E F(n eta0 Im m(E + i eta0)) along the hybrid ensembles W_gamma, where
    the first gamma columns are Gaussian and the rest uniform on the sphere.
    """
    func = _resolve_functional(F)
    n = config.n
    eta0 = n ** (-2.0 / 3.0 - epsilon)
    rows = []
    for gamma in gammas:
        values = np.empty(pairs)
        for index in range(pairs):
            streams = trial_rng(seed_base, index)
            xi = sample_radial(config.radial, n, streams.realization)
            Y = data_matrix(config, xi, streams.elliptical, HYBRID, int(gamma))
            local, _ = _edge_observables(_gram_spectrum(Y), np.array([energy]), eta0, energy, n)
            values[index] = func(local)[0]
        se = values.std(ddof=1) / math.sqrt(pairs) if pairs > 1 else 0.0
        rows.append({"gamma": int(gamma), "mean": float(values.mean()), "se": float(se)})
    return pd.DataFrame(rows)
