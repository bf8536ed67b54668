"""
Monte-Carlo sampling of the elliptical model Q = T U D^2 U* T* and of the
Gaussian comparison ensemble Q^G = T Z D^2 Z* T*.
"""
import logging
import math
from dataclasses import dataclass
from typing import Dict, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy import linalg

from spectral_model import ModelConfig, RadialLaw
from selfconsistent import DEFAULT_MAX_ITER, DEFAULT_TOL, SystemKernel, resolve_law
from edge import EdgeReport, find_edge
from utils.run_utils import ComputationError, SolverError

ELLIPTICAL = "elliptical"
GAUSSIAN = "gaussian"
HYBRID = "hybrid"
ENSEMBLES = (ELLIPTICAL, GAUSSIAN)

DEFAULT_OMEGA_C = 1.0
DEFAULT_OMEGA_EPSILON = 0.05
OMEGA_GRID_POINTS = 20


@dataclass(frozen=True)
class OmegaReport:
    gap1: float
    spacing: float
    gap1_pass: bool
    spacing_pass: bool
    lln_pass: Optional[bool]
    lln_sup_error: float
    lln_bound: float = float("nan")
    failed_points: Tuple[complex, ...] = ()

    @property
    def lln_evaluated(self) -> bool:
        return self.lln_pass is not None

    @property
    def passed(self) -> bool:
        """True when no evaluated condition fails; see lln_evaluated for partial checks."""
        return self.gap1_pass and self.spacing_pass and self.lln_pass is not False


@dataclass
class Realization:
    xi_squared: np.ndarray
    seed: Optional[Tuple[int, ...]] = None
    omega: Optional[OmegaReport] = None


@dataclass
class TrialRecord:
    index: int
    seed: Tuple[int, int]
    top_eigs_Q: np.ndarray
    top_eigs_QG: np.ndarray
    lambda_plus: float
    gamma0: float
    rescaled_stat: float
    rescaled_stat_gaussian: float
    omega_pass: bool
    excluded: bool = False

    def to_row(self) -> Dict[str, object]:
        return {
            "seed": f"{self.seed[0]}:{self.seed[1]}",
            "trial": self.index,
            "lambda1_Q": float(self.top_eigs_Q[0]) if len(self.top_eigs_Q) else float("nan"),
            "lambda1_QG": float(self.top_eigs_QG[0]) if len(self.top_eigs_QG) else float("nan"),
            "lambda_plus": self.lambda_plus,
            "gamma0": self.gamma0,
            "rescaled_stat": self.rescaled_stat,
            "rescaled_stat_gaussian": self.rescaled_stat_gaussian,
            "omega_pass": self.omega_pass,
            "excluded": self.excluded,
        }


@dataclass
class TrialStreams:
    """Independent per-trial generators derived from (seed_base, index)."""
    realization: np.random.Generator
    elliptical: np.random.Generator
    gaussian: np.random.Generator


def trial_rng(seed_base: int, index: int) -> TrialStreams:
    """
    Counter-based streams for one trial: the same (seed_base, index) gives
    the same draws whatever the order or process trials run in.
    """
    children = np.random.SeedSequence(seed_base, spawn_key=(index,)).spawn(3)
    streams = [np.random.Generator(np.random.Philox(child)) for child in children]
    return TrialStreams(*streams)


def sample_sphere(p: int, rng: np.random.Generator, size: Optional[int] = None) -> np.ndarray:
    """
    Uniform draw(s) on the unit sphere in R^p, as normalised Gaussian vectors.

    Returns:
        Shape (p,) for size=None, else (size, p)
    """
    if not (isinstance(p, (int, np.integer)) and p >= 1):
        raise ValueError("p must be a positive integer.")
    shape = (p,) if size is None else (size, p)
    g = rng.standard_normal(shape)
    return g / np.linalg.norm(g, axis=-1, keepdims=True)


def sample_radial(law: RadialLaw, n: int, rng: np.random.Generator) -> np.ndarray:
    """
    n i.i.d. draws of xi^2.

    xi^2 = l (1 - B) with B ~ Beta(d + 1, b); for b = 1 B = U^(1/(d+1)).
    Point-mass laws resample their atoms.
    """
    if not law.is_parametric:
        return rng.choice(law.mass_array, size=n, replace=True)
    if law.b == 1.0:
        beta = rng.random(n) ** (1.0 / (law.d + 1.0))
    else:
        beta = rng.beta(law.d + 1.0, law.b, size=n)
    xi = law.l * (1.0 - beta)
    return np.clip(xi, np.finfo(float).tiny, law.l)


def default_omega_grid(config: ModelConfig, edge: float, points: int = OMEGA_GRID_POINTS) -> np.ndarray:
    eta = config.n ** (-2.0 / 3.0)
    return np.linspace(edge - 0.5, edge + 0.5, points) + 1j * eta


def check_omega(config: ModelConfig, xi_squared: Sequence[float], z_grid: Optional[Sequence[complex]] = None,
                C: float = DEFAULT_OMEGA_C, epsilon: float = DEFAULT_OMEGA_EPSILON,
                check_lln: bool = True, edge: Optional[float] = None, tol: float = DEFAULT_TOL,
                max_iter: int = DEFAULT_MAX_ITER) -> OmegaReport:
    """
    Check the high-probability event on the radial realization.

    With r = n^(-1/(d+1)):
      gap1 = l - xi^2_(1) must lie in (r / log n, r log n),
      spacing = xi^2_(1) - xi^2_(2) must exceed r / log n,
      sup_z |n^-1 sum xi^2/(1 + xi^2 m1n) - int t/(1 + t m1n) dF(t)|
      must be at most C n^epsilon / sqrt(n), with m1n the realization's m1.

    Args:
        config: Model configuration
        xi_squared: Realization
        z_grid: Spectral parameters for the LLN term; defaults to 20 points
            on [edge - 0.5, edge + 0.5] + i n^(-2/3)
        C: Constant of the LLN bound
        epsilon: Exponent slack of the LLN bound
        check_lln: Skip the solver-backed LLN term when False; lln_pass is
            then None
        edge: Limiting edge for the default grid; computed when missing
        tol: Solver tolerance for the LLN term
        max_iter: Fixed-point iteration cap for the LLN term

    Returns:
        OmegaReport
    """
    xi = np.asarray(xi_squared, dtype=float).ravel()
    n = xi.size
    # two largest atoms, decreasing
    xi = np.partition(xi, n - 2)[n - 2:][::-1] if n > 1 else xi
    law = config.radial
    rate = n ** (-1.0 / (law.d + 1.0))
    log_n = math.log(n) if n > 1 else 1.0
    gap1 = law.l - xi[0]
    spacing = xi[0] - xi[1] if n > 1 else float("nan")
    gap1_pass = bool(rate / log_n < gap1 < rate * log_n)
    spacing_pass = bool(spacing > rate / log_n)

    bound = C * n ** epsilon / math.sqrt(n)
    if not check_lln:
        return OmegaReport(float(gap1), float(spacing), gap1_pass, spacing_pass, None, float("nan"), bound)

    if z_grid is None:
        if edge is None:
            edge = find_edge(config, None, "limiting").edge
        z_grid = default_omega_grid(config, edge)
    empirical = SystemKernel(config, resolve_law(config, xi_squared)[0])
    limiting = SystemKernel(config, law)
    sup_error = 0.0
    failed = []
    initial = None
    for z in z_grid:
        try:
            triple = empirical.solve(complex(z), tol=tol, max_iter=max_iter, initial=initial)
        except SolverError as e:
            logging.warning(f"Omega LLN solve failed at z={z}: {e}")
            failed.append(complex(z))
            continue
        initial = triple.m1
        # g / phi^-1 is the integral of t / (1 + t x) against the law
        diff = abs(empirical.g(triple.m1) - limiting.g(triple.m1)) / config.phi_inv
        sup_error = max(sup_error, float(diff))
    lln_pass = not failed and sup_error <= bound
    return OmegaReport(float(gap1), float(spacing), gap1_pass, spacing_pass, bool(lln_pass),
                       sup_error, bound, tuple(failed))


def sample_realization(config: ModelConfig, rng: np.random.Generator, check: bool = True,
                       check_lln: bool = True, z_grid: Optional[Sequence[complex]] = None,
                       edge: Optional[float] = None, seed: Optional[Tuple[int, ...]] = None,
                       C: float = DEFAULT_OMEGA_C, epsilon: float = DEFAULT_OMEGA_EPSILON,
                       tol: float = DEFAULT_TOL, max_iter: int = DEFAULT_MAX_ITER) -> Realization:
    """Draw xi^2 for n samples and, when `check` is set, attach its Omega report."""
    xi = sample_radial(config.radial, config.n, rng)
    omega = None
    if check:
        omega = check_omega(config, xi, z_grid, C=C, epsilon=epsilon, check_lln=check_lln, edge=edge,
                            tol=tol, max_iter=max_iter)
    return Realization(xi, seed, omega)


def mixing_matrix(p: int, n: int, rng: np.random.Generator, kind: str = ELLIPTICAL,
                  gamma: int = 0) -> np.ndarray:
    """
    The p x n matrix W: uniform sphere columns (elliptical), N(0, 1/p)
    entries (gaussian), or Gaussian in the first gamma columns and sphere
    in the rest (hybrid).
    """
    if kind == ELLIPTICAL:
        return sample_sphere(p, rng, size=n).T
    if kind == GAUSSIAN:
        return rng.standard_normal((p, n)) / math.sqrt(p)
    if kind == HYBRID:
        if not 0 <= gamma <= n:
            raise ValueError("gamma must be in [0, n].")
        w = np.empty((p, n))
        w[:, :gamma] = rng.standard_normal((p, gamma)) / math.sqrt(p)
        w[:, gamma:] = sample_sphere(p, rng, size=n - gamma).T if gamma < n else 0.0
        return w
    raise ValueError(f"kind must be one of {(ELLIPTICAL, GAUSSIAN, HYBRID)}.")


def assemble(sigmas: np.ndarray, mixing: np.ndarray, xi_squared: np.ndarray) -> np.ndarray:
    """Y = T W D with T = diag(sqrt(sigma)) and D = diag(sqrt(xi^2))."""
    return np.sqrt(sigmas)[:, None] * mixing * np.sqrt(xi_squared)[None, :]


def data_matrix(config: ModelConfig, xi_squared: Sequence[float], rng: np.random.Generator,
                kind: str = ELLIPTICAL, gamma: int = 0) -> np.ndarray:
    xi = np.asarray(xi_squared, dtype=float)
    w = mixing_matrix(config.p, config.n, rng, kind, gamma)
    return assemble(config.spectrum.array, w, xi)


def top_eigenvalues(Y: np.ndarray, k: int = 1) -> np.ndarray:
    """
    Largest k eigenvalues of Y Y*, from the smaller Gram matrix, decreasing
    and clipped at zero.
    """
    p, n = Y.shape
    gram = Y.T @ Y if n < p else Y @ Y.T
    size = gram.shape[0]
    if not 1 <= k <= size:
        raise ValueError(f"k must be in [1, {size}].")
    eigs = linalg.eigh(gram, eigvals_only=True, subset_by_index=[size - k, size - 1])
    return np.maximum(eigs[::-1], 0.0)


def companion_eigenvalues(Y: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Nonzero spectra of Y Y* and Y* Y, both decreasing, of length min(p, n)."""
    k = min(Y.shape)
    outer = linalg.eigvalsh(Y @ Y.T)[::-1][:k]
    inner = linalg.eigvalsh(Y.T @ Y)[::-1][:k]
    return outer, inner


def build_Q(config: ModelConfig, realization: Realization, rng: np.random.Generator,
            ensemble: str = ELLIPTICAL, k: int = 1) -> np.ndarray:
    Y = data_matrix(config, realization.xi_squared, rng, ensemble)
    return top_eigenvalues(Y, k)


def run_trial(config: ModelConfig, edge_report: EdgeReport, seed_base: int, index: int,
              k_top: int = 1, ensembles: Sequence[str] = ENSEMBLES, check_lln: bool = True,
              omega_C: float = DEFAULT_OMEGA_C, omega_epsilon: float = DEFAULT_OMEGA_EPSILON,
              tol: float = DEFAULT_TOL, max_iter: int = DEFAULT_MAX_ITER) -> TrialRecord:
    """
    One Monte-Carlo trial of the rescaled top eigenvalue.

    Samples xi^2, locates the realization's own edge lambda_+ (empirical
    mode), and returns gamma0 n^(2/3) (lambda_1 - lambda_+) for each
    requested ensemble; gamma0 is the limiting value from edge_report.
    A trial whose empirical edge cannot be found is marked excluded.
    """
    streams = trial_rng(seed_base, index)
    realization = sample_realization(config, streams.realization, check_lln=check_lln, edge=edge_report.edge,
                                     seed=(int(seed_base), int(index)), C=omega_C, epsilon=omega_epsilon,
                                     tol=tol, max_iter=max_iter)
    xi = realization.xi_squared

    excluded = False
    try:
        lambda_plus = find_edge(config, xi, "empirical").edge
    except ComputationError as e:
        logging.warning(f"Trial {index}: empirical edge not found ({e}); excluded")
        lambda_plus = float("nan")
        excluded = True

    scale = edge_report.gamma0 * config.n ** (2.0 / 3.0)
    top_q = np.array([])
    top_qg = np.array([])
    stat = float("nan")
    stat_g = float("nan")
    if ELLIPTICAL in ensembles:
        top_q = build_Q(config, realization, streams.elliptical, ELLIPTICAL, k_top)
        stat = scale * (top_q[0] - lambda_plus)
    if GAUSSIAN in ensembles:
        top_qg = build_Q(config, realization, streams.gaussian, GAUSSIAN, k_top)
        stat_g = scale * (top_qg[0] - lambda_plus)
    return TrialRecord(index=index, seed=realization.seed, top_eigs_Q=top_q, top_eigs_QG=top_qg,
                       lambda_plus=lambda_plus, gamma0=edge_report.gamma0, rescaled_stat=float(stat),
                       rescaled_stat_gaussian=float(stat_g), omega_pass=realization.omega.passed,
                       excluded=excluded)


def omega_frequency(config: ModelConfig, ns: Sequence[int], seeds: int, seed_base: int = 0,
                    check_lln: bool = True, C: float = DEFAULT_OMEGA_C,
                    epsilon: float = DEFAULT_OMEGA_EPSILON, tol: float = DEFAULT_TOL,
                    max_iter: int = DEFAULT_MAX_ITER) -> pd.DataFrame:
    """
    Pass rates of the Omega conditions over `seeds` realizations per n.

    With check_lln=False the LLN condition is not evaluated: lln_rate is
    NaN, lln_evaluated is False and pass_rate covers the two gap
    conditions only.

    Returns:
        DataFrame with columns n, trials, gap1_rate, spacing_rate, lln_rate,
        lln_evaluated, pass_rate
    """
    rows = []
    for n in ns:
        sized = config.resized(int(n))
        edge = find_edge(sized, None, "limiting").edge if check_lln else None
        reports = []
        for index in range(seeds):
            xi = sample_radial(sized.radial, sized.n, trial_rng(seed_base, index).realization)
            reports.append(check_omega(sized, xi, C=C, epsilon=epsilon, check_lln=check_lln, edge=edge,
                                       tol=tol, max_iter=max_iter))
        rows.append({
            "n": int(n),
            "trials": seeds,
            "gap1_rate": float(np.mean([r.gap1_pass for r in reports])),
            "spacing_rate": float(np.mean([r.spacing_pass for r in reports])),
            "lln_rate": float(np.mean([r.lln_pass for r in reports])) if check_lln else float("nan"),
            "lln_evaluated": bool(check_lln),
            "pass_rate": float(np.mean([r.passed for r in reports])),
        })
        label = "" if check_lln else " (gap conditions only)"
        logging.info(f"Omega frequency at n={n}: {rows[-1]['pass_rate']:.3f}{label}")
    return pd.DataFrame(rows)
