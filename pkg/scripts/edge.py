"""
Right-most edge of the spectrum, the scale gamma0 and the regularity checks.

The edge (x*, y*) solves F(x, y) = 0 and dF/dx(x, y) = 0 with x* in (-1/l, 0).
For fixed x the equation F(x, y) = 0 has exactly one root y(x) above
sigma_1 g(x), because F increases in y there; the edge is the local minimum
of y(x), where dF/dx changes sign from + to -.
"""
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Dict, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.optimize import brentq

from spectral_model import ModelConfig, RadialLaw
from selfconsistent import (
    DEFAULT_MAX_ITER, DEFAULT_TOL, QuadratureRule, SystemKernel, density, quadrature_rule, resolve_law
)
from utils.run_utils import (
    ComputationError, SolverError, save_json
)

CASE_D_LE_1 = "d_le_1"
CASE_D_GT_1_CHECKED = "d_gt_1_checked"
CASE_D_GT_1_FAILED = "d_gt_1_failed"

REGULARITY_ETAS = (1e-4, 1e-6, 1e-8)
SCAN_POINTS = 400
BOUNDS_RATIO_BAND = (1.0 / 50.0, 50.0)
BOUNDS_MIN_GAP = 1e-3


class EdgeNotFoundError(ComputationError):
    """Exception for an edge system without a bracketed root."""

    def __init__(self, message: str, interval: Tuple[float, float]):
        super().__init__(message)
        self.interval = interval


class DegeneracyError(ComputationError):
    """Exception for a vanishing second derivative at the edge."""

    def __init__(self, message: str, value: float):
        super().__init__(message)
        self.value = value


class RegularityError(ComputationError):
    """Exception for a configuration violating the edge regularity condition."""

    def __init__(self, message: str, report=None):
        super().__init__(message)
        self.report = report


@dataclass(frozen=True)
class RegularityReport:
    sigma1_gap: float
    tau_threshold: float
    d: float
    vartheta: Optional[float]
    case: str
    phi_inv: float
    m2_edge: float

    @property
    def passed(self) -> bool:
        if self.sigma1_gap < self.tau_threshold:
            return False
        return self.case != CASE_D_GT_1_FAILED


@dataclass(frozen=True)
class SqrtEdgeFit:
    exponent: float
    m_exponent: float
    kappas: np.ndarray
    rho: np.ndarray
    m_differences: np.ndarray


@dataclass(frozen=True)
class EdgeReport:
    x_star: float
    edge: float
    mode: str
    gamma0: float = float("nan")
    regularity: Optional[RegularityReport] = None
    sqrt_fit_exponent: float = float("nan")
    multiplicity: int = 1
    candidates: Tuple[Tuple[float, float], ...] = field(default_factory=tuple)
    F_residual: float = 0.0
    Fx_residual: float = 0.0

    def to_dict(self) -> Dict[str, object]:
        reg = self.regularity
        return {
            "x_star": self.x_star,
            "edge": self.edge,
            "gamma0": self.gamma0,
            "mode": self.mode,
            "multiplicity": self.multiplicity,
            "sigma1_gap": None if reg is None else reg.sigma1_gap,
            "vartheta": None if reg is None else reg.vartheta,
            "case": None if reg is None else reg.case,
            "regularity_pass": None if reg is None else reg.passed,
            "sqrt_fit_exponent": self.sqrt_fit_exponent,
            "F_residual": self.F_residual,
            "Fx_residual": self.Fx_residual,
        }


def edge_kernel(config: ModelConfig, law_or_realization=None, mode: str = "limiting") -> SystemKernel:
    """
    Kernel of the edge system: F_{p,c} in limiting mode, F_p in empirical mode.

    Raises:
        ValueError: If the mode does not match the given law or realization
    """
    if mode == "limiting":
        if law_or_realization is None or isinstance(law_or_realization, RadialLaw):
            law = law_or_realization if law_or_realization is not None else config.radial
            return SystemKernel(config, law)
        raise ValueError("limiting mode takes a RadialLaw (or None for config.radial).")
    if mode == "empirical":
        if law_or_realization is None:
            raise ValueError("empirical mode needs a realization.")
        law, _ = resolve_law(config, law_or_realization)
        return SystemKernel(config, law)
    raise ValueError("mode must be 'empirical' or 'limiting'.")


def _pole_bound(kernel: SystemKernel) -> float:
    """Right-most pole of g on the negative axis sits at -1/bound."""
    if kernel.law.is_parametric:
        return kernel.law.l
    return float(np.max(kernel.rule.nodes))


def _y_of_x(kernel: SystemKernel, x: float, y_max: float) -> float:
    lower = kernel.sigma1 * float(kernel.g(x))
    eps = 1e-12 * max(1.0, abs(lower))
    lo = lower + eps
    hi = max(y_max, lo * 2.0)
    for _ in range(60):
        if kernel.F(x, hi) > 0:
            break
        hi *= 2.0
    else:
        raise EdgeNotFoundError(f"No root of F(x, y) in y above {lo:g} at x={x:g}", (lo, hi))
    return brentq(lambda y: float(kernel.F(x, y)), lo, hi, xtol=1e-15, rtol=4 * np.finfo(float).eps,
                  maxiter=500)


def _slope(kernel: SystemKernel, x: float, y_max: float) -> float:
    y = _y_of_x(kernel, x, y_max)
    _, Fx, _, _ = kernel.partials(x, y)
    return float(Fx)


def scan_grid(l_bound: float, points: int = SCAN_POINTS) -> np.ndarray:
    """
    Scan points on (-1/l, 0): uniform in the interior plus a geometric
    cluster at each end, where the minimum of y(x) can sit for spiky laws.
    """
    eps = 1e-9
    inner = np.linspace(0.0, 1.0, points)[1:-1]
    cluster = np.geomspace(eps, 1e-1, 40)
    t = np.unique(np.concatenate([inner, cluster, 1.0 - cluster]))
    t = t[(t >= eps) & (t <= 1.0 - eps)]
    return -1.0 / l_bound + t / l_bound


def find_edge(config: ModelConfig, law_or_realization=None, mode: str = "limiting",
              scan_points: int = SCAN_POINTS) -> EdgeReport:
    """
    Locate the right-most edge.

    Args:
        config: Model configuration
        law_or_realization: RadialLaw (limiting) or sampled xi^2 (empirical)
        mode: "limiting" or "empirical"
        scan_points: Number of uniform scan points in x

    Returns:
        EdgeReport with x_star, edge and the number of candidate minima

    Raises:
        EdgeNotFoundError: If y(x) has no interior minimum on the scan
    """
    kernel = edge_kernel(config, law_or_realization, mode)
    l_bound = _pole_bound(kernel)
    y_max = 10.0 * kernel.scale
    xs = scan_grid(l_bound, scan_points)
    interval = (float(xs[0]), float(xs[-1]))

    slopes = np.array([_slope(kernel, x, y_max) for x in xs])
    candidates = []
    for i in range(xs.size - 1):
        if slopes[i] > 0 and slopes[i + 1] <= 0:
            if slopes[i + 1] == 0:
                x_root = float(xs[i + 1])
            else:
                x_root = brentq(lambda x: _slope(kernel, x, y_max), xs[i], xs[i + 1],
                                xtol=1e-15, rtol=4 * np.finfo(float).eps, maxiter=500)
            candidates.append((x_root, _y_of_x(kernel, x_root, y_max)))
    if not candidates:
        logging.error(f"Edge not found: no sign change of dF/dx on x in {interval}")
        raise EdgeNotFoundError("No sign change of dF/dx along y(x)", interval)

    x_star, y_star = max(candidates, key=lambda c: c[1])
    if len(candidates) > 1:
        logging.warning(f"Edge system has {len(candidates)} solutions; using the largest y={y_star:.10g}")
    F, Fx, _, _ = kernel.partials(x_star, y_star)
    logging.info(f"Edge ({mode}): x*={x_star:.12g}, edge={y_star:.12g}")
    return EdgeReport(x_star=float(x_star), edge=float(y_star), mode=mode,
                      multiplicity=len(candidates), candidates=tuple(candidates),
                      F_residual=abs(float(F)), Fx_residual=abs(float(Fx)))


def edge_stieltjes(config: ModelConfig, rule: QuadratureRule, report: EdgeReport,
                   law: Optional[RadialLaw] = None) -> Tuple[float, float, float]:
    """
    Real limits (m1, m2, m) of the Stieltjes transforms at the edge.

    m1 = x*, m2 = -g(x*) / edge, and m follows from the third map.
    """
    kernel = SystemKernel(config, law if law is not None else config.radial, rule=rule)
    m1 = report.x_star
    m2 = -float(kernel.g(m1)) / report.edge
    m = float(np.real(kernel.map_m(m2, report.edge)))
    return m1, m2, m


def gamma0(config: ModelConfig, law: Optional[RadialLaw], report: EdgeReport) -> float:
    """
    The fluctuation scale at the edge.

    gamma0^3 = (-2 dF/dy / d2F/dx2) * (phi^-1 int s / (L (1 + s x*)^2) dF(s))^2
    at (x*, L). Passing the realization's point-mass law gives the
    empirical analogue.

    Raises:
        DegeneracyError: If d2F/dx2 vanishes
        RegularityError: If gamma0^3 is not positive
    """
    kernel = SystemKernel(config, law if law is not None else config.radial)
    x, y = report.x_star, report.edge
    _, _, Fy, Fxx = kernel.partials(x, y)
    Fy, Fxx = float(Fy), float(Fxx)
    if Fxx == 0:
        raise DegeneracyError("Second derivative of F vanishes at the edge", Fxx)
    s = kernel.rule.nodes
    integral = kernel.phi_inv * float(np.sum(kernel.rule.weights * s / (y * (1.0 + s * x) ** 2)))
    cube = (-2.0 * Fy / Fxx) * integral ** 2
    if not cube > 0:
        logging.error(f"gamma0^3={cube:g} is not positive (dF/dy={Fy:g}, d2F/dx2={Fxx:g})")
        raise RegularityError(f"gamma0^3={cube:g} is not positive")
    return float(np.cbrt(cube))


def _edge_limit_m2(kernel: SystemKernel, edge: float, etas: Sequence[float], tol: float = DEFAULT_TOL,
                   max_iter: int = DEFAULT_MAX_ITER) -> float:
    """
    Extrapolate m2(edge + i*eta) to eta = 0, fitting a quadratic in sqrt(eta).
    """
    triples = kernel.ladder(edge, sorted(etas, reverse=True), tol=tol, max_iter=max_iter)
    t = np.sqrt([tr.z.imag for tr in triples])
    values = np.array([tr.m2.real for tr in triples])
    return float(np.polyfit(t, values, len(t) - 1)[-1])


def vartheta(config: ModelConfig, law: RadialLaw, edge: float) -> float:
    """
    The threshold compared with phi^-1 when d > 1.

    Raises:
        DomainError: If d <= 1, where the integrals diverge
    """
    upsilon1, upsilon2 = upsilon_integrals(config, law)
    sigmas = config.spectrum.array
    return float(config.phi_inv / config.p * np.sum(sigmas ** 2 * upsilon1 / (edge - sigmas * upsilon2) ** 2))


def upsilon_integrals(config: ModelConfig, law: RadialLaw) -> Tuple[float, float]:
    rule2 = quadrature_rule(law, endpoint_power=2)
    rule1 = quadrature_rule(law, endpoint_power=1)
    upsilon1 = config.phi_inv * law.l ** 2 * float(np.sum(rule2.weights * rule2.nodes ** 2))
    upsilon2 = config.phi_inv * law.l * float(np.sum(rule1.weights * rule1.nodes))
    return upsilon1, upsilon2


def check_regularity(config: ModelConfig, law: Optional[RadialLaw], report: EdgeReport,
                     etas: Sequence[float] = REGULARITY_ETAS, tol: float = DEFAULT_TOL,
                     max_iter: int = DEFAULT_MAX_ITER) -> RegularityReport:
    """
    Check the sigma_1 gap |1 + sigma_1 m2(L)| >= tau and, for d > 1,
    the condition phi^-1 < vartheta.
    """
    law = law if law is not None else config.radial
    kernel = SystemKernel(config, law)
    try:
        m2_edge = _edge_limit_m2(kernel, report.edge, etas, tol, max_iter)
    except SolverError as e:
        logging.warning(f"Edge ladder failed ({e}); using the real edge limit of m2")
        m2_edge = -float(kernel.g(report.x_star)) / report.edge
    gap = abs(1.0 + kernel.sigma1 * m2_edge)

    theta = None
    if law.d <= 1:
        case = CASE_D_LE_1
    else:
        theta = vartheta(config, law, report.edge)
        case = CASE_D_GT_1_CHECKED if config.phi_inv < theta else CASE_D_GT_1_FAILED
    reg = RegularityReport(sigma1_gap=float(gap), tau_threshold=config.tau, d=law.d, vartheta=theta,
                           case=case, phi_inv=config.phi_inv, m2_edge=float(m2_edge))
    if not reg.passed:
        logging.warning(f"Regularity check failed: gap={gap:.6g}, tau={config.tau:g}, case={case}")
    return reg


def sqrt_edge_fit(config: ModelConfig, law_or_realization=None, mode: str = "limiting",
                  variant: str = "m", report: Optional[EdgeReport] = None,
                  kappas: Optional[Sequence[float]] = None, tol: float = DEFAULT_TOL,
                  max_iter: int = DEFAULT_MAX_ITER) -> SqrtEdgeFit:
    """
    Fit the decay exponent of the density at the edge.

    Fits log rho(edge - kappa) against log kappa for kappa in
    [1e-4, 1e-2] * edge, and log |m(edge) - m(edge - kappa)| the same way.
    Both slopes should be close to 1/2.
    """
    if report is None:
        report = find_edge(config, law_or_realization, mode)
    edge = report.edge
    kappas = np.geomspace(1e-4, 1e-2, 9) * edge if kappas is None else np.asarray(kappas, dtype=float)
    energies = edge - kappas

    xi = law_or_realization if mode == "empirical" else None
    kernel = edge_kernel(config, law_or_realization, mode)
    if mode == "limiting":
        curve = density(config.with_radial(kernel.law), "limiting", variant, energies, eta_scale=kappas,
                        tol=tol, max_iter=max_iter)
    else:
        curve = density(config, "empirical", variant, energies, xi_squared=xi, eta_scale=kappas,
                        tol=tol, max_iter=max_iter)
    if np.any(curve.values <= 0):
        raise SolverError("Density vanishes inside the support near the edge")
    exponent = float(np.polyfit(np.log(kappas), np.log(curve.values), 1)[0])

    m1_edge, m2_edge, m_edge = edge_stieltjes(config, kernel.rule, report, law=kernel.law)
    edge_value = {"m": m_edge, "m1": m1_edge, "m2": m2_edge}[variant]
    diffs = []
    for energy, kappa in zip(energies, kappas):
        triple = kernel.ladder(float(energy), [1e-4 * kappa], tol=tol, max_iter=max_iter)[0]
        diffs.append(abs(edge_value - triple.variant(variant)))
    diffs = np.array(diffs)
    m_exponent = float(np.polyfit(np.log(kappas), np.log(diffs), 1)[0])
    logging.info(f"Edge decay exponents ({variant}): density {exponent:.4f}, transform {m_exponent:.4f}")
    return SqrtEdgeFit(exponent, m_exponent, kappas, curve.values, diffs)


def check_stieltjes_bounds(config: ModelConfig, law: Optional[RadialLaw], z_grid: Sequence[complex],
                           report: EdgeReport) -> pd.DataFrame:
    """
    Diagnostic table of the Stieltjes-transform bounds near the edge.

    Im m is compared with sqrt(kappa + eta) inside the support and with
    eta / sqrt(kappa + eta) outside it; the smallest denominators
    |1 + sigma_i m2| and |1 + s m1| are recorded.

    Returns:
        DataFrame with one row per z and a `flagged` column
    """
    kernel = SystemKernel(config, law if law is not None else config.radial)
    rows = []
    initial = None
    for z in z_grid:
        z = complex(z)
        triple = kernel.solve(z, initial=initial)
        initial = triple.m1
        kappa = abs(z.real - report.edge)
        root = math.sqrt(kappa + z.imag)
        predicted = root if z.real <= report.edge else z.imag / root
        ratio = triple.m.imag / predicted
        min_sigma = float(np.min(np.abs(1.0 + kernel.sigma_atoms * triple.m2)))
        min_xi = float(np.min(np.abs(1.0 + kernel.rule.nodes * triple.m1)))
        flagged = (not (BOUNDS_RATIO_BAND[0] <= ratio <= BOUNDS_RATIO_BAND[1])
                   or min_sigma < BOUNDS_MIN_GAP or min_xi < BOUNDS_MIN_GAP)
        rows.append({
            "z_re": z.real,
            "z_im": z.imag,
            "abs_m": abs(triple.m),
            "im_m": triple.m.imag,
            "predicted": predicted,
            "ratio": ratio,
            "min_sigma_gap": min_sigma,
            "min_xi_gap": min_xi,
            "flagged": flagged,
        })
    df = pd.DataFrame(rows)
    if df["flagged"].any():
        logging.warning(f"{int(df['flagged'].sum())} of {len(df)} grid points outside the expected bounds")
    return df


def describe_edge(config: ModelConfig, law_or_realization=None, mode: str = "limiting",
                  fit: bool = True, tol: float = DEFAULT_TOL, max_iter: int = DEFAULT_MAX_ITER) -> EdgeReport:
    """
    Full edge report: location, regularity, gamma0 and the decay exponent.

    gamma0 is left as NaN when it cannot be computed (degenerate or
    irregular edge); the regularity report records why.
    """
    report = find_edge(config, law_or_realization, mode)
    kernel = edge_kernel(config, law_or_realization, mode)
    regularity = check_regularity(config, kernel.law, report, tol=tol, max_iter=max_iter)
    try:
        g0 = gamma0(config, kernel.law, report)
    except (DegeneracyError, RegularityError) as e:
        logging.warning(f"gamma0 unavailable: {e}")
        g0 = float("nan")
    exponent = float("nan")
    if fit:
        exponent = sqrt_edge_fit(config, law_or_realization, mode, report=report, tol=tol,
                                 max_iter=max_iter).exponent
    return replace(report, gamma0=g0, regularity=regularity, sqrt_fit_exponent=exponent)


def save_edge_report(report: EdgeReport, output_path: str) -> None:
    save_json(report.to_dict(), output_path)
